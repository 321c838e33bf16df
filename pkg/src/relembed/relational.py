"""Relational model: schemas with keys and foreign keys, databases of facts,
CSV ingestion, batch insertion and cascading deletion.

Null is represented by ``None``. Numeric attributes hold ``float`` values,
every other domain kind holds ``str``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import yaml

from .errors import (
    ConstraintViolation,
    NotFound,
    ParseError,
    UnknownAttribute,
    UnknownRelation,
)

NULL = None
DOMAIN_KINDS = ("numeric", "categorical", "identifier", "text")
FACT_ID_COLUMN = "_fact_id"


@dataclass(frozen=True)
class AttributeSchema:
    name: str
    domain_kind: str = "categorical"
    kernel_name: Optional[str] = None
    variance: Optional[float] = None

    def __post_init__(self):
        if self.domain_kind not in DOMAIN_KINDS:
            raise ParseError(f"attribute {self.name!r}: unknown domain_kind {self.domain_kind!r}")


@dataclass(frozen=True)
class ForeignKey:
    """Inclusion dependency ``source_relation[source_attrs] <= target_relation[target_attrs]``."""

    source_relation: str
    source_attrs: tuple
    target_relation: str
    target_attrs: tuple

    def __post_init__(self):
        object.__setattr__(self, "source_attrs", tuple(self.source_attrs))
        object.__setattr__(self, "target_attrs", tuple(self.target_attrs))

    def __str__(self):
        return (f"{self.source_relation}[{','.join(self.source_attrs)}] <= "
                f"{self.target_relation}[{','.join(self.target_attrs)}]")


@dataclass(frozen=True)
class RelationSchema:
    name: str
    attributes: tuple
    key: tuple

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        object.__setattr__(self, "key", tuple(self.key))
        names = self.attribute_names
        if len(set(names)) != len(names):
            raise ParseError(f"relation {self.name!r}: duplicate attribute names")
        if not self.key:
            raise ParseError(f"relation {self.name!r}: empty key")
        for k in self.key:
            if k not in names:
                raise ParseError(f"relation {self.name!r}: key attribute {k!r} is not an attribute")

    @property
    def attribute_names(self) -> tuple:
        return tuple(a.name for a in self.attributes)

    @property
    def arity(self) -> int:
        return len(self.attributes)

    def index(self, attribute: str) -> int:
        try:
            return self.attribute_names.index(attribute)
        except ValueError:
            raise UnknownAttribute(f"{self.name}.{attribute}") from None

    def attribute(self, name: str) -> AttributeSchema:
        return self.attributes[self.index(name)]


class Schema:
    """Relation schemas plus foreign keys, validated on construction."""

    def __init__(self, relations: Sequence[RelationSchema], foreign_keys: Sequence[ForeignKey] = ()):
        self.relations = tuple(relations)
        self.foreign_keys = tuple(foreign_keys)
        self._by_name = {}
        for rel in self.relations:
            if rel.name in self._by_name:
                raise ParseError(f"duplicate relation name {rel.name!r}")
            self._by_name[rel.name] = rel
        for fk in self.foreign_keys:
            self._check_fk(fk)
        self._fk_attrs = set()
        for fk in self.foreign_keys:
            self._fk_attrs.update((fk.source_relation, a) for a in fk.source_attrs)
            self._fk_attrs.update((fk.target_relation, a) for a in fk.target_attrs)

    def _check_fk(self, fk: ForeignKey) -> None:
        for rel_name in (fk.source_relation, fk.target_relation):
            if rel_name not in self._by_name:
                raise ParseError(f"foreign key {fk}: unknown relation {rel_name!r}")
        if not fk.source_attrs or len(fk.source_attrs) != len(fk.target_attrs):
            raise ParseError(f"foreign key {fk}: attribute sequences must be nonempty and of equal length")
        src, tgt = self._by_name[fk.source_relation], self._by_name[fk.target_relation]
        for a in fk.source_attrs:
            if a not in src.attribute_names:
                raise ParseError(f"foreign key {fk}: {a!r} is not an attribute of {src.name}")
        if len(set(fk.target_attrs)) != len(fk.target_attrs) or set(fk.target_attrs) != set(tgt.key):
            raise ParseError(f"foreign key {fk}: target attributes must be exactly the key of {tgt.name}")

    def __getitem__(self, name: str) -> RelationSchema:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownRelation(name) from None

    def __contains__(self, name) -> bool:
        return name in self._by_name

    def __iter__(self) -> Iterator[RelationSchema]:
        return iter(self.relations)

    def __eq__(self, other):
        return (isinstance(other, Schema) and self.relations == other.relations
                and self.foreign_keys == other.foreign_keys)

    def __hash__(self):
        return hash((self.relations, self.foreign_keys))

    @property
    def relation_names(self) -> tuple:
        return tuple(r.name for r in self.relations)

    def is_fk_attribute(self, relation: str, attribute: str) -> bool:
        """True if the attribute occurs on either side of some foreign key."""
        return (relation, attribute) in self._fk_attrs

    def fk_targets(self) -> set:
        return {fk.target_relation for fk in self.foreign_keys}

    def to_dict(self) -> dict:
        rels = []
        for r in self.relations:
            attrs = []
            for a in r.attributes:
                entry = {"name": a.name, "domain_kind": a.domain_kind}
                if a.kernel_name is not None:
                    entry["kernel_name"] = a.kernel_name
                if a.variance is not None:
                    entry["variance"] = a.variance
                attrs.append(entry)
            rels.append({"name": r.name, "attributes": attrs, "key": list(r.key)})
        fks = [{"source_relation": fk.source_relation, "source_attrs": list(fk.source_attrs),
                "target_relation": fk.target_relation, "target_attrs": list(fk.target_attrs)}
               for fk in self.foreign_keys]
        return {"relations": rels, "foreign_keys": fks}

    @classmethod
    def from_dict(cls, doc: dict) -> "Schema":
        if not isinstance(doc, dict) or "relations" not in doc:
            raise ParseError("schema descriptor must be a mapping with a 'relations' entry")
        unknown = set(doc) - {"relations", "foreign_keys"}
        if unknown:
            raise ParseError(f"schema descriptor: unknown keys {sorted(unknown)}")
        try:
            relations = []
            for r in doc["relations"]:
                attrs = []
                for a in r["attributes"]:
                    if isinstance(a, str):
                        a = {"name": a}
                    extra = set(a) - {"name", "domain_kind", "kernel_name", "variance"}
                    if extra:
                        raise ParseError(f"attribute {a.get('name')!r}: unknown keys {sorted(extra)}")
                    variance = a.get("variance")
                    attrs.append(AttributeSchema(
                        name=str(a["name"]),
                        domain_kind=a.get("domain_kind", "categorical"),
                        kernel_name=a.get("kernel_name"),
                        variance=None if variance is None else float(variance),
                    ))
                relations.append(RelationSchema(str(r["name"]), attrs, [str(k) for k in r["key"]]))
            fks = [ForeignKey(f["source_relation"], f["source_attrs"], f["target_relation"], f["target_attrs"])
                   for f in doc.get("foreign_keys") or ()]
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed schema descriptor: {exc!r}") from exc
        return cls(relations, fks)

    def digest(self) -> str:
        """Stable SHA-256 of the canonical JSON rendering."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_schema(path) -> Schema:
    """Read a YAML or JSON schema descriptor."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return Schema.from_dict(doc)


@dataclass(frozen=True)
class Fact:
    relation: str
    values: tuple
    fact_id: Optional[int] = field(default=None, compare=True)

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))


class Database:
    """A set of facts over a schema, with key and reverse foreign-key indexes.

    Mutating operations validate before touching any state, so a failed
    insert leaves the database unchanged.
    """

    def __init__(self, schema: Schema):
        self.schema = schema
        self.facts = {r.name: {} for r in schema}
        self.by_id = {}
        self.key_index = {r.name: {} for r in schema}
        self.fk_reverse_index = [{} for _ in schema.foreign_keys]
        self._key_pos = {r.name: tuple(r.index(k) for k in r.key) for r in schema}
        # per FK: source positions, and target positions in FK (not key) order
        self._fk_src_pos = [tuple(schema[fk.source_relation].index(a) for a in fk.source_attrs)
                            for fk in schema.foreign_keys]
        self._fk_tgt_pos = [tuple(schema[fk.target_relation].index(a) for a in fk.target_attrs)
                            for fk in schema.foreign_keys]
        # permutation from FK target order to key order
        self._fk_to_key = []
        for fk in schema.foreign_keys:
            key = schema[fk.target_relation].key
            self._fk_to_key.append(tuple(fk.target_attrs.index(k) for k in key))
        self._next_id = 0

    # ---- read access -------------------------------------------------

    def __len__(self):
        return len(self.by_id)

    def __contains__(self, fact) -> bool:
        fid = fact.fact_id if isinstance(fact, Fact) else fact
        return fid in self.by_id

    def __eq__(self, other):
        return (isinstance(other, Database) and self.schema == other.schema
                and set(self.by_id.values()) == set(other.by_id.values()))

    def relation_facts(self, relation: str) -> list:
        if relation not in self.facts:
            raise UnknownRelation(relation)
        return list(self.facts[relation].values())

    def fact(self, fact_id: int) -> Fact:
        try:
            return self.by_id[fact_id]
        except KeyError:
            raise NotFound(f"fact {fact_id}") from None

    def value(self, fact: Fact, attribute: str):
        return fact.values[self.schema[fact.relation].index(attribute)]

    def key_of(self, fact: Fact) -> tuple:
        return tuple(fact.values[i] for i in self._key_pos[fact.relation])

    def lookup(self, relation: str, key: Sequence) -> Optional[Fact]:
        fid = self.key_index[relation].get(tuple(key))
        return None if fid is None else self.by_id[fid]

    def fk_source_values(self, fk_index: int, fact: Fact) -> Optional[tuple]:
        """The referencing tuple of ``fact`` under FK ``fk_index``; None if it has a null."""
        vals = tuple(fact.values[i] for i in self._fk_src_pos[fk_index])
        return None if any(v is None for v in vals) else vals

    def referenced(self, fk_index: int, fact: Fact) -> Optional[int]:
        """fact_id of the fact referenced by ``fact`` via FK ``fk_index``."""
        vals = self.fk_source_values(fk_index, fact)
        if vals is None:
            return None
        key = tuple(vals[j] for j in self._fk_to_key[fk_index])
        return self.key_index[self.schema.foreign_keys[fk_index].target_relation].get(key)

    def referencing(self, fk_index: int, fact: Fact) -> list:
        """Sorted fact_ids of facts referencing ``fact`` via FK ``fk_index``."""
        vals = tuple(fact.values[i] for i in self._fk_tgt_pos[fk_index])
        return sorted(self.fk_reverse_index[fk_index].get(vals, ()))

    def active_domain(self, relation: str, attribute: str) -> set:
        pos = self.schema[relation].index(attribute)
        return {f.values[pos] for f in self.facts[relation].values() if f.values[pos] is not None}

    def copy(self) -> "Database":
        other = Database(self.schema)
        for fid in sorted(self.by_id):
            other._add(self.by_id[fid])
        other._next_id = self._next_id
        return other

    # ---- construction & mutation -------------------------------------

    def _coerce(self, fact: Fact) -> Fact:
        rel = self.schema[fact.relation]
        if len(fact.values) != rel.arity:
            raise ConstraintViolation(
                f"{rel.name}: expected {rel.arity} values, got {len(fact.values)}",
                relation=rel.name, constraint="arity")
        return fact

    def _add(self, fact: Fact) -> None:
        self.facts[fact.relation][fact.fact_id] = fact
        self.by_id[fact.fact_id] = fact
        self.key_index[fact.relation][self.key_of(fact)] = fact.fact_id
        for k, fk in enumerate(self.schema.foreign_keys):
            if fk.source_relation == fact.relation:
                vals = self.fk_source_values(k, fact)
                if vals is not None:
                    self.fk_reverse_index[k].setdefault(vals, set()).add(fact.fact_id)
        self._next_id = max(self._next_id, fact.fact_id + 1)

    def _remove(self, fact: Fact) -> None:
        del self.facts[fact.relation][fact.fact_id]
        del self.by_id[fact.fact_id]
        del self.key_index[fact.relation][self.key_of(fact)]
        for k, fk in enumerate(self.schema.foreign_keys):
            if fk.source_relation == fact.relation:
                vals = self.fk_source_values(k, fact)
                if vals is not None:
                    refs = self.fk_reverse_index[k][vals]
                    refs.discard(fact.fact_id)
                    if not refs:
                        del self.fk_reverse_index[k][vals]

    def _check_batch(self, batch: Sequence[Fact], rows: Optional[Sequence] = None) -> None:
        """Validate that ``self`` plus ``batch`` satisfies every constraint."""
        rows = rows or [None] * len(batch)
        new_keys = {}
        for fact, row in zip(batch, rows):
            self._coerce(fact)
            key = self.key_of(fact)
            if any(v is None for v in key):
                raise ConstraintViolation(f"{fact.relation}: null in key {key}",
                                          relation=fact.relation, row=row, constraint="key")
            if key in self.key_index[fact.relation] or (fact.relation, key) in new_keys:
                raise ConstraintViolation(f"{fact.relation}: duplicate key {key}",
                                          relation=fact.relation, row=row, constraint="key")
            new_keys[(fact.relation, key)] = fact
        for fact, row in zip(batch, rows):
            for k, fk in enumerate(self.schema.foreign_keys):
                if fk.source_relation != fact.relation:
                    continue
                vals = self.fk_source_values(k, fact)
                if vals is None:
                    continue
                key = tuple(vals[j] for j in self._fk_to_key[k])
                if key not in self.key_index[fk.target_relation] and (fk.target_relation, key) not in new_keys:
                    raise ConstraintViolation(
                        f"{fact.relation}: {dict(zip(fk.source_attrs, vals))} has no match for FK {fk}",
                        relation=fact.relation, row=row, constraint=str(fk))

    def _assign_ids(self, batch: Sequence[Fact]) -> list:
        out, used = [], set()
        next_id = self._next_id
        for f in batch:
            if f.fact_id is not None and f.fact_id not in self.by_id and f.fact_id not in used:
                fid = f.fact_id
            else:
                while next_id in self.by_id or next_id in used:
                    next_id += 1
                fid = next_id
            used.add(fid)
            out.append(Fact(f.relation, f.values, fid))
        return out

    def insert_facts(self, batch: Iterable[Fact], rows=None) -> list:
        """Insert a batch atomically and return the stored facts (with ids).

        Facts carrying an unused ``fact_id`` keep it; others get fresh ids.
        """
        batch = list(batch)
        for f in batch:
            if f.relation not in self.facts:
                raise UnknownRelation(f.relation)
        self._check_batch(batch, rows)
        stored = self._assign_ids(batch)
        for f in stored:
            self._add(f)
        return stored

    def cascade_removal_set(self, fact: Fact, protected: Iterable[str] = ()) -> list:
        """Facts removed by deleting ``fact`` with ON DELETE CASCADE semantics.

        Two rules run to a fixpoint: facts referencing a removed fact are
        removed; a fact of an FK-target relation that was referenced, and is
        now referenced only by removed facts, is removed as well. Relations
        in ``protected`` are exempt from the second rule.
        """
        if isinstance(fact, int):
            fact = self.fact(fact)
        if fact.fact_id not in self.by_id:
            raise NotFound(f"fact {fact.fact_id}")
        fks = self.schema.foreign_keys
        targets = self.schema.fk_targets() - set(protected)
        removed = {fact.fact_id}
        queue = [fact.fact_id]
        while queue:
            fid = queue.pop()
            f = self.by_id[fid]
            for k, fk in enumerate(fks):
                if fk.target_relation == f.relation:
                    for rid in self.referencing(k, f):
                        if rid not in removed:
                            removed.add(rid)
                            queue.append(rid)
                if fk.source_relation == f.relation:
                    gid = self.referenced(k, f)
                    if gid is None or gid in removed:
                        continue
                    g = self.by_id[gid]
                    if g.relation not in targets:
                        continue
                    if all(r in removed for r in self._all_referencing(g)):
                        removed.add(gid)
                        queue.append(gid)
        return [self.by_id[i] for i in sorted(removed)]

    def _all_referencing(self, g: Fact) -> Iterator[int]:
        for k, fk in enumerate(self.schema.foreign_keys):
            if fk.target_relation == g.relation:
                yield from self.referencing(k, g)

    def cascade_delete(self, fact, protected: Iterable[str] = ()) -> list:
        """Delete ``fact`` and its cascade set; return the removed facts in id order."""
        removed = self.cascade_removal_set(fact, protected)
        for f in removed:
            self._remove(f)
        return removed

    def delete_facts(self, facts: Iterable[Fact]) -> None:
        """Plain removal without cascading; the result must still be valid."""
        facts = [self.fact(f.fact_id if isinstance(f, Fact) else f) for f in facts]
        gone = {f.fact_id for f in facts}
        for f in facts:
            for rid in self._all_referencing(f):
                if rid not in gone:
                    raise ConstraintViolation(f"fact {f.fact_id} is still referenced by {rid}",
                                              relation=f.relation, constraint="fk")
        for f in facts:
            self._remove(f)

    def validate(self) -> None:
        """Full revalidation pass of both constraint families from scratch."""
        fresh = Database(self.schema)
        facts = [self.by_id[i] for i in sorted(self.by_id)]
        fresh._check_batch(facts)


# ---- file I/O ---------------------------------------------------------

def parse_cell(cell: str, attr: AttributeSchema, relation: str, row: int):
    if cell == "":
        return None
    if attr.domain_kind == "numeric":
        try:
            value = float(cell)
        except ValueError:
            raise ParseError(f"{relation} row {row}: {attr.name}={cell!r} is not numeric") from None
        if not math.isfinite(value):
            raise ParseError(f"{relation} row {row}: {attr.name}={cell!r} is not finite")
        return value
    return cell


def format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def read_relation_csv(path, rel: RelationSchema) -> list:
    """Parse one relation file into ``(row_number, values, fact_id or None)`` triples."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return out
        names = rel.attribute_names
        has_id = FACT_ID_COLUMN in header
        cols = [c for c in header if c != FACT_ID_COLUMN]
        if sorted(cols) != sorted(names) or len(cols) != len(names):
            raise ParseError(f"{path}: header {header} does not match attributes {list(names)}")
        pos = [header.index(n) for n in names]
        id_pos = header.index(FACT_ID_COLUMN) if has_id else None
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path} row {row_no}: expected {len(header)} cells, got {len(row)}")
            values = tuple(parse_cell(row[p], a, rel.name, row_no) for p, a in zip(pos, rel.attributes))
            fid = None
            if id_pos is not None and row[id_pos] != "":
                try:
                    fid = int(row[id_pos])
                except ValueError:
                    raise ParseError(f"{path} row {row_no}: bad {FACT_ID_COLUMN} {row[id_pos]!r}") from None
            out.append((row_no, values, fid))
    return out


def _relation_path(data_dir, name: str) -> Path:
    return Path(data_dir) / f"{name}.csv"


def load_database(schema_descriptor, data_dir) -> Database:
    """Load a validated database from a schema descriptor and one CSV per relation.

    Fact ids follow load order (relation order, then row order) unless the
    files carry a ``_fact_id`` column, as written by :func:`save_database`.
    """
    schema = schema_descriptor if isinstance(schema_descriptor, Schema) else load_schema(schema_descriptor)
    db = Database(schema)
    batch, rows = [], []
    for rel in schema:
        path = _relation_path(data_dir, rel.name)
        if not path.exists():
            raise ParseError(f"missing data file {path}")
        for row_no, values, fid in read_relation_csv(path, rel):
            batch.append(Fact(rel.name, values, fid))
            rows.append(row_no)
    db.insert_facts(batch, rows)
    return db


def save_database(db: Database, schema_path, data_dir, with_ids: bool = True) -> None:
    os.makedirs(data_dir, exist_ok=True)
    with open(schema_path, "w", encoding="utf-8") as fh:
        json.dump(db.schema.to_dict(), fh, indent=2)
        fh.write("\n")
    for rel in db.schema:
        with open(_relation_path(data_dir, rel.name), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            header = list(rel.attribute_names) + ([FACT_ID_COLUMN] if with_ids else [])
            writer.writerow(header)
            for fid in sorted(db.facts[rel.name]):
                f = db.facts[rel.name][fid]
                row = [format_cell(v) for v in f.values] + ([str(fid)] if with_ids else [])
                writer.writerow(row)


def read_new_facts(schema: Schema, paths: Iterable, with_rows: bool = False):
    """Read CSV files named ``<Relation>.csv`` into fact objects without ids.

    With ``with_rows`` also return a ``"file:row"`` label per fact for diagnostics.
    """
    out, rows = [], []
    for p in paths:
        p = Path(p)
        rel = schema[p.stem]
        for row_no, values, fid in read_relation_csv(p, rel):
            out.append(Fact(rel.name, values, fid))
            rows.append(f"{p.name}:{row_no}")
    return (out, rows) if with_rows else out


# module-level aliases matching the functional surface

def insert_facts(db: Database, batch: Iterable[Fact]) -> Database:
    db.insert_facts(batch)
    return db


def cascade_delete(db: Database, fact, protected: Iterable[str] = ()):
    removed = db.cascade_delete(fact, protected)
    return db, removed


def active_domain(db: Database, relation: str, attribute: str) -> set:
    return db.active_domain(relation, attribute)
