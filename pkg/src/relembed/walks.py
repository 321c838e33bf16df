"""Walk schemes along foreign keys, exact endpoint distributions and sampling.

A walk scheme is a typed path over foreign keys; a walk is a concrete fact
sequence following it, choosing the next fact uniformly among the matches at
every hop. Lengths count edges, so the empty scheme ends at its start fact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Dict, Optional

from .errors import ParseError, RelationMismatch, UnknownRelation
from .relational import Database, Fact, Schema

FORWARD = "forward"
BACKWARD = "backward"
SUM_TOL = 1e-12


@dataclass(frozen=True)
class Step:
    fk_index: int
    direction: str

    def relations(self, schema: Schema) -> tuple:
        fk = schema.foreign_keys[self.fk_index]
        if self.direction == FORWARD:
            return fk.source_relation, fk.target_relation
        return fk.target_relation, fk.source_relation

    def render(self, schema: Schema) -> str:
        fk = schema.foreign_keys[self.fk_index]
        left = f"{fk.source_relation}[{','.join(fk.source_attrs)}]"
        right = f"{fk.target_relation}[{','.join(fk.target_attrs)}]"
        return f"{left}--{right}" if self.direction == FORWARD else f"{right}--{left}"

    def sort_key(self) -> tuple:
        return (self.fk_index, 0 if self.direction == FORWARD else 1)


@dataclass(frozen=True)
class WalkScheme:
    start_relation: str
    steps: tuple = ()

    @property
    def length(self) -> int:
        return len(self.steps)

    def end_relation(self, schema: Schema) -> str:
        return self.steps[-1].relations(schema)[1] if self.steps else self.start_relation

    def sort_key(self) -> tuple:
        return (len(self.steps), tuple(s.sort_key() for s in self.steps))

    def render(self, schema: Schema) -> str:
        if not self.steps:
            return self.start_relation
        return ", ".join(s.render(schema) for s in self.steps)

    def prefix(self, n: int) -> "WalkScheme":
        return WalkScheme(self.start_relation, self.steps[:n])


_SIDE = re.compile(r"^\s*([^\[\]]+)\[([^\]]*)\]\s*$")


def parse_scheme(text: str, schema: Schema) -> WalkScheme:
    """Inverse of :meth:`WalkScheme.render`."""
    text = text.strip()
    if "--" not in text:
        if text not in schema:
            raise ParseError(f"unknown relation in walk scheme {text!r}")
        return WalkScheme(text, ())
    steps = []
    start = None
    # attribute lists contain commas too, so split on '], ' boundaries
    hops = re.split(r"(?<=\])\s*,\s*(?=[^\[\]]+\[)", text)
    for hop in hops:
        try:
            left, right = hop.split("--")
        except ValueError:
            raise ParseError(f"malformed hop {hop!r}") from None
        ml, mr = _SIDE.match(left), _SIDE.match(right)
        if not ml or not mr:
            raise ParseError(f"malformed hop {hop!r}")
        lrel, lattrs = ml.group(1).strip(), tuple(a for a in ml.group(2).split(",") if a)
        rrel, rattrs = mr.group(1).strip(), tuple(a for a in mr.group(2).split(",") if a)
        step = None
        for k, fk in enumerate(schema.foreign_keys):
            if (fk.source_relation, fk.source_attrs, fk.target_relation, fk.target_attrs) == (lrel, lattrs, rrel, rattrs):
                step = Step(k, FORWARD)
                break
            if (fk.target_relation, fk.target_attrs, fk.source_relation, fk.source_attrs) == (lrel, lattrs, rrel, rattrs):
                step = Step(k, BACKWARD)
                break
        if step is None:
            raise ParseError(f"hop {hop!r} matches no foreign key")
        if start is None:
            start = lrel
        elif steps[-1].relations(schema)[1] != lrel:
            raise ParseError(f"hop {hop!r} does not chain")
        steps.append(step)
    return WalkScheme(start, tuple(steps))


def _steps_from(schema: Schema, relation: str) -> list:
    out = []
    for k, fk in enumerate(schema.foreign_keys):
        if fk.source_relation == relation:
            out.append(Step(k, FORWARD))
        if fk.target_relation == relation:
            out.append(Step(k, BACKWARD))
    return sorted(out, key=Step.sort_key)


def enumerate_walk_schemes(schema: Schema, start: str, max_len: int) -> list:
    """All schemes of length 0..max_len from ``start``, in canonical order.

    Immediate reversal of the previous step is allowed.
    """
    if start not in schema:
        raise UnknownRelation(start)
    if max_len < 0:
        raise ValueError("max_len must be nonnegative")
    frontier = [WalkScheme(start, ())]
    out = list(frontier)
    for _ in range(max_len):
        nxt = []
        for scheme in frontier:
            for step in _steps_from(schema, scheme.end_relation(schema)):
                nxt.append(WalkScheme(start, scheme.steps + (step,)))
        nxt.sort(key=WalkScheme.sort_key)
        out.extend(nxt)
        frontier = nxt
    return out


@dataclass(frozen=True)
class SchemeAttributePair:
    scheme: WalkScheme
    attribute: str

    def render(self, schema: Schema) -> str:
        return f"{self.scheme.render(schema)} :: {self.attribute}"


def parse_pair(text: str, schema: Schema) -> SchemeAttributePair:
    scheme_text, _, attr = text.rpartition(" :: ")
    if not scheme_text:
        raise ParseError(f"malformed scheme/attribute pair {text!r}")
    return SchemeAttributePair(parse_scheme(scheme_text, schema), attr)


def scheme_attribute_pairs(schema: Schema, start: str, max_len: int, exclude=()) -> list:
    """Pair every scheme with each end-relation attribute outside all FKs.

    ``exclude`` holds ``(relation, attribute)`` pairs hidden from the embedder,
    typically the attribute to be predicted downstream.
    """
    exclude = set(exclude)
    out = []
    for scheme in enumerate_walk_schemes(schema, start, max_len):
        end = scheme.end_relation(schema)
        for attr in schema[end].attribute_names:
            if schema.is_fk_attribute(end, attr) or (end, attr) in exclude:
                continue
            out.append(SchemeAttributePair(scheme, attr))
    return out


def _matches(db: Database, fact: Fact, step: Step, hidden) -> list:
    if step.direction == FORWARD:
        gid = db.referenced(step.fk_index, fact)
        ids = [] if gid is None else [gid]
    else:
        ids = db.referencing(step.fk_index, fact)
    if hidden:
        ids = [i for i in ids if i not in hidden]
    return ids


def _check_source(db: Database, source: Fact, scheme: WalkScheme) -> None:
    if source.relation != scheme.start_relation:
        raise RelationMismatch(
            f"fact of {source.relation} cannot start a scheme from {scheme.start_relation}")


def destination_distribution(db: Database, source: Fact, scheme: WalkScheme, hidden=frozenset()) -> Dict[int, float]:
    """Exact law of the walk endpoint as ``{fact_id: probability}``.

    Mass is propagated hop by hop, split uniformly over the matching facts.
    Mass that dead-ends is dropped and the survivors renormalised, giving the
    endpoint law conditioned on the walk completing; ``{}`` if none completes.
    Facts whose ids are in ``hidden`` are treated as absent.
    """
    _check_source(db, source, scheme)
    mass = {source.fact_id: 1.0}
    for step in scheme.steps:
        nxt: Dict[int, float] = {}
        for fid in sorted(mass):
            ids = _matches(db, db.by_id[fid], step, hidden)
            if not ids:
                continue
            share = mass[fid] / len(ids)
            for gid in ids:
                nxt[gid] = nxt.get(gid, 0.0) + share
        mass = nxt
        if not mass:
            return {}
    total = sum(mass[k] for k in sorted(mass))
    if abs(total - 1.0) <= SUM_TOL:
        return {k: mass[k] for k in sorted(mass)}
    return {k: mass[k] / total for k in sorted(mass)}


def attribute_distribution(dest: Dict[int, float], db: Database, attribute: str) -> Optional[dict]:
    """Push an endpoint law through ``g -> g[attribute]``, conditioned on non-null.

    Returns ``None`` when no endpoint carries a value.
    """
    if not dest:
        return None
    relation = db.by_id[next(iter(dest))].relation
    pos = db.schema[relation].index(attribute)
    probs: dict = {}
    for gid in sorted(dest):
        v = db.by_id[gid].values[pos]
        if v is None:
            continue
        probs[v] = probs.get(v, 0.0) + dest[gid]
    if not probs:
        return None
    total = sum(probs.values())
    return {v: p / total for v, p in probs.items()}


def sample_walk(db: Database, source: Fact, scheme: WalkScheme, rng, hidden=frozenset()) -> Optional[Fact]:
    """Draw one walk endpoint; ``None`` on a dead end."""
    _check_source(db, source, scheme)
    cur = source
    for step in scheme.steps:
        ids = _matches(db, cur, step, hidden)
        if not ids:
            return None
        cur = db.by_id[ids[int(rng.integers(len(ids)))]]
    return cur


def enumerate_walks(db: Database, source: Fact, scheme: WalkScheme):
    """Yield ``(walk, weight)`` for every complete walk by depth-first expansion.

    The weight is the product of 1/|choices| along the walk. Used as an
    independent oracle for :func:`destination_distribution`.
    """
    def rec(path, weight, depth):
        if depth == scheme.length:
            yield tuple(path), weight
            return
        ids = _matches(db, db.by_id[path[-1]], scheme.steps[depth], ())
        for gid in ids:
            yield from rec(path + [gid], weight / len(ids), depth + 1)

    _check_source(db, source, scheme)
    yield from rec([source.fact_id], 1.0, 0)
