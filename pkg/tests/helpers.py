"""Shared fixtures-as-functions for the test suite."""

from __future__ import annotations

from collections import Counter
from pathlib import Path

import numpy as np

from relembed.walks import FORWARD
from relembed.relational import AttributeSchema, Database, Fact, ForeignKey, RelationSchema, Schema, load_database

DATA = Path(__file__).parent / "data"
MOVIES = DATA / "movies"

S5 = "Actors[aid]--Collaborations[actor2], Collaborations[movie]--Movies[mid]"


def movie_db() -> Database:
    return load_database(MOVIES / "schema.yaml", MOVIES)


def by_key(db: Database, relation: str, *key):
    f = db.lookup(relation, key)
    assert f is not None, (relation, key)
    return f


def random_database(seed: int, max_relations: int = 5, max_facts: int = 200, null_rate: float = 0.15) -> Database:
    """Random valid database: a DAG of relations, some with composite keys and composite FKs.

    Relation ``Rj`` has key ``Rj_k`` (or ``Rj_k1, Rj_k2``), a numeric and a
    categorical attribute, and up to two FKs into earlier relations. FK
    source values are null with probability ``null_rate``.
    """
    rng = np.random.default_rng(seed)
    n_rel = int(rng.integers(2, max_relations + 1))
    relations, fks, composite = [], [], []
    for j in range(n_rel):
        comp = bool(rng.random() < 0.3)
        composite.append(comp)
        key = [f"R{j}_k1", f"R{j}_k2"] if comp else [f"R{j}_k"]
        attrs = [AttributeSchema(k, "identifier") for k in key]
        attrs += [AttributeSchema(f"R{j}_num", "numeric"), AttributeSchema(f"R{j}_cat", "categorical")]
        targets = sorted(set(int(t) for t in rng.integers(0, j, size=int(rng.integers(0, 3))))) if j else []
        for t in targets:
            src = [f"R{j}_to{t}_{i}" for i in range(2 if composite[t] else 1)]
            attrs += [AttributeSchema(a, "identifier") for a in src]
            tgt = [f"R{t}_k1", f"R{t}_k2"] if composite[t] else [f"R{t}_k"]
            fks.append(ForeignKey(f"R{j}", src, f"R{t}", tgt))
        relations.append(RelationSchema(f"R{j}", attrs, key))
    schema = Schema(relations, fks)
    db = Database(schema)
    budget = max_facts
    keys_of = {}
    for j, rel in enumerate(relations):
        n = int(rng.integers(1, max(2, budget // (n_rel - j)) + 1))
        n = min(n, budget - (n_rel - j - 1))
        budget -= n
        keys = []
        batch = []
        for i in range(n):
            key = (f"{i}", f"{int(rng.integers(3))}") if composite[j] else (f"{i}",)
            if key in keys:
                continue
            keys.append(key)
            vals = {}
            for a, k in zip(rel.key, key):
                vals[a] = k
            vals[f"R{j}_num"] = None if rng.random() < null_rate else float(rng.integers(0, 5))
            vals[f"R{j}_cat"] = None if rng.random() < null_rate else f"c{int(rng.integers(3))}"
            for fk in fks:
                if fk.source_relation != rel.name:
                    continue
                t = int(fk.target_relation[1:])
                if rng.random() < null_rate or not keys_of[t]:
                    ref = (None,) * len(fk.source_attrs)
                else:
                    ref = keys_of[t][int(rng.integers(len(keys_of[t])))]
                for a, v in zip(fk.source_attrs, ref):
                    vals[a] = v
            batch.append(Fact(rel.name, tuple(vals[a] for a in rel.attribute_names)))
        keys_of[j] = keys
        db.insert_facts(batch)
    return db


def scan_matches(db, fact, step):
    """Matching facts found by scanning attribute values, without any index."""
    fk = db.schema.foreign_keys[step.fk_index]
    src, tgt = db.schema[fk.source_relation], db.schema[fk.target_relation]
    if step.direction == FORWARD:
        vals = [fact.values[src.index(a)] for a in fk.source_attrs]
        if any(v is None for v in vals):
            return []
        return [g.fact_id for g in db.relation_facts(fk.target_relation)
                if [g.values[tgt.index(a)] for a in fk.target_attrs] == vals]
    vals = [fact.values[tgt.index(a)] for a in fk.target_attrs]
    return [g.fact_id for g in db.relation_facts(fk.source_relation)
            if [g.values[src.index(a)] for a in fk.source_attrs] == vals]


def brute_force_distribution(db, source, scheme):
    ends = Counter()
    stack = [(source.fact_id, 1.0, 0)]
    while stack:
        fid, w, depth = stack.pop()
        if depth == scheme.length:
            ends[fid] += w
            continue
        ids = scan_matches(db, db.by_id[fid], scheme.steps[depth])
        for gid in ids:
            stack.append((gid, w / len(ids), depth + 1))
    total = sum(ends.values())
    return {k: v / total for k, v in ends.items()} if total else {}


def kd_oracle(db, f, f2, pair, kernel):
    """Double sum over endpoint facts (not values) of both walks, null endpoints conditioned away."""
    pos = db.schema[pair.scheme.end_relation(db.schema)].index(pair.attribute)

    def law(src):
        d = brute_force_distribution(db, src, pair.scheme)
        d = {g: p for g, p in d.items() if db.by_id[g].values[pos] is not None}
        z = sum(d.values())
        return {g: p / z for g, p in d.items()} if z else None

    p, q = law(f), law(f2)
    if p is None or q is None:
        return None
    total = 0.0
    for g, pg in p.items():
        for h, qh in q.items():
            total += pg * qh * kernel(db.by_id[g].values[pos], db.by_id[h].values[pos])
    return total
