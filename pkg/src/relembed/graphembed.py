"""Node2Vec over a bipartite fact/value graph of the database.

Every fact gets a node, every (relation, attribute, value) occurrence a
value node, and value nodes on the two sides of a foreign key are identified.
Embeddings are trained with skip-gram and negative sampling on biased random
walks. New facts are embedded by walking from the new nodes only and
training with every pre-existing node frozen.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, NotFound, ParseError
from .numerics import make_optimizer
from .relational import Database, Fact, Schema

log = logging.getLogger(__name__)

MODEL_FORMAT = "relembed.graph/1"
NS_EXPONENT = 0.75


@dataclass
class GraphHyperparams:
    dim: int = 100
    walks_per_node: int = 40
    steps_per_walk: int = 30
    window: int = 5
    negatives: int = 20
    batch_size: int = 40_000
    epochs: int = 10
    dynamic_epochs: int = 5
    dynamic_batch_size: int = 500
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    p: float = 1.0
    q: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("dim", "walks_per_node", "steps_per_walk", "window", "negatives", "batch_size",
                     "dynamic_batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.dynamic_epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not (self.p > 0 and self.q > 0 and self.learning_rate > 0):
            raise ValueError("p, q and learning_rate must be positive")


def _value_label(relation: str, attribute: str, value) -> str:
    return f"{relation}.{attribute}={value!r}"


class DbGraph:
    """Bipartite graph with fact nodes on one side and identified value nodes on the other.

    Node ids are dense integers assigned in first-appearance order while
    facts are added in id order; deleted or merged-away nodes keep their id
    but become dead (no edges, never a walk start).
    """

    def __init__(self, schema: Schema, exclude=()):
        self.schema = schema
        self.exclude = frozenset(tuple(e) for e in exclude)
        self.fact_nodes: Dict[int, int] = {}
        self.triple_node: Dict[tuple, int] = {}
        self.triple_count: Dict[tuple, int] = {}
        self.node_keys: List[str] = []
        self.adj: List[set] = []
        self.alive: List[bool] = []
        self.warnings: List[str] = []
        # (relation, attribute) -> partner (relation, attribute) pairs across FKs
        self._partners: Dict[tuple, list] = {}
        for fk in schema.foreign_keys:
            for b, c in zip(fk.source_attrs, fk.target_attrs):
                self._partners.setdefault((fk.source_relation, b), []).append((fk.target_relation, c))
                self._partners.setdefault((fk.target_relation, c), []).append((fk.source_relation, b))

    @property
    def n_nodes(self) -> int:
        return len(self.node_keys)

    def alive_nodes(self) -> np.ndarray:
        return np.array([i for i, a in enumerate(self.alive) if a], dtype=np.int64)

    def is_fact_node(self, node: int) -> bool:
        return self.node_keys[node].startswith("fact:")

    def value_nodes(self) -> set:
        return set(self.triple_node.values())

    def _new_node(self, key: str) -> int:
        self.node_keys.append(key)
        self.adj.append(set())
        self.alive.append(True)
        return len(self.node_keys) - 1

    def _triples(self, fact: Fact) -> list:
        rel = self.schema[fact.relation]
        out = []
        for attr, v in zip(rel.attribute_names, fact.values):
            if v is None or (rel.name, attr) in self.exclude:
                continue
            out.append((rel.name, attr, v))
        return out

    def add_facts(self, facts: Sequence[Fact]) -> dict:
        """Add fact nodes, value nodes and edges; return ``{"new": [...], "merged": {retired: survivor}}``."""
        facts = sorted(facts, key=lambda f: f.fact_id)
        new_triples: list = []
        seen = set()
        for f in facts:
            for t in self._triples(f):
                if t not in self.triple_node and t not in seen:
                    seen.add(t)
                    new_triples.append(t)
        # union-find over new triples and existing nodes
        parent: dict = {}

        def find(x):
            while parent.setdefault(x, x) != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb, key=repr)] = min(ra, rb, key=repr)

        for t in new_triples:
            find(("t", t))
            rel, attr, v = t
            for prel, pattr in self._partners.get((rel, attr), ()):
                p = (prel, pattr, v)
                if p in self.triple_node:
                    union(("t", t), ("n", self.triple_node[p]))
                elif p in seen:
                    union(("t", t), ("t", p))
        groups: dict = {}
        for t in new_triples:
            groups.setdefault(find(("t", t)), []).append(t)
        existing: dict = {}
        for x in list(parent):
            if x[0] == "n":
                existing.setdefault(find(x), set()).add(x[1])

        merged = {}
        new_nodes = []
        class_node: dict = {}
        for root, olds in existing.items():
            if len(olds) > 1:
                survivor = min(olds, key=lambda n: self.node_keys[n])
                for n in sorted(olds - {survivor}):
                    self._merge_into(n, survivor)
                    merged[n] = survivor
                    msg = (f"identification merged value node {self.node_keys[n]} into "
                           f"{self.node_keys[survivor]}; the former's vector is dropped")
                    log.warning(msg)
                    self.warnings.append(msg)
                class_node[root] = survivor
            else:
                class_node[root] = next(iter(olds))

        for f in facts:
            fnode = self._new_node(f"fact:{f.fact_id}")
            self.fact_nodes[f.fact_id] = fnode
            new_nodes.append(fnode)
            for t in self._triples(f):
                if t not in self.triple_node:
                    root = find(("t", t))
                    if root not in class_node:
                        members = sorted(groups[root], key=lambda x: _value_label(*x))
                        class_node[root] = self._new_node("value:" + _value_label(*members[0]))
                        new_nodes.append(class_node[root])
                    self.triple_node[t] = class_node[root]
                self.triple_count[t] = self.triple_count.get(t, 0) + 1
                vnode = self.triple_node[t]
                self.adj[fnode].add(vnode)
                self.adj[vnode].add(fnode)
        return {"new": new_nodes, "merged": merged}

    def _merge_into(self, node: int, survivor: int) -> None:
        for nb in self.adj[node]:
            self.adj[nb].discard(node)
            self.adj[nb].add(survivor)
            self.adj[survivor].add(nb)
        self.adj[node] = set()
        self.alive[node] = False
        for t, n in self.triple_node.items():
            if n == node:
                self.triple_node[t] = survivor

    def remove_facts(self, fact_ids) -> None:
        """Drop fact nodes; value nodes left without occurrences die too."""
        for fid in fact_ids:
            if fid not in self.fact_nodes:
                raise NotFound(f"fact {fid} has no node")
        for fid in fact_ids:
            fnode = self.fact_nodes.pop(fid)
            for nb in self.adj[fnode]:
                self.adj[nb].discard(fnode)
            self.adj[fnode] = set()
            self.alive[fnode] = False
        live_triples = {}
        for t, n in self.triple_node.items():
            live_triples.setdefault(n, []).append(t)
        for n, ts in live_triples.items():
            if not self.adj[n]:
                for t in ts:
                    del self.triple_node[t]
                    self.triple_count.pop(t, None)
                self.alive[n] = False

    def csr(self):
        """Sorted-neighbour CSR arrays ``(indptr, indices)``."""
        degs = [len(a) for a in self.adj]
        indptr = np.zeros(len(degs) + 1, dtype=np.int64)
        np.cumsum(degs, out=indptr[1:])
        indices = np.empty(indptr[-1], dtype=np.int64)
        for i, a in enumerate(self.adj):
            indices[indptr[i]:indptr[i + 1]] = sorted(a)
        return indptr, indices

    def edges(self) -> list:
        return sorted((u, v) for u, nb in enumerate(self.adj) for v in nb if u < v)

    def copy(self) -> "DbGraph":
        return copy.deepcopy(self)


def build_db_graph(db: Database, exclude=()) -> DbGraph:
    graph = DbGraph(db.schema, exclude)
    graph.add_facts(db.by_id.values())
    return graph


# ---- walks ----------------------------------------------------------------

def generate_walks(graph: DbGraph, hp: GraphHyperparams, rng, start_nodes=None) -> np.ndarray:
    """Second-order biased walks, ``walks_per_node`` from every start node.

    Returns an int array of shape (n_walks, steps_per_walk) padded with -1.
    The next node ``x`` after ``prev -> cur`` is drawn with weight ``1/p`` if
    ``x == prev``, 1 if ``x`` neighbours ``prev`` and ``1/q`` otherwise,
    by vectorised rejection sampling from the uniform proposal.
    """
    if start_nodes is None:
        start_nodes = graph.alive_nodes()
    start_nodes = np.asarray(start_nodes, dtype=np.int64)
    length = hp.steps_per_walk
    n_walks = len(start_nodes) * hp.walks_per_node
    walks = np.full((n_walks, length), -1, dtype=np.int64)
    if n_walks == 0:
        return walks
    indptr, indices = graph.csr()
    n = max(graph.n_nodes, 1)
    edge_codes = np.sort(np.repeat(np.arange(len(indptr) - 1), np.diff(indptr)) * n + indices)
    walks[:, 0] = np.tile(start_nodes, hp.walks_per_node)
    deg = np.diff(indptr)
    w_ret, w_in, w_out = 1.0 / hp.p, 1.0, 1.0 / hp.q
    w_max = max(w_ret, w_in, w_out)
    active = np.nonzero(deg[walks[:, 0]] > 0)[0]
    for step in range(1, length):
        if active.size == 0:
            break
        cur = walks[active, step - 1]
        if step == 1 or (hp.p == 1.0 and hp.q == 1.0):
            pos = indptr[cur] + (rng.random(active.size) * deg[cur]).astype(np.int64)
            walks[active, step] = indices[pos]
            continue
        prev = walks[active, step - 2]
        todo = np.arange(active.size)
        chosen = np.empty(active.size, dtype=np.int64)
        while todo.size:
            c = cur[todo]
            x = indices[indptr[c] + (rng.random(todo.size) * deg[c]).astype(np.int64)]
            pv = prev[todo]
            codes = pv * n + x
            hit = np.searchsorted(edge_codes, codes)
            hit = np.minimum(hit, len(edge_codes) - 1)
            adjacent = edge_codes[hit] == codes
            w = np.where(x == pv, w_ret, np.where(adjacent, w_in, w_out))
            accept = rng.random(todo.size) * w_max < w
            chosen[todo[accept]] = x[accept]
            todo = todo[~accept]
        walks[active, step] = chosen
    return walks


# ---- skip-gram with negative sampling ----------------------------------------

@dataclass
class SgnsModel:
    in_vectors: np.ndarray
    out_vectors: np.ndarray
    window: int = 5
    negatives: int = 20
    frozen: set = field(default_factory=set)
    loss_history: List[float] = field(default_factory=list)
    # cumulative node frequencies over every corpus trained on; drives the noise law
    counts: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return self.in_vectors.shape[1]

    @property
    def n_nodes(self) -> int:
        return self.in_vectors.shape[0]

    def grow(self, n_nodes: int, rng) -> None:
        """Append randomly initialised rows up to ``n_nodes``."""
        extra = n_nodes - self.n_nodes
        if extra <= 0:
            return
        d = self.dim
        self.in_vectors = np.vstack([self.in_vectors, rng.normal(0.0, 1.0 / np.sqrt(d), size=(extra, d))])
        self.out_vectors = np.vstack([self.out_vectors, np.zeros((extra, d))])


def init_sgns(n_nodes: int, hp: GraphHyperparams, rng) -> SgnsModel:
    d = hp.dim
    return SgnsModel(rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_nodes, d)), np.zeros((n_nodes, d)),
                     window=hp.window, negatives=hp.negatives)


def skipgram_pairs(walks: np.ndarray, window: int) -> np.ndarray:
    """All (center, context) pairs within ``window`` on both sides, shape (n, 2)."""
    out = []
    for o in range(1, window + 1):
        if o >= walks.shape[1]:
            break
        a, b = walks[:, :-o].ravel(), walks[:, o:].ravel()
        ok = (a >= 0) & (b >= 0)
        a, b = a[ok], b[ok]
        out.append(np.stack([a, b], axis=1))
        out.append(np.stack([b, a], axis=1))
    if not out:
        return np.empty((0, 2), dtype=np.int64)
    return np.concatenate(out)


def noise_distribution(walks: np.ndarray, n_nodes: int, prior=None, alive=None) -> np.ndarray:
    """Unigram^0.75 law over corpus counts plus ``prior`` counts; dead nodes get no mass."""
    counts = np.bincount(walks[walks >= 0], minlength=n_nodes).astype(np.float64)
    if prior is not None:
        counts[:len(prior)] += prior
    if alive is not None:
        counts[~np.asarray(alive, dtype=bool)] = 0.0
    w = counts ** NS_EXPONENT
    total = w.sum()
    return w / total if total > 0 else w


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sgns_loss(u: np.ndarray, v_pos: np.ndarray, v_neg: np.ndarray):
    """Negative-sampling loss of one (center, context) pair and its gradients.

    ``u`` is the center in-vector, ``v_pos`` the context out-vector and
    ``v_neg`` (k, d) the negative out-vectors. Returns
    ``(loss, grad_u, grad_v_pos, grad_v_neg)``.
    """
    sp = float(u @ v_pos)
    sn = v_neg @ u
    loss = -_log_sigmoid(sp) - float(np.sum(_log_sigmoid(-sn)))
    gpos = _sigmoid(sp) - 1.0
    gneg = _sigmoid(sn)
    grad_u = gpos * v_pos + gneg @ v_neg
    return loss, grad_u, gpos * u, gneg[:, None] * u[None, :]


def _batch_sgns(win, wout, centers, contexts, negs):
    u = win[centers]
    vp = wout[contexts]
    vn = wout[negs]
    sp = np.einsum("ij,ij->i", u, vp)
    sn = np.einsum("ikj,ij->ik", vn, u)
    loss = -float(np.sum(_log_sigmoid(sp)) + np.sum(_log_sigmoid(-sn)))
    gpos = _sigmoid(sp) - 1.0
    gneg = _sigmoid(sn)
    gu = gpos[:, None] * vp + np.einsum("ik,ikj->ij", gneg, vn)
    gin = _scatter_rows(centers, gu, win.shape[0])
    out_idx = np.concatenate([contexts, negs.ravel()])
    out_val = np.concatenate([gpos[:, None] * u, (gneg[:, :, None] * u[:, None, :]).reshape(-1, u.shape[1])])
    gout = _scatter_rows(out_idx, out_val, wout.shape[0])
    n = len(centers)
    return loss / n, gin / n, gout / n


def _scatter_rows(idx, vals, n_rows):
    # row-wise sum of vals into n_rows buckets; column bincount beats np.add.at
    return np.stack([np.bincount(idx, weights=vals[:, j], minlength=n_rows) for j in range(vals.shape[1])], axis=1)


def train_sgns(walks: np.ndarray, model: SgnsModel, hp: GraphHyperparams, rng, epochs: Optional[int] = None,
               alive=None, batch_size: Optional[int] = None) -> SgnsModel:
    """Train in place on a walk corpus; frozen nodes receive no update.

    Negatives follow the counts of this corpus plus every earlier one, so a
    small extension corpus does not make a new node's own context its noise.
    """
    epochs = hp.epochs if epochs is None else epochs
    batch_size = hp.batch_size if batch_size is None else batch_size
    if walks.size and walks.max() >= model.n_nodes:
        raise DimensionMismatch("corpus mentions nodes beyond the model's tables")
    if epochs == 0 or walks.size == 0:
        return model
    pairs = skipgram_pairs(walks, model.window)
    if len(pairs) == 0:
        return model
    prior_counts = model.counts
    noise = noise_distribution(walks, model.n_nodes, model.counts, alive)
    model.counts = np.bincount(walks[walks >= 0], minlength=model.n_nodes).astype(np.float64)
    if prior_counts is not None:
        model.counts[:len(prior_counts)] += prior_counts
    cdf = np.cumsum(noise)
    cdf[-1] = 1.0
    mask = np.zeros(model.n_nodes, dtype=bool)
    if model.frozen:
        mask[np.fromiter(model.frozen, dtype=np.int64)] = True
    if mask.all():
        return model
    masks = {"in": mask, "out": mask}
    params = {"in": model.in_vectors, "out": model.out_vectors}
    opt = make_optimizer(hp.optimizer, hp.learning_rate)
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            negs = np.searchsorted(cdf, rng.random((len(idx), model.negatives)), side="right")
            loss, gin, gout = _batch_sgns(model.in_vectors, model.out_vectors, pairs[idx, 0], pairs[idx, 1], negs)
            total += loss * len(idx)
            opt.step(params, {"in": gin, "out": gout}, masks)
        model.loss_history.append(total / len(pairs))
    return model


# ---- static and dynamic drivers -----------------------------------------

def train_graph_embedding(db: Database, hp: GraphHyperparams, exclude=()):
    """Build the graph, walk it and train; returns ``(graph, model)``."""
    rng = np.random.default_rng(hp.seed)
    graph = build_db_graph(db, exclude)
    model = init_sgns(graph.n_nodes, hp, rng)
    walks = generate_walks(graph, hp, rng)
    train_sgns(walks, model, hp, rng)
    return graph, model


def extend_graph_model(db_new: Database, old_graph: DbGraph, old_model: SgnsModel, new_facts: Sequence[Fact],
                       hp: GraphHyperparams, rng, inplace: bool = False):
    """Add ``new_facts`` to the graph and train only the new nodes.

    Returns ``(graph, model)``; unless ``inplace`` the inputs are left intact.
    """
    graph = old_graph if inplace else old_graph.copy()
    model = old_model if inplace else copy.deepcopy(old_model)
    if not new_facts:
        return graph, model
    old_nodes = [i for i in range(graph.n_nodes) if graph.alive[i]]
    info = graph.add_facts(new_facts)
    model.grow(graph.n_nodes, rng)
    model.frozen = set(old_nodes) - set(info["merged"])
    walks = generate_walks(graph, hp, rng, start_nodes=info["new"])
    train_sgns(walks, model, hp, rng, epochs=hp.dynamic_epochs, alive=graph.alive,
               batch_size=hp.dynamic_batch_size)
    model.frozen = set()
    return graph, model


def fact_embedding(model: SgnsModel, graph: DbGraph, fact_id: int) -> np.ndarray:
    try:
        node = graph.fact_nodes[fact_id]
    except KeyError:
        raise NotFound(f"fact {fact_id} has no node") from None
    return model.in_vectors[node].copy()


def delete_fact_node(graph: DbGraph, fact_id: int) -> None:
    graph.remove_facts([fact_id])


# ---- persistence ----------------------------------------------------------

def model_to_dict(graph: DbGraph, model: SgnsModel, hp: GraphHyperparams, schema_digest: str = "") -> dict:
    return {
        "format": MODEL_FORMAT,
        "schema_digest": schema_digest,
        "hyperparams": asdict(hp),
        "exclude": sorted(list(e) for e in graph.exclude),
        "nodes": [{"node": i, "key": k, "alive": graph.alive[i]} for i, k in enumerate(graph.node_keys)],
        "fact_nodes": [[fid, node] for fid, node in sorted(graph.fact_nodes.items())],
        "in_vectors": [[float(x) for x in row] for row in model.in_vectors],
        "out_vectors": [[float(x) for x in row] for row in model.out_vectors],
        "loss_history": list(model.loss_history),
        "counts": [] if model.counts is None else [float(c) for c in model.counts],
        "warnings": list(graph.warnings),
    }


def save_model(graph: DbGraph, model: SgnsModel, hp: GraphHyperparams, path, schema_digest: str = "",
               extra: Optional[dict] = None) -> None:
    doc = model_to_dict(graph, model, hp, schema_digest)
    if extra:
        doc["config"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_model(path, db: Database):
    """Reload a model and rebuild its graph from ``db`` (the database it was trained on)."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if doc.get("format") != MODEL_FORMAT:
        raise ParseError(f"not a graph model file (format={doc.get('format')!r})")
    hp = GraphHyperparams(**doc["hyperparams"])
    graph = build_db_graph(db, [tuple(e) for e in doc.get("exclude", [])])
    keys = [n["key"] for n in doc["nodes"]]
    alive_keys = [n["key"] for n in doc["nodes"] if n["alive"]]
    rebuilt = [k for i, k in enumerate(graph.node_keys) if graph.alive[i]]
    if keys != graph.node_keys and alive_keys != rebuilt:
        raise ParseError("model node table does not match the graph of the given database")
    if keys != graph.node_keys:
        raise ParseError("model node numbering cannot be reproduced from the given database")
    model = SgnsModel(np.array(doc["in_vectors"], dtype=np.float64).reshape(len(keys), hp.dim),
                      np.array(doc["out_vectors"], dtype=np.float64).reshape(len(keys), hp.dim),
                      window=hp.window, negatives=hp.negatives,
                      loss_history=list(doc.get("loss_history", [])),
                      counts=np.array(doc["counts"], dtype=np.float64) if doc.get("counts") else None)
    return graph, model, hp
