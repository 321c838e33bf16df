"""FoRWaRD: foreign-key random-walk embeddings of the facts of one relation.

Static training fits vectors ``phi(f)`` and one symmetric matrix per
(walk scheme, attribute) pair so that ``phi(f) . psi . phi(f2)`` tracks the
expected kernel similarity of the walk endpoints of ``f`` and ``f2``.
New facts are embedded afterwards by a least-squares solve against the
frozen vectors and matrices, so existing vectors never move.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyRelation,
    MissingEmbedding,
    NoPairs,
    NoUsableConstraints,
    ParseError,
)
from .kernels import EqualityKernel, GaussianKernel, KernelRegistry, kd_from_distributions
from .numerics import make_optimizer, pseudoinverse, symmetrize
from .relational import Database, Fact
from .walks import (
    SchemeAttributePair,
    attribute_distribution,
    destination_distribution,
    parse_pair,
    sample_walk,
    scheme_attribute_pairs,
)

log = logging.getLogger(__name__)

MODEL_FORMAT = "relembed.forward/1"


@dataclass
class ForwardHyperparams:
    dim: int = 100
    max_walk_len: int = 2
    n_samples: int = 5000
    n_samples_new: int = 2500
    batch_size: int = 50_000
    epochs: int = 10
    learning_rate: float = 1e-2
    optimizer: str = "adam"
    seed: int = 0
    kd_mode: str = "exact"
    mc_samples: int = 10_000

    def __post_init__(self):
        for name in ("dim", "n_samples", "n_samples_new", "batch_size", "mc_samples"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_walk_len < 0 or self.epochs < 0:
            raise ValueError("max_walk_len and epochs must be nonnegative")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.kd_mode not in ("exact", "monte_carlo"):
            raise ValueError(f"unknown kd_mode {self.kd_mode!r}")


@dataclass
class ForwardModel:
    target_relation: str
    pairs: List[SchemeAttributePair]
    phi: Dict[int, np.ndarray]
    psi_raw: np.ndarray
    hyperparams: ForwardHyperparams
    kernel_variances: Dict[tuple, float] = field(default_factory=dict)
    schema_digest: str = ""
    exclude: tuple = ()
    loss_history: List[float] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    # per fact: one null-conditioned attribute distribution (or None) per pair,
    # as seen when the fact was embedded; not persisted
    dist_cache: Dict[int, list] = field(default_factory=dict, repr=False)

    @property
    def dim(self) -> int:
        return self.psi_raw.shape[1]

    def psi(self, pair) -> np.ndarray:
        idx = pair if isinstance(pair, int) else self.pairs.index(pair)
        return symmetrize(self.psi_raw[idx])

    def vector(self, fact_id: int) -> np.ndarray:
        try:
            return self.phi[fact_id]
        except KeyError:
            raise MissingEmbedding(f"no embedding for fact {fact_id}") from None


@dataclass(frozen=True)
class TrainingSample:
    f: int
    f2: int
    pair: int
    g: int
    g2: int
    kappa: float


class SampleSet:
    """Columnar training samples: fact rows, pair index, endpoints, kernel value."""

    def __init__(self, f, f2, pair, g, g2, kappa):
        self.f = np.asarray(f, dtype=np.int64)
        self.f2 = np.asarray(f2, dtype=np.int64)
        self.pair = np.asarray(pair, dtype=np.int64)
        self.g = np.asarray(g, dtype=np.int64)
        self.g2 = np.asarray(g2, dtype=np.int64)
        self.kappa = np.asarray(kappa, dtype=np.float64)

    def __len__(self):
        return len(self.f)

    def __iter__(self):
        for i in range(len(self)):
            yield TrainingSample(int(self.f[i]), int(self.f2[i]), int(self.pair[i]),
                                 int(self.g[i]), int(self.g2[i]), float(self.kappa[i]))


# ---- walk statistics ------------------------------------------------------

def endpoint_support(db: Database, fact: Fact, pair: SchemeAttributePair, hidden=frozenset()):
    """Endpoint law restricted to non-null ``pair.attribute``, renormalised.

    Returns ``(fact_ids, probs)`` arrays, or None if no such endpoint exists.
    """
    dest = destination_distribution(db, fact, pair.scheme, hidden)
    if not dest:
        return None
    end = pair.scheme.end_relation(db.schema)
    pos = db.schema[end].index(pair.attribute)
    ids = [g for g in dest if db.by_id[g].values[pos] is not None]
    if not ids:
        return None
    probs = np.array([dest[g] for g in ids])
    return np.array(ids, dtype=np.int64), probs / probs.sum()


def fact_distributions(db: Database, fact: Fact, pairs: Sequence[SchemeAttributePair], hidden=frozenset()) -> list:
    """Null-conditioned attribute distribution of ``fact`` for every pair."""
    out = []
    by_scheme: dict = {}
    for pair in pairs:
        if pair.scheme not in by_scheme:
            by_scheme[pair.scheme] = destination_distribution(db, fact, pair.scheme, hidden)
        out.append(attribute_distribution(by_scheme[pair.scheme], db, pair.attribute))
    return out


class _ValueTable:
    """Per-pair attribute values of end-relation facts, encoded for vectorised kernels."""

    def __init__(self, db: Database, pair: SchemeAttributePair, kernel):
        self.kernel = kernel
        end = pair.scheme.end_relation(db.schema)
        self.pos = db.schema[end].index(pair.attribute)
        self.db = db
        self.codes: dict = {}

    def encode(self, fact_ids: np.ndarray) -> np.ndarray:
        vals = [self.db.by_id[int(g)].values[self.pos] for g in fact_ids]
        if isinstance(self.kernel, GaussianKernel):
            return np.array(vals, dtype=np.float64)
        if isinstance(self.kernel, EqualityKernel):
            return np.array([self.codes.setdefault(v, len(self.codes)) for v in vals], dtype=np.int64)
        return np.array(vals, dtype=object)

    def kappa(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if isinstance(self.kernel, GaussianKernel):
            d = a - b
            return np.exp(-(d * d) / (2.0 * self.kernel.variance))
        if isinstance(self.kernel, EqualityKernel):
            return (a == b).astype(np.float64)
        return np.array([self.kernel(x, y) for x, y in zip(a, b)], dtype=np.float64)


def _segment_sampler(supports: list):
    """Concatenate per-fact (ids, probs) into arrays for vectorised inverse-CDF draws."""
    ids, cums = [], []
    for seg, (gid, p) in enumerate(supports):
        c = np.cumsum(p)
        c[-1] = 1.0
        ids.append(gid)
        cums.append(c + seg)
    return np.concatenate(ids), np.concatenate(cums)


def draw_training_samples(db: Database, relation: str, pairs: Sequence[SchemeAttributePair],
                          n_samples: int, rng, registry: Optional[KernelRegistry] = None,
                          facts: Optional[Sequence[Fact]] = None) -> SampleSet:
    """Draw ``(f, f2, pair, g, g2)`` tuples with the kernel value of ``g``/``g2``.

    For every fact ``f`` and pair whose endpoint attribute exists, ``f2 != f``
    is uniform over facts for which it exists as well, and ``g``, ``g2`` follow
    the null-conditioned walk laws. When the universe of distinct tuples for
    ``(f, pair)`` has at most ``n_samples`` members, each is used exactly once.
    Fact fields hold positions in ``facts`` (default: the relation sorted by id).
    """
    if facts is None:
        facts = sorted(db.relation_facts(relation), key=lambda x: x.fact_id)
    registry = registry or KernelRegistry.from_database(db)
    cols = {k: [] for k in ("f", "f2", "pair", "g", "g2", "kappa")}
    for p_idx, pair in enumerate(pairs):
        end = pair.scheme.end_relation(db.schema)
        table = _ValueTable(db, pair, registry[(end, pair.attribute)])
        supports = [endpoint_support(db, f, pair) for f in facts]
        rows = np.array([i for i, s in enumerate(supports) if s is not None], dtype=np.int64)
        if len(rows) < 2:
            continue
        sup = [supports[i] for i in rows]
        sizes = np.array([len(s[0]) for s in sup], dtype=np.int64)
        all_g, cum = _segment_sampler(sup)
        all_rows = np.repeat(rows, sizes)
        all_codes = table.encode(all_g)
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        total = int(sizes.sum())
        for j, row in enumerate(rows):
            gids, probs = sup[j]
            own = sizes[j]
            others = total - own
            universe = own * others
            if universe <= n_samples:
                mask = all_rows != row
                g2_idx = np.nonzero(mask)[0]
                g_local = np.repeat(np.arange(own), len(g2_idx))
                g2_idx = np.tile(g2_idx, own)
            else:
                pick = rng.integers(len(rows) - 1, size=n_samples)
                pick = pick + (pick >= j)
                g_local = np.searchsorted(np.cumsum(probs)[:-1], rng.random(n_samples), side="right")
                u = rng.random(n_samples) + pick
                g2_idx = np.searchsorted(cum, u, side="right")
                g2_idx = np.minimum(g2_idx, starts[pick] + sizes[pick] - 1)
            g_idx = starts[j] + g_local
            n = len(g2_idx)
            cols["f"].append(np.full(n, row))
            cols["f2"].append(all_rows[g2_idx])
            cols["pair"].append(np.full(n, p_idx))
            cols["g"].append(all_g[g_idx])
            cols["g2"].append(all_g[g2_idx])
            cols["kappa"].append(table.kappa(all_codes[g_idx], all_codes[g2_idx]))
    if not cols["f"]:
        return SampleSet(*([[]] * 6))
    return SampleSet(*(np.concatenate(cols[k]) for k in ("f", "f2", "pair", "g", "g2", "kappa")))


# ---- loss -----------------------------------------------------------------

def forward_loss(x: np.ndarray, psi_raw: np.ndarray, y: np.ndarray, kappa: float):
    """Squared error ``0.5 * (x . sym(psi_raw) . y - kappa)**2`` with gradients.

    Returns ``(loss, grad_x, grad_y, grad_psi_raw)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if psi_raw.shape != (x.size, y.size):
        raise DimensionMismatch("psi shape does not match vectors")
    m = symmetrize(psi_raw)
    r = float(x @ m @ y) - kappa
    return 0.5 * r * r, r * (m @ y), r * (m @ x), 0.5 * r * (np.outer(x, y) + np.outer(y, x))


def sample_loss(sample: TrainingSample, model: ForwardModel, fact_ids: Sequence[int]):
    """:func:`forward_loss` for one training sample against a model."""
    x = model.vector(fact_ids[sample.f])
    y = model.vector(fact_ids[sample.f2])
    return forward_loss(x, model.psi_raw[sample.pair], y, sample.kappa)


def _batch_loss_grads(phi: np.ndarray, psi_raw: np.ndarray, s: SampleSet, idx: np.ndarray):
    """Mean batch loss and gradients for the rows ``idx`` of a sample set."""
    gphi = np.zeros_like(phi)
    gpsi = np.zeros_like(psi_raw)
    loss = 0.0
    pairs = s.pair[idx]
    for p in np.unique(pairs):
        sel = idx[pairs == p]
        fi, f2i = s.f[sel], s.f2[sel]
        x, y = phi[fi], phi[f2i]
        m = symmetrize(psi_raw[p])
        xm = x @ m
        r = np.einsum("ij,ij->i", xm, y) - s.kappa[sel]
        loss += 0.5 * float(r @ r)
        np.add.at(gphi, fi, r[:, None] * (y @ m))
        np.add.at(gphi, f2i, r[:, None] * xm)
        xr = x * r[:, None]
        gpsi[p] = 0.5 * (xr.T @ y + y.T @ xr)
    n = len(idx)
    return loss / n, gphi / n, gpsi / n


def mean_loss(phi: np.ndarray, psi_raw: np.ndarray, samples: SampleSet, batch_size: int) -> float:
    if len(samples) == 0:
        return 0.0
    total = 0.0
    for start in range(0, len(samples), batch_size):
        idx = np.arange(start, min(start + batch_size, len(samples)))
        loss, _, _ = _batch_loss_grads(phi, psi_raw, samples, idx)
        total += loss * len(idx)
    return total / len(samples)


# ---- static training ------------------------------------------------------

def init_parameters(n_facts: int, n_pairs: int, dim: int, rng):
    scale = 1.0 / math.sqrt(dim)
    phi = rng.normal(0.0, scale, size=(n_facts, dim))
    psi = rng.normal(0.0, scale, size=(n_pairs, dim, dim))
    return phi, psi


def train_static(db: Database, relation: str, hp: ForwardHyperparams,
                 registry: Optional[KernelRegistry] = None, exclude=()) -> ForwardModel:
    """Fit the embedding of every fact of ``relation``; deterministic in ``hp.seed``.

    ``exclude`` lists ``(relation, attribute)`` pairs the embedder must not see.
    """
    facts = sorted(db.relation_facts(relation), key=lambda x: x.fact_id)
    if not facts:
        raise EmptyRelation(f"relation {relation} has no facts")
    pairs = scheme_attribute_pairs(db.schema, relation, hp.max_walk_len, exclude)
    if not pairs:
        raise NoPairs(f"no walk scheme from {relation} ends in an embeddable attribute")
    registry = registry or KernelRegistry.from_database(db)
    rng = np.random.default_rng(hp.seed)
    phi, psi_raw = init_parameters(len(facts), len(pairs), hp.dim, rng)
    samples = draw_training_samples(db, relation, pairs, hp.n_samples, rng, registry, facts)
    log.info("training %s: %d facts, %d pairs, %d samples", relation, len(facts), len(pairs), len(samples))

    history = []
    if hp.epochs > 0 and len(samples):
        history.append(mean_loss(phi, psi_raw, samples, hp.batch_size))
        opt = make_optimizer(hp.optimizer, hp.learning_rate)
        params = {"phi": phi, "psi": psi_raw}
        for epoch in range(hp.epochs):
            order = rng.permutation(len(samples))
            total = 0.0
            for start in range(0, len(order), hp.batch_size):
                idx = order[start:start + hp.batch_size]
                loss, gphi, gpsi = _batch_loss_grads(phi, psi_raw, samples, idx)
                total += loss * len(idx)
                opt.step(params, {"phi": gphi, "psi": gpsi})
            history.append(total / len(samples))
            log.debug("epoch %d mean loss %.6f", epoch + 1, history[-1])

    model = ForwardModel(
        target_relation=relation,
        pairs=pairs,
        phi={f.fact_id: phi[i].copy() for i, f in enumerate(facts)},
        psi_raw=psi_raw,
        hyperparams=hp,
        kernel_variances=registry.variances(),
        schema_digest=db.schema.digest(),
        exclude=tuple(sorted(tuple(e) for e in exclude)),
        loss_history=history,
    )
    for f in facts:
        model.dist_cache[f.fact_id] = fact_distributions(db, f, pairs)
    return model


# ---- dynamic extension ----------------------------------------------------

def fact_rng(seed: int, fact_id: int):
    return np.random.default_rng([int(seed) & (2**63 - 1), int(fact_id)])


def _kd_monte_carlo(p: dict, new_draws: list, kernel, n: int, rng) -> Optional[float]:
    if not new_draws:
        return None
    vals = list(p)
    probs = np.array([p[v] for v in vals])
    picks = rng.choice(len(vals), size=len(new_draws), p=probs)
    return math.fsum(kernel(vals[i], y) for i, y in zip(picks, new_draws)) / len(new_draws)


def build_extension_system(db: Database, f_new: Fact, model: ForwardModel, hp: ForwardHyperparams,
                           registry: KernelRegistry, rng, old_distribution: Optional[Callable] = None,
                           hidden=frozenset(), new_dists: Optional[list] = None):
    """Stack one linear constraint per sampled (old fact, pair).

    Row ``i`` of ``C`` is ``sym(psi(pair_i)) @ phi(f_i)`` and ``b_i`` the
    expected kernel similarity between ``f_i`` and ``f_new`` under ``pair_i``.
    ``old_distribution(fact_id, pair_index)`` supplies old facts' statistics;
    by default they are computed on ``db``. Returns ``(C, b, provenance)``.
    """
    if f_new.fact_id in model.phi:
        raise ValueError(f"fact {f_new.fact_id} is already embedded")
    if old_distribution is None:
        memo: dict = {}

        def old_distribution(fid, p_idx):
            if fid not in memo:
                memo[fid] = fact_distributions(db, db.by_id[fid], model.pairs)
            return memo[fid][p_idx]
    if new_dists is None:
        new_dists = fact_distributions(db, f_new, model.pairs, hidden)
    old_ids = sorted(model.phi)
    rows, rhs, prov = [], [], []
    for p_idx, pair in enumerate(model.pairs):
        q = new_dists[p_idx]
        if q is None:
            continue
        cands = [fid for fid in old_ids if old_distribution(fid, p_idx) is not None]
        if not cands:
            continue
        if len(cands) > hp.n_samples_new:
            pick = np.sort(rng.choice(len(cands), size=hp.n_samples_new, replace=False))
            cands = [cands[i] for i in pick]
        end = pair.scheme.end_relation(db.schema)
        kernel = registry[(end, pair.attribute)]
        m = symmetrize(model.psi_raw[p_idx])
        draws = None
        if hp.kd_mode == "monte_carlo":
            pos = db.schema[end].index(pair.attribute)
            draws = []
            for _ in range(hp.mc_samples):
                g = sample_walk(db, f_new, pair.scheme, rng, hidden)
                if g is not None and g.values[pos] is not None:
                    draws.append(g.values[pos])
        for fid in cands:
            p = old_distribution(fid, p_idx)
            if draws is None:
                b = kd_from_distributions(p, q, kernel)
            else:
                b = _kd_monte_carlo(p, draws, kernel, hp.mc_samples, rng)
                if b is None:
                    continue
            rows.append(m @ model.phi[fid])
            rhs.append(b)
            prov.append((fid, p_idx))
    if not rows:
        raise NoUsableConstraints(f"fact {f_new.fact_id} shares no walk statistics with embedded facts")
    return np.vstack(rows), np.array(rhs), prov


def extend_embedding(system, model: ForwardModel, f_new) -> np.ndarray:
    """Solve ``C v = b`` in the least-squares, minimum-norm sense and store ``v``."""
    c, b = system[0], system[1]
    c = np.asarray(c, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != b.shape[0] or c.shape[1] != model.dim:
        raise DimensionMismatch(f"system shapes {c.shape}, {b.shape} do not fit dim {model.dim}")
    v = pseudoinverse(c) @ b
    fid = f_new.fact_id if isinstance(f_new, Fact) else int(f_new)
    model.phi[fid] = v
    return v


def _fallback_vector(model: ForwardModel, fid: int) -> np.ndarray:
    ids = sorted(model.phi)
    msg = f"fact {fid}: no usable constraints, using mean of {len(ids)} existing vectors"
    log.warning(msg)
    model.warnings.append(msg)
    if not ids:
        return np.zeros(model.dim)
    return np.mean(np.vstack([model.phi[i] for i in ids]), axis=0)


def extend_batch(db: Database, batch: Sequence[Fact], model: ForwardModel, hp: Optional[ForwardHyperparams] = None,
                 registry: Optional[KernelRegistry] = None, mode: str = "one_by_one") -> list:
    """Embed the target-relation facts of an already inserted batch.

    ``one_by_one`` extends facts in the given order; each sees the database
    without the batch's later target facts, and old facts keep the walk
    statistics recorded when they were embedded. ``all_at_once`` recomputes
    every statistic on the fully updated database and builds all systems
    before solving any of them. Existing vectors are never modified.
    """
    hp = hp or model.hyperparams
    if registry is None:
        registry = KernelRegistry.from_database(db, _variances_by_key(model))
    targets = [f for f in batch if f.relation == model.target_relation]
    if not targets:
        return []
    batch_ids = frozenset(f.fact_id for f in batch)
    out = []
    if mode == "one_by_one":
        def old_distribution(fid, p_idx):
            if fid not in model.dist_cache:
                model.dist_cache[fid] = fact_distributions(db, db.by_id[fid], model.pairs, batch_ids)
            return model.dist_cache[fid][p_idx]

        target_ids = [f.fact_id for f in targets]
        for i, f in enumerate(targets):
            hidden = frozenset(target_ids[i + 1:])
            dists = fact_distributions(db, f, model.pairs, hidden)
            try:
                system = build_extension_system(db, f, model, hp, registry, fact_rng(hp.seed, f.fact_id),
                                                old_distribution, hidden, dists)
                v = extend_embedding(system, model, f)
            except NoUsableConstraints:
                v = _fallback_vector(model, f.fact_id)
                model.phi[f.fact_id] = v
            model.dist_cache[f.fact_id] = dists
            out.append((f.fact_id, v))
        return out
    if mode != "all_at_once":
        raise ValueError(f"unknown mode {mode!r}")
    fresh: dict = {}

    def recomputed(fid, p_idx):
        if fid not in fresh:
            fresh[fid] = fact_distributions(db, db.by_id[fid], model.pairs)
        return fresh[fid][p_idx]

    systems = []
    for f in targets:
        try:
            systems.append(build_extension_system(db, f, model, hp, registry, fact_rng(hp.seed, f.fact_id),
                                                  recomputed, frozenset(), fact_distributions(db, f, model.pairs)))
        except NoUsableConstraints:
            systems.append(None)
    fallback = None
    for f, system in zip(targets, systems):
        if system is None:
            if fallback is None:
                fallback = _fallback_vector(model, f.fact_id)
            else:
                model.warnings.append(f"fact {f.fact_id}: no usable constraints, using mean of existing vectors")
            v = fallback.copy()
            model.phi[f.fact_id] = v
        else:
            v = extend_embedding(system, model, f)
        out.append((f.fact_id, v))
    for fid in fresh:
        model.dist_cache[fid] = fresh[fid]
    for f in targets:
        model.dist_cache[f.fact_id] = fact_distributions(db, f, model.pairs)
    return out


def delete_fact_embedding(model: ForwardModel, fact_id: int) -> Optional[np.ndarray]:
    model.dist_cache.pop(fact_id, None)
    return model.phi.pop(fact_id, None)


# ---- persistence ----------------------------------------------------------

def _variances_by_key(model: ForwardModel) -> dict:
    return dict(model.kernel_variances)


def model_to_dict(model: ForwardModel, db: Optional[Database] = None, schema=None) -> dict:
    schema = schema or (db.schema if db is not None else None)
    if schema is None:
        raise ValueError("a schema is needed to render walk schemes")
    phi = []
    for fid in sorted(model.phi):
        entry = {"fact_id": fid}
        if db is not None and fid in db.by_id:
            entry["key"] = list(db.key_of(db.by_id[fid]))
        entry["vector"] = [float(x) for x in model.phi[fid]]
        phi.append(entry)
    return {
        "format": MODEL_FORMAT,
        "schema_digest": model.schema_digest,
        "relation": model.target_relation,
        "hyperparams": asdict(model.hyperparams),
        "exclude": [list(e) for e in model.exclude],
        "kernel_variances": {f"{r}.{a}": v for (r, a), v in sorted(model.kernel_variances.items())},
        "pairs": [p.render(schema) for p in model.pairs],
        "loss_history": list(model.loss_history),
        "warnings": list(model.warnings),
        "phi": phi,
        "psi": [[float(x) for x in m.ravel()] for m in model.psi_raw],
    }


def model_from_dict(doc: dict, schema) -> ForwardModel:
    if doc.get("format") != MODEL_FORMAT:
        raise ParseError(f"not a FoRWaRD model file (format={doc.get('format')!r})")
    try:
        hp = ForwardHyperparams(**doc["hyperparams"])
        pairs = [parse_pair(t, schema) for t in doc["pairs"]]
        d = hp.dim
        psi = np.array(doc["psi"], dtype=np.float64).reshape(len(pairs), d, d)
        phi = {int(e["fact_id"]): np.array(e["vector"], dtype=np.float64) for e in doc["phi"]}
        variances = {}
        for k, v in doc["kernel_variances"].items():
            r, _, a = k.partition(".")
            variances[(r, a)] = float(v)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed model file: {exc!r}") from exc
    return ForwardModel(
        target_relation=doc["relation"], pairs=pairs, phi=phi, psi_raw=psi, hyperparams=hp,
        kernel_variances=variances, schema_digest=doc.get("schema_digest", ""),
        exclude=tuple(tuple(e) for e in doc.get("exclude", [])),
        loss_history=list(doc.get("loss_history", [])), warnings=list(doc.get("warnings", [])),
    )


def save_model(model: ForwardModel, path, db: Optional[Database] = None, extra: Optional[dict] = None) -> None:
    doc = model_to_dict(model, db)
    if extra:
        doc["config"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=False)
        fh.write("\n")


def load_model(path, schema) -> ForwardModel:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return model_from_dict(doc, schema)
