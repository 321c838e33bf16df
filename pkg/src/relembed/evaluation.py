"""Downstream evaluation: stratified splits, cross-validation, the dynamic
(delete, train, reinsert, extend) experiment and a synthetic benchmark."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import List, Optional

import numpy as np
from sklearn.base import clone

from .errors import TooFewSamples
from .estimators import SoftmaxRegression, clone_with_seed
from .relational import AttributeSchema, Database, Fact, ForeignKey, RelationSchema, Schema

log = logging.getLogger(__name__)


class StabilityError(AssertionError):
    """A pre-existing embedding changed during extension."""


# ---- classifier & cross-validation -------------------------------------------

def train_classifier(X, y, reg: float = 1e-3, epochs: int = 500, lr: float = 0.5, seed: int = 0) -> SoftmaxRegression:
    return SoftmaxRegression(reg=reg, epochs=epochs, lr=lr, seed=seed).fit(X, y)


def stratified_folds(y, folds: int, rng) -> np.ndarray:
    """Fold index per sample; classes are dealt round-robin so sizes differ by at most one."""
    y = np.asarray(y)
    fold_of = np.empty(len(y), dtype=np.int64)
    counter = 0
    for cls in sorted(set(y.tolist()), key=str):
        idx = np.nonzero(y == cls)[0]
        idx = idx[rng.permutation(len(idx))]
        for i in idx:
            fold_of[i] = counter % folds
            counter += 1
    return fold_of


def drop_rare_classes(y, folds: int):
    """Mask of samples whose class has at least ``folds`` members."""
    counts = Counter(np.asarray(y).tolist())
    rare = sorted((c for c, n in counts.items() if n < folds), key=str)
    if rare:
        log.warning("dropping classes rarer than %d folds: %s", folds, rare)
    return np.array([counts[c] >= folds for c in np.asarray(y).tolist()], dtype=bool), rare


def kfold_cv(X, y, folds: int = 10, rng=None, classifier=None):
    """Stratified k-fold accuracy as ``(mean, std)``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    X, y = np.asarray(X), np.asarray(y)
    if folds < 2:
        raise TooFewSamples("need at least two folds")
    if folds != len(y):
        # leave-one-out needs no per-fold class presence
        keep, _ = drop_rare_classes(y, folds)
        X, y = X[keep], y[keep]
    if len(y) < folds:
        raise TooFewSamples(f"{len(y)} samples cannot fill {folds} folds")
    fold_of = stratified_folds(y, folds, rng)
    accs = []
    for k in range(folds):
        test = fold_of == k
        clf = clone(classifier) if classifier is not None else SoftmaxRegression()
        clf.fit(X[~test], y[~test])
        accs.append(float(np.mean(clf.predict(X[test]) == y[test])))
    return float(np.mean(accs)), float(np.std(accs))


def stratified_partition(db: Database, relation: str, attribute: str, new_ratio: float, rng):
    """Split a relation's fact ids into ``(old_ids, new_ids)`` per class.

    The total new count is ``round(new_ratio * n)``, shared out over the
    classes by largest remainder (ties go to the class seen first).
    """
    if not 0 <= new_ratio < 1:
        raise ValueError("new_ratio must lie in [0, 1)")
    pos = db.schema[relation].index(attribute)
    facts = sorted(db.relation_facts(relation), key=lambda f: f.fact_id)
    by_class: dict = {}
    for f in facts:
        by_class.setdefault(f.values[pos], []).append(f.fact_id)
    classes = sorted(by_class, key=str)
    n = len(facts)
    target = int(round(new_ratio * n))
    quotas = {c: new_ratio * len(by_class[c]) for c in classes}
    counts = {c: int(np.floor(quotas[c])) for c in classes}
    rest = target - sum(counts.values())
    for c in sorted(classes, key=lambda c: -(quotas[c] - counts[c]))[:max(rest, 0)]:
        counts[c] += 1
    old, new = [], []
    for c in classes:
        ids = np.array(by_class[c])
        ids = ids[rng.permutation(len(ids))]
        new.extend(int(i) for i in ids[:counts[c]])
        old.extend(int(i) for i in ids[counts[c]:])
    return sorted(old), sorted(new)


def labels_of(db: Database, relation: str, attribute: str, ids) -> np.ndarray:
    pos = db.schema[relation].index(attribute)
    return np.array([db.by_id[i].values[pos] for i in ids], dtype=object)


# ---- experiment plan & report -------------------------------------------------

@dataclass
class ExperimentPlan:
    prediction_relation: str
    prediction_attribute: str
    new_ratio: float = 0.1
    mode: str = "one_by_one"
    runs: int = 10
    folds: int = 10
    seed: int = 0
    static_eval: bool = True
    per_fold_reembed: bool = True
    timing: bool = True
    classifier_reg: float = 1e-3

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if self.runs < 1:
            raise ValueError("runs must be positive")
        if not 0 <= self.new_ratio < 1:
            raise ValueError("new_ratio must lie in [0, 1)")
        if self.mode not in ("one_by_one", "all_at_once"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class RunResult:
    run: int
    ratio: float
    mode: str
    accuracy: Optional[float]
    baseline: Optional[float]
    n_new: int
    stable: bool
    static_seconds: Optional[float] = None
    extension_seconds: Optional[float] = None
    per_tuple_seconds: Optional[float] = None
    error: Optional[str] = None


@dataclass
class ExperimentReport:
    plan: dict
    embedder: dict
    static: dict = field(default_factory=dict)
    runs: List[RunResult] = field(default_factory=list)

    @property
    def accuracies(self) -> list:
        return [r.accuracy for r in self.runs if r.accuracy is not None]

    @property
    def dynamic(self) -> dict:
        accs = self.accuracies
        if not accs:
            return {}
        base = [r.baseline for r in self.runs if r.baseline is not None]
        out = {"mean": float(np.mean(accs)), "std": float(np.std(accs)),
               "baseline": float(np.mean(base)), "runs": len(accs),
               "failed": sum(r.error is not None for r in self.runs)}
        secs = [r.per_tuple_seconds for r in self.runs if r.per_tuple_seconds is not None]
        out["per_tuple_seconds"] = float(np.mean(secs)) if secs else None
        return out

    def to_dict(self) -> dict:
        return {"plan": self.plan, "embedder": self.embedder, "static": self.static,
                "dynamic": self.dynamic, "runs": [asdict(r) for r in self.runs]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_rows(self) -> list:
        return [{"ratio": r.ratio, "run": r.run, "mode": r.mode, "accuracy": r.accuracy,
                 "baseline": r.baseline, "seconds": r.per_tuple_seconds} for r in self.runs]


CSV_FIELDS = ("ratio", "run", "mode", "accuracy", "baseline", "seconds")


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        for row in rep.csv_rows():
            writer.writerow({k: "" if v is None else v for k, v in row.items()})
    return buf.getvalue()


def _clock(enabled: bool):
    return time.perf_counter if enabled else (lambda: 0.0)


def _majority_baseline(y_train, y_test) -> float:
    counts = Counter(y_train.tolist())
    top = sorted(counts.items(), key=lambda kv: (-kv[1], str(kv[0])))[0][0]
    return float(np.mean(y_test == top))


def _embedder_info(embedder) -> dict:
    return {"name": type(embedder).__name__, "params": {k: (list(v) if isinstance(v, tuple) else v)
                                                       for k, v in sorted(embedder.get_params().items())}}


def _prepared(embedder, plan: ExperimentPlan):
    # the label is always hidden from the embedder, on top of any user exclusions
    exclude = set(tuple(e) for e in embedder.exclude or ())
    exclude.add((plan.prediction_relation, plan.prediction_attribute))
    return clone(embedder).set_params(target_relation=plan.prediction_relation, exclude=tuple(sorted(exclude)))


def run_static_eval(db: Database, plan: ExperimentPlan, embedder) -> dict:
    """k-fold accuracy of a classifier on embeddings of the full database.

    With ``per_fold_reembed`` a fresh embedding (own seed) is trained per fold.
    """
    clock = _clock(plan.timing)
    embedder = _prepared(embedder, plan)
    rng = np.random.default_rng([plan.seed, 0xC5])
    ids = sorted(f.fact_id for f in db.relation_facts(plan.prediction_relation))
    y_all = labels_of(db, plan.prediction_relation, plan.prediction_attribute, ids)
    keep, rare = drop_rare_classes(y_all, plan.folds)
    ids = [i for i, k in zip(ids, keep) if k]
    y = y_all[keep]
    if len(y) < plan.folds:
        raise TooFewSamples(f"{len(y)} samples cannot fill {plan.folds} folds")
    fold_of = stratified_folds(y, plan.folds, rng)
    accs, bases, seconds = [], [], 0.0
    shared = None
    for k in range(plan.folds):
        t0 = clock()
        if plan.per_fold_reembed or shared is None:
            emb = clone_with_seed(embedder, _derive(plan.seed, k, 0x57)).fit(db)
            shared = emb
        X = shared.transform(ids)
        seconds += clock() - t0
        test = fold_of == k
        clf = SoftmaxRegression(reg=plan.classifier_reg).fit(X[~test], y[~test])
        accs.append(float(np.mean(clf.predict(X[test]) == y[test])))
        bases.append(_majority_baseline(y[~test], y[test]))
    out = {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "baseline": float(np.mean(bases)),
           "folds": plan.folds, "fold_accuracies": accs, "dropped_classes": [str(c) for c in rare]}
    out["seconds"] = seconds if plan.timing else None
    return out


def _derive(seed: int, *parts: int) -> int:
    return int(np.random.default_rng([int(seed), *parts]).integers(2**31 - 1))


def run_dynamic_experiment(db: Database, plan: ExperimentPlan, embedder) -> ExperimentReport:
    """The five-step dynamic protocol, repeated ``plan.runs`` times.

    1. stratified split of the prediction relation; the new facts are removed
       one at a time, in random order, with cascading deletion;
    2. the embedder is trained on what remains;
    3. a classifier is trained on the old facts' vectors;
    4. removal groups are reinserted in reverse order, either one group at a
       time with an extension after each, or all at once;
    5. accuracy is measured on the reinserted prediction facts only.

    Every pre-existing vector is checked to be bit-identical after step 4,
    and the database after step 4 is checked to equal the original.
    """
    if db.schema.is_fk_attribute(plan.prediction_relation, plan.prediction_attribute):
        raise ValueError("the prediction attribute must not take part in a foreign key")
    embedder = _prepared(embedder, plan)
    report = ExperimentReport(plan=asdict(plan), embedder=_embedder_info(embedder))
    if plan.static_eval:
        report.static = run_static_eval(db, plan, embedder)
    if plan.new_ratio == 0:
        return report
    clock = _clock(plan.timing)
    for run in range(plan.runs):
        try:
            report.runs.append(_one_run(db, plan, embedder, run, clock))
        except StabilityError:
            raise
        except Exception as exc:  # a failed run is reported, not dropped
            log.exception("run %d failed", run)
            report.runs.append(RunResult(run=run, ratio=plan.new_ratio, mode=plan.mode, accuracy=None,
                                         baseline=None, n_new=0, stable=False, error=repr(exc)))
    return report


def _one_run(db: Database, plan: ExperimentPlan, embedder, run: int, clock) -> RunResult:
    rel, attr = plan.prediction_relation, plan.prediction_attribute
    rng = np.random.default_rng([plan.seed, run, 0xD1])
    work = db.copy()
    old_ids, new_ids = stratified_partition(work, rel, attr, plan.new_ratio, rng)
    groups = []
    for fid in rng.permutation(new_ids):
        fid = int(fid)
        if fid in work:
            groups.append(work.cascade_delete(fid, protected=[rel]))

    t0 = clock()
    emb = clone_with_seed(embedder, _derive(plan.seed, run, 0xE3)).fit(work)
    static_seconds = clock() - t0

    train_ids = [i for i in old_ids if i in work]
    y_train = labels_of(work, rel, attr, train_ids)
    clf = SoftmaxRegression(reg=plan.classifier_reg).fit(emb.transform(train_ids), y_train)

    before = emb.snapshot()
    t0 = clock()
    if plan.mode == "one_by_one":
        for group in reversed(groups):
            stored = work.insert_facts(group)
            emb.extend(work, stored, mode="one_by_one")
    else:
        batch = [f for group in reversed(groups) for f in group]
        stored = work.insert_facts(batch)
        emb.extend(work, stored, mode="all_at_once")
    ext_seconds = clock() - t0
    after = emb.snapshot()
    changed = [k for k, v in before.items() if after.get(k) != v]
    if changed:
        raise StabilityError(f"run {run}: {len(changed)} pre-existing vectors changed")
    if work != db:
        raise AssertionError(f"run {run}: database after reinsertion differs from the original")

    eval_ids = sorted(f.fact_id for g in groups for f in g if f.relation == rel)
    y_new = labels_of(work, rel, attr, eval_ids)
    acc = float(np.mean(clf.predict(emb.transform(eval_ids)) == y_new))
    timed = plan.timing
    return RunResult(run=run, ratio=plan.new_ratio, mode=plan.mode, accuracy=acc,
                     baseline=_majority_baseline(y_train, y_new), n_new=len(eval_ids), stable=True,
                     static_seconds=static_seconds if timed else None,
                     extension_seconds=ext_seconds if timed else None,
                     per_tuple_seconds=ext_seconds / len(eval_ids) if timed and eval_ids else None)


# ---- synthetic benchmark -------------------------------------------------------

def make_synthetic_db(n_classes: int = 2, facts_per_class: int = 60, noise: float = 0.1, seed: int = 0,
                      items_per_class: int = 12, links_per_fact: int = 4, colors_per_class: int = 3):
    """Three-relation database ``Entity <- Link -> Item`` with a class label on Entity.

    Each entity links to ``links_per_fact`` distinct items; a link picks from
    the entity's own class pool with probability ``1 - noise`` and from the
    pool of all items otherwise. Items of different classes have disjoint
    colours and well separated sizes, so ``noise=0`` gives disjoint supports
    and ``noise=1`` makes the classes indistinguishable.
    Returns ``(db, labels)`` with ``labels`` mapping entity fact ids to classes.
    """
    if min(n_classes, facts_per_class, items_per_class, links_per_fact) <= 0 or not 0 <= noise <= 1:
        raise ValueError("invalid synthetic settings")
    rng = np.random.default_rng(seed)
    schema = Schema(
        [RelationSchema("Entity", [AttributeSchema("eid", "identifier"), AttributeSchema("label", "categorical")],
                        ["eid"]),
         RelationSchema("Link", [AttributeSchema("entity", "identifier"), AttributeSchema("item", "identifier")],
                        ["entity", "item"]),
         RelationSchema("Item", [AttributeSchema("iid", "identifier"), AttributeSchema("color", "categorical"),
                                 AttributeSchema("size", "numeric")], ["iid"])],
        [ForeignKey("Link", ["entity"], "Entity", ["eid"]), ForeignKey("Link", ["item"], "Item", ["iid"])],
    )
    items, pools = [], []
    for c in range(n_classes):
        pool = []
        for k in range(items_per_class):
            iid = f"i{c}_{k:03d}"
            color = f"color{c}_{int(rng.integers(colors_per_class))}"
            size = float(np.round(10.0 * c + rng.normal(0.0, 1.0), 3))
            items.append(Fact("Item", (iid, color, size)))
            pool.append(iid)
        pools.append(pool)
    everything = [iid for pool in pools for iid in pool]
    entities, links = [], []
    for c in range(n_classes):
        for k in range(facts_per_class):
            eid = f"e{c}_{k:03d}"
            entities.append((eid, f"class{c}"))
            chosen: list = []
            while len(chosen) < min(links_per_fact, len(everything)):
                pool = pools[c] if rng.random() >= noise else everything
                iid = pool[int(rng.integers(len(pool)))]
                if iid not in chosen:
                    chosen.append(iid)
            links.extend(Fact("Link", (eid, iid)) for iid in chosen)
    order = rng.permutation(len(entities))
    db = Database(schema)
    batch = [Fact("Entity", entities[i]) for i in order] + items + links
    db.insert_facts(batch)
    labels = {f.fact_id: f.values[1] for f in db.relation_facts("Entity")}
    return db, labels
