"""scikit-learn compatible estimators around the embedders and the classifier.

The embedders take a :class:`~relembed.relational.Database` where scikit-learn
would take ``X``; ``transform`` accepts a database (all embedded facts of the
target relation present in it) or a sequence of fact ids.
"""

from __future__ import annotations

from dataclasses import asdict
from typing import Iterable, Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import forward, graphembed
from .errors import MissingEmbedding, NotFound, ParseError, SingleClass, UnknownRelation
from .relational import Database, Fact


def check_database(db, relation: Optional[str] = None) -> Database:
    """Reject anything that is not a database, or lacks ``relation``."""
    if not isinstance(db, Database):
        raise TypeError(f"expected a Database, got {type(db).__name__}")
    if relation is not None and relation not in db.schema:
        raise UnknownRelation(relation)
    return db


def check_fact_ids(X, relation: Optional[str] = None) -> list:
    """Normalise a database, fact objects or ids into a list of fact ids."""
    if isinstance(X, Database):
        facts = X.relation_facts(relation) if relation else X.by_id.values()
        return sorted(f.fact_id for f in facts)
    out = []
    for x in X:
        out.append(x.fact_id if isinstance(x, Fact) else int(x))
    return out


def _exclude_pairs(exclude) -> tuple:
    return tuple(sorted(tuple(e) for e in exclude or ()))


class ForwardEmbedder(TransformerMixin, BaseEstimator):
    """Foreign-key random-walk embedding of one relation's facts.

    Parameters mirror :class:`~relembed.forward.ForwardHyperparams`;
    ``target_relation`` names the relation to embed and ``exclude`` lists
    ``(relation, attribute)`` pairs kept from the embedder (e.g. the label).
    """

    def __init__(self, target_relation=None, exclude=(), dim=100, max_walk_len=2, n_samples=5000,
                 n_samples_new=2500, batch_size=50_000, epochs=10, learning_rate=1e-2, optimizer="adam",
                 kd_mode="exact", mc_samples=10_000, seed=0):
        self.target_relation = target_relation
        self.exclude = exclude
        self.dim = dim
        self.max_walk_len = max_walk_len
        self.n_samples = n_samples
        self.n_samples_new = n_samples_new
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.kd_mode = kd_mode
        self.mc_samples = mc_samples
        self.seed = seed

    def hyperparams(self) -> forward.ForwardHyperparams:
        return forward.ForwardHyperparams(
            dim=self.dim, max_walk_len=self.max_walk_len, n_samples=self.n_samples,
            n_samples_new=self.n_samples_new, batch_size=self.batch_size, epochs=self.epochs,
            learning_rate=self.learning_rate, optimizer=self.optimizer, seed=self.seed,
            kd_mode=self.kd_mode, mc_samples=self.mc_samples)

    def fit(self, X, y=None):
        db = check_database(X, self.target_relation)
        if self.target_relation is None:
            raise ValueError("target_relation must be set")
        self.model_ = forward.train_static(db, self.target_relation, self.hyperparams(),
                                           exclude=_exclude_pairs(self.exclude))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        ids = check_fact_ids(X, self.target_relation)
        if isinstance(X, Database):
            ids = [i for i in ids if i in self.model_.phi]
        return np.vstack([self.model_.vector(i) for i in ids]) if ids else np.empty((0, self.model_.dim))

    def extend(self, db: Database, facts: Iterable[Fact], mode: str = "one_by_one") -> dict:
        """Embed newly inserted facts; returns ``{fact_id: vector}``."""
        check_is_fitted(self, "model_")
        check_database(db, self.target_relation)
        pairs = forward.extend_batch(db, list(facts), self.model_, mode=mode)
        return dict(pairs)

    def delete(self, fact_id: int):
        check_is_fitted(self, "model_")
        return forward.delete_fact_embedding(self.model_, fact_id)

    def snapshot(self) -> dict:
        """Bytes of every stored vector, for stability checks."""
        check_is_fitted(self, "model_")
        return {fid: v.tobytes() for fid, v in self.model_.phi.items()}

    @property
    def embedded_ids_(self) -> list:
        return sorted(self.model_.phi)

    def save(self, path, db: Optional[Database] = None, extra: Optional[dict] = None) -> None:
        check_is_fitted(self, "model_")
        forward.save_model(self.model_, path, db, extra)

    @classmethod
    def load(cls, path, db: Database) -> "ForwardEmbedder":
        model = forward.load_model(path, db.schema)
        if model.schema_digest and model.schema_digest != db.schema.digest():
            raise ParseError(f"{path}: model was trained on a different schema")
        est = cls(target_relation=model.target_relation, exclude=model.exclude,
                  **{k: v for k, v in asdict(model.hyperparams).items()})
        est.model_ = model
        return est


class GraphEmbedder(TransformerMixin, BaseEstimator):
    """Node2Vec embedding of the database's fact/value graph.

    ``transform`` returns the in-vectors of fact nodes. ``target_relation``
    only restricts which facts a database argument expands to.
    """

    def __init__(self, target_relation=None, exclude=(), dim=100, walks_per_node=40, steps_per_walk=30,
                 window=5, negatives=20, batch_size=40_000, epochs=10, dynamic_epochs=5, dynamic_batch_size=500,
                 learning_rate=1e-2,
                 optimizer="adam", p=1.0, q=1.0, seed=0):
        self.target_relation = target_relation
        self.exclude = exclude
        self.dim = dim
        self.walks_per_node = walks_per_node
        self.steps_per_walk = steps_per_walk
        self.window = window
        self.negatives = negatives
        self.batch_size = batch_size
        self.epochs = epochs
        self.dynamic_epochs = dynamic_epochs
        self.dynamic_batch_size = dynamic_batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.p = p
        self.q = q
        self.seed = seed

    def hyperparams(self) -> graphembed.GraphHyperparams:
        return graphembed.GraphHyperparams(
            dim=self.dim, walks_per_node=self.walks_per_node, steps_per_walk=self.steps_per_walk,
            window=self.window, negatives=self.negatives, batch_size=self.batch_size, epochs=self.epochs,
            dynamic_epochs=self.dynamic_epochs, dynamic_batch_size=self.dynamic_batch_size,
            learning_rate=self.learning_rate, optimizer=self.optimizer,
            p=self.p, q=self.q, seed=self.seed)

    def fit(self, X, y=None):
        db = check_database(X, self.target_relation)
        hp = self.hyperparams()
        self.graph_, self.model_ = graphembed.train_graph_embedding(db, hp, _exclude_pairs(self.exclude))
        self._rng = np.random.default_rng([hp.seed, 1])
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        ids = check_fact_ids(X, self.target_relation)
        if isinstance(X, Database):
            ids = [i for i in ids if i in self.graph_.fact_nodes]
        if not ids:
            return np.empty((0, self.dim))
        try:
            return np.vstack([graphembed.fact_embedding(self.model_, self.graph_, i) for i in ids])
        except NotFound as exc:
            raise MissingEmbedding(str(exc)) from None

    def extend(self, db: Database, facts: Iterable[Fact], mode: str = "one_by_one") -> dict:
        """Embed newly inserted facts; ``one_by_one`` trains once per target fact with its companions."""
        check_is_fitted(self, "model_")
        facts = list(facts)
        if mode == "all_at_once" or self.target_relation is None:
            groups = [facts]
        elif mode == "one_by_one":
            # each group ends at a target fact; trailing companions join the last group
            groups, cur = [], []
            for f in facts:
                cur.append(f)
                if f.relation == self.target_relation:
                    groups.append(cur)
                    cur = []
            if cur and groups:
                groups[-1].extend(cur)
            elif cur:
                groups.append(cur)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        hp = self.hyperparams()
        for group in groups:
            graphembed.extend_graph_model(db, self.graph_, self.model_, group, hp, self._rng, inplace=True)
        return {f.fact_id: graphembed.fact_embedding(self.model_, self.graph_, f.fact_id)
                for f in facts if self.target_relation is None or f.relation == self.target_relation}

    def delete(self, fact_id: int):
        check_is_fitted(self, "model_")
        if fact_id not in self.graph_.fact_nodes:
            return None
        v = graphembed.fact_embedding(self.model_, self.graph_, fact_id)
        graphembed.delete_fact_node(self.graph_, fact_id)
        return v

    def snapshot(self) -> dict:
        check_is_fitted(self, "model_")
        m = self.model_
        return {node: m.in_vectors[node].tobytes() + m.out_vectors[node].tobytes()
                for node in range(m.n_nodes) if self.graph_.alive[node]}

    @property
    def embedded_ids_(self) -> list:
        return sorted(self.graph_.fact_nodes)

    def save(self, path, db: Optional[Database] = None, extra: Optional[dict] = None) -> None:
        check_is_fitted(self, "model_")
        digest = db.schema.digest() if db is not None else ""
        graphembed.save_model(self.graph_, self.model_, self.hyperparams(), path, digest, extra)

    @classmethod
    def load(cls, path, db: Database, target_relation: Optional[str] = None) -> "GraphEmbedder":
        """Reload a saved model; ``db`` must be the database it was trained or last extended on."""
        graph, model, hp = graphembed.load_model(path, db)
        est = cls(target_relation=target_relation, exclude=tuple(sorted(graph.exclude)), **asdict(hp))
        est.graph_, est.model_ = graph, model
        est._rng = np.random.default_rng([hp.seed, 2, graph.n_nodes])
        return est


class SoftmaxRegression(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression fit by full-batch gradient descent.

    Features are standardised internally; ``reg`` is the L2 strength on the
    weights (not the intercepts).
    """

    def __init__(self, reg=1e-3, epochs=500, lr=0.5, seed=0):
        self.reg = reg
        self.epochs = epochs
        self.lr = lr
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        check_classification_targets(y)
        self.classes_, yi = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise SingleClass("need at least two classes")
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        scale = X.std(axis=0)
        self.scale_ = np.where(scale > 0, scale, 1.0)
        Z = (X - self.mean_) / self.scale_
        n, d = Z.shape
        k = len(self.classes_)
        Y = np.zeros((n, k))
        Y[np.arange(n), yi] = 1.0
        W = np.zeros((d, k))
        b = np.zeros(k)
        # cap the step at 1/L so large reg cannot make descent diverge
        smax = np.linalg.norm(Z, 2) if Z.size else 0.0
        lipschitz = 0.5 * (smax * smax / n + 1.0) + self.reg
        step = min(self.lr, 1.0 / lipschitz)
        for _ in range(self.epochs):
            P = _softmax(Z @ W + b)
            G = (P - Y) / n
            W -= step * (Z.T @ G + self.reg * W)
            b -= step * G.sum(axis=0)
        self.coef_, self.intercept_ = W.T, b
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return ((X - self.mean_) / self.scale_) @ self.coef_.T + self.intercept_

    def predict_proba(self, X):
        return _softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def clone_with_seed(estimator, seed: int):
    """Unfitted copy of ``estimator`` with a different ``seed``."""
    from sklearn.base import clone
    est = clone(estimator)
    est.set_params(seed=int(seed))
    return est
