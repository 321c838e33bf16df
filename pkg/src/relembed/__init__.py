"""Stable embeddings of relational databases.

Two embedders share one estimator interface: a foreign-key random-walk
method whose new vectors come from a linear solve against frozen
parameters, and a Node2Vec baseline over a fact/value graph.
"""

from .errors import (ConstraintViolation, DimensionMismatch, EmptyRelation, MissingEmbedding, NoPairs,
                     NonFinite, NonNumeric, NonpositiveVariance, NotFound, NoUsableConstraints, NullOperand,
                     ParseError, RelationMismatch, RelembedError, SingleClass, TooFewSamples, UnknownAttribute,
                     UnknownRelation)
from .estimators import ForwardEmbedder, GraphEmbedder, SoftmaxRegression
from .evaluation import ExperimentPlan, ExperimentReport, make_synthetic_db, run_dynamic_experiment
from .relational import Database, Fact, Schema, load_database, load_schema

__version__ = "0.1.0"

__all__ = [
    "Database", "Fact", "Schema", "load_database", "load_schema",
    "ForwardEmbedder", "GraphEmbedder", "SoftmaxRegression",
    "ExperimentPlan", "ExperimentReport", "make_synthetic_db", "run_dynamic_experiment",
    "ConstraintViolation", "DimensionMismatch", "EmptyRelation", "MissingEmbedding", "NoPairs", "NonFinite",
    "NonNumeric", "NonpositiveVariance", "NotFound", "NoUsableConstraints", "NullOperand", "ParseError",
    "RelationMismatch", "RelembedError", "SingleClass", "TooFewSamples", "UnknownAttribute", "UnknownRelation",
]
