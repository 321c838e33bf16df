"""Command-line interface: ``relembed validate | embed | extend | experiment``.

Settings come from built-in defaults, then an optional YAML/JSON config file
(``--config``), then command-line flags. Flags are the kebab-case spelling of
the config keys. The effective configuration is written into every artifact.

Exit codes: 0 ok, 1 I/O or parse error, 2 constraint violation,
3 numeric failure, 4 bad configuration.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

import click
import numpy as np
import yaml

from . import evaluation
from .errors import (ConstraintViolation, DimensionMismatch, NonFinite, NonNumeric, NonpositiveVariance,
                     ParseError, RelembedError, UnknownAttribute, UnknownRelation)
from .estimators import ForwardEmbedder, GraphEmbedder
from .relational import format_cell, load_database, read_new_facts, save_database

log = logging.getLogger("relembed")

EXIT_OK, EXIT_IO, EXIT_CONSTRAINT, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2, 3, 4

FORWARD_KEYS = ("dim", "max_walk_len", "n_samples", "n_samples_new", "batch_size", "epochs", "learning_rate",
                "optimizer", "kd_mode", "mc_samples", "seed")
GRAPH_KEYS = ("dim", "walks_per_node", "steps_per_walk", "window", "negatives", "batch_size", "epochs",
              "dynamic_epochs", "dynamic_batch_size", "learning_rate", "optimizer", "p", "q", "seed")


@dataclass
class RunConfig:
    """Every knob of every command.

    Hyperparameters left as ``None`` take the chosen embedder's own default
    (e.g. ``batch_size`` is 50000 for forward and 40000 for graph).
    """

    schema: Optional[str] = None
    data_dir: Optional[str] = None
    model_in: Optional[str] = None
    model_out: Optional[str] = None
    report_out: Optional[str] = None
    vectors_out: Optional[str] = None
    data_out: Optional[str] = None
    new_rows: List[str] = field(default_factory=list)
    embedder: str = "forward"
    target_relation: Optional[str] = None
    exclude: List[str] = field(default_factory=list)
    mode: str = "one_by_one"
    # hyperparameters
    dim: Optional[int] = None
    max_walk_len: Optional[int] = None
    n_samples: Optional[int] = None
    n_samples_new: Optional[int] = None
    batch_size: Optional[int] = None
    epochs: Optional[int] = None
    learning_rate: Optional[float] = None
    optimizer: Optional[str] = None
    kd_mode: Optional[str] = None
    mc_samples: Optional[int] = None
    walks_per_node: Optional[int] = None
    steps_per_walk: Optional[int] = None
    window: Optional[int] = None
    negatives: Optional[int] = None
    dynamic_epochs: Optional[int] = None
    dynamic_batch_size: Optional[int] = None
    p: Optional[float] = None
    q: Optional[float] = None
    # experiment plan
    prediction_relation: Optional[str] = None
    prediction_attribute: Optional[str] = None
    ratios: List[float] = field(default_factory=lambda: [0.1])
    modes: List[str] = field(default_factory=lambda: ["one_by_one", "all_at_once"])
    runs: int = 10
    folds: int = 10
    static_eval: bool = True
    per_fold_reembed: bool = True
    timing: bool = True
    synthetic: bool = False
    # general
    seed: int = 0
    verbosity: int = 0
    workers: int = 1

    def embedder_params(self) -> dict:
        keys = FORWARD_KEYS if self.embedder == "forward" else GRAPH_KEYS
        params = {k: getattr(self, k) for k in keys if getattr(self, k) is not None}
        params["seed"] = self.seed
        return params

    def exclude_pairs(self) -> list:
        out = []
        for item in self.exclude:
            rel, dot, attr = item.partition(".")
            if not dot or not rel or not attr:
                raise ConfigError(f"exclude entry {item!r} must look like Relation.attribute")
            out.append((rel, attr))
        return out


class ConfigError(RelembedError):
    pass


CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}
LIST_KEYS = {"new_rows", "exclude", "ratios", "modes"}


def _config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ParseError(f"config {path}: {exc}") from exc
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return {str(k).replace("-", "_"): v for k, v in doc.items()}


def build_config(config_path: Optional[str], flags: dict) -> RunConfig:
    """Defaults < config file < flags; unknown keys are rejected."""
    merged = _config_file(config_path) if config_path else {}
    unknown = sorted(set(merged) - set(CONFIG_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for k, v in flags.items():
        if v is None or (k in LIST_KEYS and v == ()):
            continue
        merged[k] = list(v) if k in LIST_KEYS else v
    for k in LIST_KEYS & set(merged):
        if not isinstance(merged[k], list):
            merged[k] = [merged[k]]
    try:
        cfg = RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.embedder not in ("forward", "graph"):
        raise ConfigError(f"embedder must be forward or graph, not {cfg.embedder!r}")
    if cfg.mode not in ("one_by_one", "all_at_once") or any(m not in ("one_by_one", "all_at_once")
                                                            for m in cfg.modes):
        raise ConfigError("modes must be one_by_one or all_at_once")
    if cfg.workers != 1:
        log.warning("workers=%d requested; runs execute sequentially", cfg.workers)
    return cfg


def config_echo(cfg: RunConfig) -> dict:
    return {k: v for k, v in asdict(cfg).items()}


def _require(cfg: RunConfig, *names):
    missing = [n for n in names if getattr(cfg, n) in (None, [])]
    if missing:
        raise ConfigError("missing setting(s): " + ", ".join("--" + n.replace("_", "-") for n in missing))


def _make_embedder(cfg: RunConfig, target: Optional[str]):
    cls = ForwardEmbedder if cfg.embedder == "forward" else GraphEmbedder
    try:
        return cls(target_relation=target, exclude=tuple(cfg.exclude_pairs()), **cfg.embedder_params())
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _load_db(cfg: RunConfig):
    _require(cfg, "schema", "data_dir")
    return load_database(cfg.schema, cfg.data_dir)


def _write_vectors(path, embedder, db, ids) -> None:
    X = embedder.transform(ids)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fact_id", "relation", "key"] + [f"v{j}" for j in range(X.shape[1])])
        for fid, row in zip(ids, X):
            f = db.fact(fid)
            key = "|".join(format_cell(v) for v in db.key_of(f))
            w.writerow([fid, f.relation, key] + [repr(float(x)) for x in row])


def _save(embedder, path, db, cfg) -> None:
    embedder.save(path, db, {"config": config_echo(cfg)})


def _handle(fn):
    """Map library errors to exit codes with a one-line diagnostic."""
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(EXIT_CONFIG, f"configuration error: {exc}")
        except ConstraintViolation as exc:
            where = f" (row {exc.row})" if exc.row is not None else ""
            _fail(EXIT_CONSTRAINT, f"constraint violation{where}: {exc}")
        except (NonFinite, DimensionMismatch, NonNumeric, NonpositiveVariance, FloatingPointError,
                np.linalg.LinAlgError) as exc:
            _fail(EXIT_NUMERIC, f"numeric failure: {exc}")
        except (ParseError, OSError) as exc:
            _fail(EXIT_IO, f"input error: {exc}")
        except (UnknownRelation, UnknownAttribute, ValueError) as exc:
            _fail(EXIT_CONFIG, f"configuration error: {exc}")
        except RelembedError as exc:
            _fail(EXIT_NUMERIC, f"error: {exc}")
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _fail(code: int, message: str):
    click.echo(message, err=True)
    sys.exit(code)


# ---- click plumbing --------------------------------------------------------

def _common(f):
    opts = [
        click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML or JSON config file."),
        click.option("--schema", help="Schema descriptor (YAML or JSON)."),
        click.option("--data-dir", help="Directory with one <Relation>.csv per relation."),
        click.option("--seed", type=int),
        click.option("--verbosity", "-v", type=int),
        click.option("--workers", type=int),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _hyper(f):
    opts = [
        click.option("--embedder", type=click.Choice(["forward", "graph"])),
        click.option("--target-relation"),
        click.option("--exclude", multiple=True, help="Relation.attribute hidden from the embedder; repeatable."),
        click.option("--dim", type=int), click.option("--max-walk-len", type=int),
        click.option("--n-samples", type=int), click.option("--n-samples-new", type=int),
        click.option("--batch-size", type=int), click.option("--epochs", type=int),
        click.option("--learning-rate", type=float), click.option("--optimizer", type=click.Choice(["adam", "sgd"])),
        click.option("--kd-mode", type=click.Choice(["exact", "monte_carlo"])), click.option("--mc-samples", type=int),
        click.option("--walks-per-node", type=int), click.option("--steps-per-walk", type=int),
        click.option("--window", type=int), click.option("--negatives", type=int),
        click.option("--dynamic-epochs", type=int), click.option("--dynamic-batch-size", type=int),
        click.option("--p", "p", type=float), click.option("--q", "q", type=float),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _setup_logging(cfg: RunConfig) -> None:
    level = logging.WARNING if cfg.verbosity <= 0 else (logging.INFO if cfg.verbosity == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@click.group()
@click.version_option(package_name="artifact")
def cli():
    """Stable embeddings of relational databases."""


def main(argv=None):
    """Entry point; click usage errors exit with the bad-configuration code."""
    try:
        cli.main(args=argv, prog_name="relembed", standalone_mode=False)
    except click.exceptions.UsageError as exc:
        exc.show()
        sys.exit(EXIT_CONFIG)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        sys.exit(EXIT_IO)
    except click.exceptions.ClickException as exc:
        exc.show()
        sys.exit(EXIT_IO)


@cli.command()
@_common
@_handle
def validate(config_path, **flags):
    """Load and check a database; print per-relation counts."""
    cfg = build_config(config_path, flags)
    _setup_logging(cfg)
    db = _load_db(cfg)
    db.validate()
    click.echo(f"{'relation':<24}{'#tuples':>10}{'#attributes':>13}")
    for rel in db.schema:
        click.echo(f"{rel.name:<24}{len(db.facts[rel.name]):>10}{rel.arity:>13}")
    click.echo(f"{'total':<24}{len(db):>10}{sum(r.arity for r in db.schema):>13}")
    click.echo(f"#relations {len(db.schema.relations)}  #foreign keys {len(db.schema.foreign_keys)}")


@cli.command()
@_common
@_hyper
@click.option("--model-out", help="Model file to write.")
@click.option("--vectors-out", help="Optional CSV of the embedded facts' vectors.")
@_handle
def embed(config_path, **flags):
    """Train a static embedding and write the model file."""
    cfg = build_config(config_path, flags)
    _setup_logging(cfg)
    _require(cfg, "model_out")
    if cfg.embedder == "forward":
        _require(cfg, "target_relation")
    db = _load_db(cfg)
    est = _make_embedder(cfg, cfg.target_relation).fit(db)
    _save(est, cfg.model_out, db, cfg)
    ids = [i for i in est.embedded_ids_ if cfg.target_relation is None or db.fact(i).relation == cfg.target_relation]
    if cfg.vectors_out:
        _write_vectors(cfg.vectors_out, est, db, ids)
    click.echo(f"embedded {len(ids)} facts into {cfg.model_out}")


@cli.command()
@_common
@click.option("--embedder", type=click.Choice(["forward", "graph"]))
@click.option("--target-relation")
@click.option("--model-in", help="Model file produced by embed or extend.")
@click.option("--model-out", help="Where to write the updated model (default: --model-in).")
@click.option("--new-rows", multiple=True, help="<Relation>.csv file of inserted facts; repeatable.")
@click.option("--mode", type=click.Choice(["one_by_one", "all_at_once"]))
@click.option("--vectors-out", help="CSV receiving the vectors of the new facts.")
@click.option("--data-out", help="Directory to write the updated database to (with fact ids).")
@_handle
def extend(config_path, **flags):
    """Insert new facts and embed them without touching existing vectors."""
    cfg = build_config(config_path, flags)
    _setup_logging(cfg)
    _require(cfg, "model_in", "new_rows")
    db = _load_db(cfg)
    if cfg.embedder == "forward":
        est = ForwardEmbedder.load(cfg.model_in, db)
    else:
        est = GraphEmbedder.load(cfg.model_in, db, cfg.target_relation)
    batch, rows = read_new_facts(db.schema, cfg.new_rows, with_rows=True)
    stored = db.insert_facts(batch, rows)  # raises before anything is written
    new_vectors = est.extend(db, stored, mode=cfg.mode)
    ids = sorted(new_vectors)
    out = cfg.model_out or cfg.model_in
    _save(est, out, db, cfg)
    if cfg.vectors_out:
        _write_vectors(cfg.vectors_out, est, db, ids)
    if cfg.data_out:
        save_database(db, Path(cfg.data_out) / "schema.json", cfg.data_out)
    click.echo(f"inserted {len(stored)} facts; embedded {len(ids)} new facts into {out}")


@cli.command()
@_common
@_hyper
@click.option("--prediction-relation")
@click.option("--prediction-attribute")
@click.option("--ratios", multiple=True, type=float, help="New-fact ratio; repeatable.")
@click.option("--modes", multiple=True, type=click.Choice(["one_by_one", "all_at_once"]))
@click.option("--runs", type=int)
@click.option("--folds", type=int)
@click.option("--static-eval/--no-static-eval", default=None)
@click.option("--per-fold-reembed/--no-per-fold-reembed", default=None)
@click.option("--timing/--no-timing", default=None, help="Record wall-clock times (off for byte-stable reports).")
@click.option("--synthetic", is_flag=True, default=None, help="Use the built-in synthetic benchmark.")
@click.option("--report-out", help="JSON report path; a CSV is written next to it.")
@_handle
def experiment(config_path, **flags):
    """Run the dynamic experiment over ratios and modes and write the report."""
    cfg = build_config(config_path, flags)
    _setup_logging(cfg)
    _require(cfg, "report_out")
    if cfg.synthetic:
        db, _ = evaluation.make_synthetic_db(seed=cfg.seed)
        rel, attr = cfg.prediction_relation or "Entity", cfg.prediction_attribute or "label"
    else:
        _require(cfg, "prediction_relation", "prediction_attribute")
        db = _load_db(cfg)
        rel, attr = cfg.prediction_relation, cfg.prediction_attribute
    embedder = _make_embedder(cfg, rel)
    reports, static = [], None
    for ratio in cfg.ratios:
        for mode in cfg.modes:
            plan = evaluation.ExperimentPlan(rel, attr, new_ratio=ratio, mode=mode, runs=cfg.runs, folds=cfg.folds,
                                             seed=cfg.seed, static_eval=cfg.static_eval and static is None,
                                             per_fold_reembed=cfg.per_fold_reembed, timing=cfg.timing)
            rep = evaluation.run_dynamic_experiment(db, plan, embedder)
            if plan.static_eval:
                static = rep.static
            reports.append(rep)
    doc = {"config": config_echo(cfg), "static": static or {},
           "experiments": [{k: v for k, v in r.to_dict().items() if k != "static"} for r in reports]}
    out = Path(cfg.report_out)
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    out.with_suffix(".csv").write_text(evaluation.reports_to_csv(reports), encoding="utf-8")
    click.echo(f"{'ratio':>6} {'mode':<12}{'accuracy':>10}{'std':>8}{'baseline':>10}")
    if static:
        click.echo(f"{'static':>6} {'':<12}{static['mean']:>10.3f}{static['std']:>8.3f}{static['baseline']:>10.3f}")
    for r in reports:
        d = r.dynamic
        if d:
            click.echo(f"{r.plan['new_ratio']:>6.2f} {r.plan['mode']:<12}{d['mean']:>10.3f}{d['std']:>8.3f}"
                       f"{d['baseline']:>10.3f}")
    click.echo(f"report written to {out} and {out.with_suffix('.csv')}")


if __name__ == "__main__":
    main()
