"""Experiment configuration, dataset files, pipeline orchestration and run directories.

A run directory holds ``config.echo`` (the resolved configuration), one
``trial_NNN`` folder per trial with model checkpoints, the clustering
artifact and training histories, plus ``metrics.csv`` and ``summary.json``.
Everything in ``metrics.csv`` is recomputable from the saved checkpoints, so
``evaluate_run`` reproduces it byte for byte.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import cluster, dro, metrics, models, riskest, synthgen
from .models import LossSpec, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_METRICS = ("overall", "robust_true", "cluster_robust", "unweighted_cluster_robust")
METHODS = ("george", "erm", "superclass_gdro", "random_gdro", "subclass_gdro")
BASELINES = METHODS[1:]
ORACLE = "oracle"
F32_MAGIC = b"STRAT1"
METRIC_COLUMNS = ("method", "trial", "split", "group_kind", "group", "metric", "value")
UNWEIGHTED_CLUSTER = "cluster_unweighted"


class ConfigError(ValueError):
    pass


class DatasetParseError(ValueError):
    pass


# ---------------------------------------------------------------- configuration

@dataclass
class DataConfig:
    """Where the data comes from.

    ``source`` is ``example1`` (alpha), ``spec`` (a serialized generative spec
    at ``spec_path``) or ``files``. Synthetic splits are drawn independently
    with ``n_train``/``n_val``/``n_test`` rows; when ``eval_subclass_probs``
    is set, validation and test rows are drawn with those subclass
    frequencies and carry weights restoring the generative frequencies. File
    sources give ``train``/``val``/``test`` paths, or a single ``path`` split
    by ``fractions``.
    """

    source: str = "example1"
    alpha: float = 0.02
    spec_path: Optional[str] = None
    n_train: int = 10000
    n_val: int = 2000
    n_test: int = 10000
    eval_subclass_probs: Optional[list] = None
    format: str = "csv"
    train: Optional[str] = None
    val: Optional[str] = None
    test: Optional[str] = None
    path: Optional[str] = None
    fractions: list = field(default_factory=lambda: [0.6, 0.2, 0.2])
    prefeaturized: bool = False


def _default_erm():
    # strong weight decay: the norm-bounded regime in which ERM ignores rare subclasses
    return LossSpec(weight_decay=10.0, learning_rate=0.01, epochs=10, momentum=0.9)


def _default_gdro():
    return _default_erm()  # same regularization, so only the objective differs


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    trials: int = 1
    workers: int = 1
    checkpoint_metric: str = "cluster_robust"
    eval_every: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    erm: LossSpec = field(default_factory=_default_erm)
    gdro: LossSpec = field(default_factory=_default_gdro)
    dro: dro.DroConfig = field(default_factory=dro.DroConfig)
    cluster: cluster.ClusterConfig = field(default_factory=cluster.ClusterConfig)

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.workers < 1 or self.eval_every < 1:
            raise ConfigError("workers and eval_every must be positive")
        if self.checkpoint_metric not in CHECKPOINT_METRICS:
            raise ConfigError(f"checkpoint_metric must be one of {CHECKPOINT_METRICS}")
        fr = self.data.fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ConfigError("split fractions must be three nonnegative numbers summing to 1")
        if self.data.source not in ("example1", "spec", "files"):
            raise ConfigError(f"unknown data source {self.data.source!r}")
        if self.data.source == "spec" and not self.data.spec_path:
            raise ConfigError("data.spec_path is required for source 'spec'")
        if self.data.source == "files" and not (self.data.path or self.data.train):
            raise ConfigError("file source needs data.path or data.train/val/test")
        if self.dro.mode == dro.RESTRICTED:
            raise ConfigError("the restricted objective is not available in the pipeline")

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["cluster"]["k_range"] = list(self.cluster.k_range)
        doc["cluster"]["methods"] = list(self.cluster.methods)
        doc["cluster"]["representations"] = list(self.cluster.representations)
        return doc

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "erm": LossSpec, "gdro": LossSpec,
             "dro": dro.DroConfig, "cluster": cluster.ClusterConfig}
_TUPLE_FIELDS = {"k_range", "methods", "representations"}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if k in _TUPLE_FIELDS else v for k, v in doc.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc or {})
    sections = {}
    for key, cls in _SECTIONS.items():
        if key in doc:
            sections[key] = _build(cls, doc.pop(key), key)
    top = _build(ExperimentConfig, {}, "config")  # validates defaults
    names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in config: {', '.join(unknown)}")
    try:
        return dataclasses.replace(top, **doc, **sections)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    """Read a YAML (or JSON) experiment configuration."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return config_from_dict(doc or {})


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


# ---------------------------------------------------------------- dataset files

def _parse_table(path, required=("y",)):
    """(header, n x columns float table) of a headed numeric CSV; errors carry the line number."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetParseError(f"{path}: empty file") from None
        for col in required:
            if col not in header:
                raise DatasetParseError(f"{path}: missing required column {col!r}")
        rows = []
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetParseError(
                    f"{path}:{line}: expected {len(header)} fields, found {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                bad = next(v for v in row if not _is_float(v))
                raise DatasetParseError(f"{path}:{line}: non-numeric cell {bad!r}") from None
    table = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, table


def _is_float(text) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _labels(path, name, values, first_line=2, allow_missing=False):
    """Validate an integer label column; returns int array."""
    bad = np.flatnonzero(~np.isfinite(values) | (values < 0) | (values != np.round(values)))
    if bad.size:
        i = int(bad[0])
        raise DatasetParseError(f"{path}:{i + first_line}: label {name}={values[i]!r} out of range")
    return values.astype(int)


def _dataset_from_columns(path, header, table, features, n_classes=None):
    col = {h: i for i, h in enumerate(header)}
    y = _labels(path, "y", table[:, col["y"]])
    if n_classes is not None and y.size and y.max() >= n_classes:
        i = int(np.argmax(y >= n_classes))
        raise DatasetParseError(f"{path}:{i + 2}: label y={y[i]} out of range")
    z = _labels(path, "z", table[:, col["z"]]) if "z" in col else None
    weights = None
    if "weight" in col:
        weights = table[:, col["weight"]]
        bad = np.flatnonzero(~np.isfinite(weights) | (weights < 0))
        if bad.size:
            raise DatasetParseError(f"{path}:{int(bad[0]) + 2}: negative or invalid weight")
    try:
        return synthgen.Dataset(features, y, z, weights, n_classes)
    except ValueError as exc:
        raise DatasetParseError(f"{path}: {exc}") from exc


def load_dataset(path, format: str = "csv", labels_path=None, n_classes=None) -> synthgen.Dataset:
    """Load a dataset file.

    csv: header ``f0..f{d-1}, y[, z][, weight]``. f32bin: ``STRAT1`` magic,
    little-endian u32 n and d, then n*d little-endian float32 values in
    row-major order; labels come from a sidecar CSV (``<path>.labels.csv`` by
    default) with columns ``y[, z][, weight]``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if format == "csv":
        header, table = _parse_table(path)
        feat_cols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        expected = [f"f{j}" for j in range(len(feat_cols))]
        if [header[i] for i in feat_cols] != expected:
            raise DatasetParseError(f"{path}: feature columns must be named f0..f{{d-1}} in order")
        if not feat_cols:
            raise DatasetParseError(f"{path}: no feature columns")
        extra = set(header) - set(expected) - {"y", "z", "weight"}
        if extra:
            raise DatasetParseError(f"{path}: unknown column(s) {sorted(extra)}")
        return _dataset_from_columns(path, header, table, table[:, feat_cols], n_classes)
    if format == "f32bin":
        raw = path.read_bytes()
        head = struct.calcsize("<6sII")
        if len(raw) < head or raw[:6] != F32_MAGIC:
            raise DatasetParseError(f"{path}: missing STRAT1 header")
        _, n, d = struct.unpack("<6sII", raw[:head])
        if len(raw) != head + 4 * n * d:
            raise DatasetParseError(f"{path}: expected {n}x{d} float32 values")
        feats = np.frombuffer(raw[head:], dtype="<f4").reshape(n, d).astype(float)
        labels_path = Path(labels_path) if labels_path else Path(str(path) + ".labels.csv")
        header, table = _parse_table(labels_path)
        if len(table) != n:
            raise DatasetParseError(f"{labels_path}: {len(table)} label rows for {n} feature rows")
        extra = set(header) - {"y", "z", "weight"}
        if extra:
            raise DatasetParseError(f"{labels_path}: unknown column(s) {sorted(extra)}")
        return _dataset_from_columns(labels_path, header, table, feats, n_classes)
    raise ValueError(f"unknown dataset format {format!r}")


def _label_columns(dataset, include_z: bool):
    cols, names = [dataset.y], ["y"]
    if include_z and dataset.has_z:
        with dataset.audit(ORACLE):
            cols.append(dataset.z)
        names.append("z")
    if not np.all(dataset.eval_weights == 1.0):
        cols.append(dataset.eval_weights)
        names.append("weight")
    return names, cols


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def write_dataset(dataset, path, format: str = "csv", include_z: bool = True) -> None:
    path = Path(path)
    names, cols = _label_columns(dataset, include_z)
    if format == "csv":
        header = [f"f{j}" for j in range(dataset.d)] + names
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(dataset.n):
                w.writerow([repr(float(v)) for v in dataset.features[i]] + [_fmt(c[i]) for c in cols])
    elif format == "f32bin":
        with open(path, "wb") as fh:
            fh.write(struct.pack("<6sII", F32_MAGIC, dataset.n, dataset.d))
            fh.write(dataset.features.astype("<f4").tobytes())
        with open(str(path) + ".labels.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for i in range(dataset.n):
                w.writerow([_fmt(c[i]) for c in cols])
    else:
        raise ValueError(f"unknown dataset format {format!r}")


# ---------------------------------------------------------------- seeds and data

def trial_seed(seed: int, trial: int, stream: int = 0) -> int:
    return int(np.random.SeedSequence([int(seed), int(trial), int(stream)]).generate_state(1)[0])


def _spec(config: ExperimentConfig) -> synthgen.GenerativeSpec:
    if config.data.source == "example1":
        return synthgen.example1_spec(config.data.alpha)
    return synthgen.GenerativeSpec.loads(Path(config.data.spec_path).read_text())


def _eval_split(spec, n, seed, probs):
    if probs is None:
        return synthgen.sample_dataset(spec, n, seed)
    probs = np.asarray(probs, dtype=float)
    probs = probs / probs.sum()
    data = synthgen.sample_dataset(spec, n, seed, probs)
    with data.audit("generate"):
        z = data.z
    ratio = np.divide(spec.subclass_probs, probs, out=np.zeros_like(probs), where=probs > 0)
    return synthgen.Dataset(data.features, data.y, z, ratio[z], spec.n_superclasses)


def make_splits(config: ExperimentConfig, trial: int):
    """(train, val, test) for one trial; synthetic splits are independent draws."""
    dc = config.data
    if dc.source in ("example1", "spec"):
        spec = _spec(config)
        train = synthgen.sample_dataset(spec, dc.n_train, trial_seed(config.seed, trial, 10))
        val = _eval_split(spec, dc.n_val, trial_seed(config.seed, trial, 11), dc.eval_subclass_probs)
        test = _eval_split(spec, dc.n_test, trial_seed(config.seed, trial, 12), dc.eval_subclass_probs)
        return train, val, test
    if dc.path:
        full = load_dataset(dc.path, dc.format)
        rng = np.random.default_rng(trial_seed(config.seed, 0, 13))
        order = rng.permutation(full.n)
        cuts = np.round(np.cumsum(dc.fractions)[:2] * full.n).astype(int)
        return tuple(full.subset(np.sort(part)) for part in np.split(order, cuts))
    train = load_dataset(dc.train, dc.format)
    val = load_dataset(dc.val, dc.format, n_classes=train.n_classes)
    test = load_dataset(dc.test, dc.format, n_classes=train.n_classes)
    return train, val, test


# ---------------------------------------------------------------- checkpoint selection

def checkpoint_select(values) -> int:
    """Index of the best value; ties go to the earliest epoch."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("no evaluated epochs")
    if np.all(np.isnan(values)):
        raise ValueError("metric undefined at every epoch")
    return int(np.nanargmax(values))


def metric_value(reports: dict, metric: str) -> float:
    """Scalar checkpoint metric from a split's reports (see ``split_reports``)."""
    if metric == "overall":
        return reports[metrics.CLUSTER].overall
    if metric == "cluster_robust":
        return reports[metrics.CLUSTER].robust
    if metric == "unweighted_cluster_robust":
        return reports[UNWEIGHTED_CLUSTER].robust
    if metric == "robust_true":
        if metrics.TRUE_SUBCLASS not in reports:
            raise ConfigError("robust_true checkpointing needs subclass labels in validation data")
        return reports[metrics.TRUE_SUBCLASS].robust
    raise ConfigError(f"unknown checkpoint metric {metric!r}")


def split_reports(model, dataset, groups, n_groups, oracle: bool) -> dict:
    """MetricReports of one model on one split.

    ``groups`` are the method's own groups on this split (clusters for
    GEORGE); true-subclass metrics are added only when ``oracle`` is set.
    """
    preds = models.predict(model, dataset.features)
    w = dataset.eval_weights
    out = {
        metrics.SUPERCLASS: metrics.grouped_accuracy(preds, dataset, dataset.y, w,
                                                     metrics.SUPERCLASS, dataset.n_classes),
        metrics.CLUSTER: metrics.grouped_accuracy(preds, dataset, groups, w, metrics.CLUSTER,
                                                  n_groups),
        UNWEIGHTED_CLUSTER: metrics.grouped_accuracy(preds, dataset, groups, None,
                                                     UNWEIGHTED_CLUSTER, n_groups),
    }
    if oracle and dataset.has_z:
        with dataset.audit(ORACLE):
            z = dataset.z
        out[metrics.TRUE_SUBCLASS] = metrics.grouped_accuracy(
            preds, dataset, z, w, metrics.TRUE_SUBCLASS, int(z.max()) + 1)
    return out


def _evaluated_epochs(n_epochs: int, every: int):
    return sorted(set(range(every - 1, n_epochs, every)) | {n_epochs - 1})


def select_checkpoint(record: dro.TrainRecord, config: ExperimentConfig, val, val_groups,
                      n_groups) -> int:
    """Evaluate the validation split at the configured cadence and pick an epoch."""
    oracle = config.checkpoint_metric == "robust_true"
    epochs = _evaluated_epochs(len(record.checkpoints), config.eval_every)
    values = []
    for e in epochs:
        reports = split_reports(record.checkpoints[e], val, val_groups, n_groups, oracle)
        record.val_reports.append((e, reports))
        values.append(metric_value(reports, config.checkpoint_metric))
    record.selected_epoch = epochs[checkpoint_select(values)]
    return record.selected_epoch


# ---------------------------------------------------------------- grouping helpers

def random_groups(y, subclass_counts_by_superclass: dict, seed: int) -> np.ndarray:
    """Random groups inside each superclass with sizes proportional to given subclass counts."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    out = np.empty(len(y), dtype=int)
    next_id = 0
    for b in sorted(subclass_counts_by_superclass):
        idx = rng.permutation(np.flatnonzero(y == b))
        counts = np.asarray(subclass_counts_by_superclass[b], dtype=float)
        cuts = np.round(np.cumsum(counts)[:-1] / counts.sum() * len(idx)).astype(int)
        for j, part in enumerate(np.split(idx, cuts)):
            out[part] = next_id + j
        next_id += len(counts)
    return out


def _subclass_counts(dataset) -> dict:
    z = dataset.z
    counts = {}
    for b in range(dataset.n_classes):
        zs = z[dataset.y == b]
        ids, c = np.unique(zs, return_counts=True)
        counts[b] = c.tolist() if len(ids) else [0]
    return counts


def _dense(groups):
    """Relabel group ids to 0..G-1 preserving order."""
    ids, inv = np.unique(groups, return_inverse=True)
    return inv.astype(int), len(ids)


# ---------------------------------------------------------------- one trial

@dataclass
class MethodResult:
    method: str
    model: models.Classifier
    record: dro.TrainRecord
    groups: dict  # split -> group ids
    n_groups: int


@dataclass
class TrialResult:
    trial: int
    rows: list = field(default_factory=list)
    selected: dict = field(default_factory=dict)  # method -> epoch index
    error: Optional[str] = None
    z_reads: dict = field(default_factory=dict)


def _trial_dir(out_dir, trial: int) -> Optional[Path]:
    if out_dir is None:
        return None
    d = Path(out_dir) / f"trial_{trial:03d}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_assignments(path, groups) -> None:
    Path(path).write_text("cluster\n" + "".join(f"{int(g)}\n" for g in groups))


def _read_assignments(path) -> np.ndarray:
    lines = Path(path).read_text().split()
    if not lines or lines[0] != "cluster":
        raise DatasetParseError(f"{path}: expected a 'cluster' header")
    return np.array([int(v) for v in lines[1:]], dtype=int)


def _erm_stage(config, trial, train):
    with train.audit("erm"):
        record = dro.erm_train(train, config.model, config.erm, trial_seed(config.seed, trial, 1))
    return record.final, record


def _cluster_stage(config, trial, train, erm_model):
    cfg = dataclasses.replace(config.cluster, seed=trial_seed(config.seed, trial, 3) % (2**31))
    if config.data.prefeaturized:
        feats, model = train.features, None
    else:
        feats, model = models.featurize(erm_model, train.features), erm_model
    with train.audit("cluster"):
        return cluster.cluster_superclasses(train, feats, cfg, model=model)


def _features(config, erm_model, dataset):
    if config.data.prefeaturized or erm_model is None:
        return dataset.features
    return models.featurize(erm_model, dataset.features)


def _gdro_stage(config, trial, method, train, val, pools, groups, n_groups):
    seed = trial_seed(config.seed, trial, 2)
    with train.audit("gdro"):
        record = dro.gdro_train(train, pools, config.model, config.gdro, config.dro, seed,
                                eval_groups=groups["train"])
    with val.audit("select"):
        select_checkpoint(record, config, val, groups["val"], n_groups)
    return MethodResult(method, record.selected, record, groups, n_groups)


def _george_pools(config, train, clustering, erm_model):
    groups = clustering.assignments
    if config.dro.mode != dro.SOFT:
        return dro.hard_pools(groups, clustering.n_clusters)
    feats = _features(config, erm_model, train)
    est = riskest.fit_superclass_mixtures(train, feats, [p.k for p in clustering.parts],
                                          seed=trial_seed(config.seed, 0, 4) % (2**31))
    return dro.soft_pools(train.y, riskest.estimated_weight_matrix(est, feats, train.y))


def run_method_trial(config: ExperimentConfig, trial: int, method: str, splits,
                     trial_dir=None, stage_cache=None) -> list:
    """Train one method on one trial; returns MethodResults (GEORGE also returns its ERM stage)."""
    train, val, test = splits
    if method == "erm":
        with train.audit("erm"):
            record = dro.erm_train(train, config.model, config.erm, trial_seed(config.seed, trial, 1))
        groups = {s: d.y for s, d in zip(("train", "val", "test"), splits)}
        with val.audit("select"):
            select_checkpoint(record, config, val, groups["val"], train.n_classes)
        return [MethodResult("erm", record.selected, record, groups, train.n_classes)]
    if method == "george":
        cache = stage_cache or {}
        erm_model = cache.get("erm_model")
        if erm_model is None and not config.data.prefeaturized:
            erm_model, _ = _erm_stage(config, trial, train)
        clustering = cache.get("clustering")
        if clustering is None:
            clustering = _cluster_stage(config, trial, train, erm_model)
        if trial_dir is not None:
            if erm_model is not None:
                models.save_checkpoint(erm_model, trial_dir / "erm_stage.ckpt")
            _save_clustering(trial_dir, clustering)
        groups = {"train": clustering.assignments}
        for name, data in (("val", val), ("test", test)):
            with data.audit("assign"):
                groups[name] = cluster.assign(clustering, data, _features(config, erm_model, data))
        pools = _george_pools(config, train, clustering, erm_model)
        out = [_gdro_stage(config, trial, "george", train, val, pools, groups, clustering.n_clusters)]
        if erm_model is not None:
            out.append(MethodResult("george_erm_stage", erm_model, None, groups,
                                    clustering.n_clusters))
        return out
    if method == "superclass_gdro":
        groups = {s: d.y for s, d in zip(("train", "val", "test"), splits)}
        pools = dro.hard_pools(train.y, train.n_classes)
        return [_gdro_stage(config, trial, method, train, val, pools, groups, train.n_classes)]
    if method in ("random_gdro", "subclass_gdro"):
        for name, data in zip(("train", "val", "test"), splits):
            if not data.has_z:
                raise ConfigError(f"{method} needs subclass labels in the {name} split")
        groups = {}
        with train.audit(ORACLE):
            if method == "subclass_gdro":
                for name, data in zip(("train", "val", "test"), splits):
                    with data.audit(ORACLE):
                        groups[name], _ = _dense(data.z)
            else:
                counts = _subclass_counts(train)
                for s, (name, data) in enumerate(zip(("train", "val", "test"), splits)):
                    groups[name] = random_groups(data.y, counts, trial_seed(config.seed, trial, 20 + s))
        n_groups = int(max(g.max() for g in groups.values())) + 1
        pools = dro.hard_pools(groups["train"], n_groups)
        return [_gdro_stage(config, trial, method, train, val, pools, groups, n_groups)]
    raise ConfigError(f"unknown method {method!r}")


def _save_clustering(trial_dir, clustering) -> None:
    (trial_dir / "clustering.json").write_text(json.dumps(clustering.to_dict(), indent=1) + "\n")
    _write_assignments(trial_dir / "clusters_train.csv", clustering.assignments)


def _load_clustering(trial_dir, erm_model):
    doc = json.loads((trial_dir / "clustering.json").read_text())
    groups = _read_assignments(trial_dir / "clusters_train.csv")
    return cluster.clustering_from_dict(doc, groups, erm_model)


def report_rows(result: MethodResult, trial: int, splits) -> list:
    """Flat metric rows for the validation and test splits of a trained method."""
    rows = []
    for name, data in zip(("val", "test"), splits[1:]):
        reports = split_reports(result.model, data, result.groups[name], result.n_groups, True)
        for kind in (metrics.SUPERCLASS, metrics.CLUSTER, UNWEIGHTED_CLUSTER, metrics.TRUE_SUBCLASS):
            if kind in reports:
                rows += [(result.method, trial, name, *r) for r in reports[kind].rows()]
    return rows


def _persist(result: MethodResult, trial_dir) -> None:
    if trial_dir is None or result.method == "george_erm_stage":  # saved as erm_stage.ckpt
        return
    models.save_checkpoint(result.model, trial_dir / f"{result.method}.ckpt")
    if result.record is not None:
        (trial_dir / f"{result.method}_history.csv").write_text(result.record.to_csv())
    if result.method in ("random_gdro", "subclass_gdro", "superclass_gdro", "erm"):
        for split, g in result.groups.items():
            _write_assignments(trial_dir / f"{result.method}_groups_{split}.csv", g)


def _audit_george(splits) -> dict:
    reads = {name: sorted(set(d.z_reads)) for name, d in zip(("train", "val", "test"), splits)}
    for name, stages in reads.items():
        leaked = [s for s in stages if s != ORACLE]
        if leaked:
            raise AssertionError(f"subclass labels of the {name} split read during {leaked}")
    return reads


def load_stage_cache(run_dir, trial: int) -> dict:
    """ERM-stage model and clustering saved by a cluster-only run."""
    tdir = Path(run_dir) / f"trial_{trial:03d}"
    erm_path = tdir / "erm_stage.ckpt"
    erm_model = models.load_checkpoint(erm_path) if erm_path.exists() else None
    return {"erm_model": erm_model, "clustering": _load_clustering(tdir, erm_model)}


def run_cluster_trial(config: ExperimentConfig, trial: int, out_dir=None) -> TrialResult:
    """ERM (unless pre-featurized) and per-superclass clustering only."""
    result = TrialResult(trial)
    trial_dir = _trial_dir(out_dir, trial)
    try:
        train, val, test = make_splits(config, trial)
        erm_model = None if config.data.prefeaturized else _erm_stage(config, trial, train)[0]
        clustering = _cluster_stage(config, trial, train, erm_model)
        if trial_dir is not None:
            if erm_model is not None:
                models.save_checkpoint(erm_model, trial_dir / "erm_stage.ckpt")
            _save_clustering(trial_dir, clustering)
        if train.has_z:
            with train.audit(ORACLE):
                z = train.z
            for a in metrics.cluster_alignment(clustering.assignments, z, train.y):
                result.rows += [("cluster", trial, "train", metrics.TRUE_SUBCLASS, str(a.subclass),
                                 name, getattr(a, name))
                                for name in ("precision", "recall", "prevalence")]
        result.rows.append(("cluster", trial, "train", metrics.CLUSTER, "overall", "n_clusters",
                            float(clustering.n_clusters)))
    except ConfigError:
        raise
    except Exception as exc:  # noqa: BLE001 - recorded per trial
        result.error = f"cluster: {type(exc).__name__}: {exc}"
    if trial_dir is not None:
        (trial_dir / "trial.json").write_text(json.dumps(
            {"trial": trial, "methods": ["cluster"], "selected_epoch": {},
             "error": result.error}, indent=1, sort_keys=True) + "\n")
    return result


def run_trial(config: ExperimentConfig, trial: int, methods, out_dir=None,
              reuse=None) -> TrialResult:
    """All requested methods on one trial's data; a failing method is recorded, not raised.

    ``reuse`` points at a cluster-only run whose ERM stage and clustering
    GEORGE should pick up instead of recomputing them.
    """
    result = TrialResult(trial)
    trial_dir = _trial_dir(out_dir, trial)
    try:
        splits = make_splits(config, trial)
    except Exception as exc:  # any stage failure aborts the trial
        result.error = f"data: {exc}"
        return result
    for method in methods:
        for d in splits:
            d.z_reads.clear()
        try:
            cache = load_stage_cache(reuse, trial) if reuse and method == "george" else None
            outs = run_method_trial(config, trial, method, splits, trial_dir, cache)
            if method == "george":
                result.z_reads = _audit_george(splits)
            for r in outs:
                _persist(r, trial_dir)
                if r.record is not None:
                    result.selected[r.method] = r.record.selected_epoch
                result.rows += report_rows(r, trial, splits)
        except ConfigError:
            raise
        except Exception as exc:  # noqa: BLE001 - recorded per trial
            log.warning("trial %d, %s failed: %s", trial, method, exc)
            result.error = f"{method}: {type(exc).__name__}: {exc}"
            result.rows = [r for r in result.rows if r[0] not in (method, "george_erm_stage")]
            break
    if trial_dir is not None:
        (trial_dir / "trial.json").write_text(json.dumps(
            {"trial": trial, "methods": list(methods), "selected_epoch": result.selected,
             "error": result.error}, indent=1, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------- aggregation and run dirs

def aggregate(rows, trials_completed) -> dict:
    """Mean and 1.96 * sd / sqrt(trials) half-width of every test/val summary metric."""
    out = {}
    keyed = {}
    for method, trial, split, kind, group, metric, value in rows:
        if group in ("overall", "robust"):
            keyed.setdefault((method, split, kind, group), {})[trial] = value
    for (method, split, kind, group), by_trial in sorted(keyed.items()):
        vals = [by_trial[t] for t in trials_completed if t in by_trial]
        mean, half = metrics.ci95(vals)
        entry = {"mean": mean, "ci95": half, "lower": mean - half, "upper": mean + half,
                 "n": len(vals), "values": vals}
        out.setdefault(method, {}).setdefault(split, {}).setdefault(kind, {})[group] = entry
    return out


def metrics_csv(rows) -> str:
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        *head, value = row
        lines.append(",".join(str(v) for v in head) + "," + repr(float(value)))
    return "\n".join(lines) + "\n"


def summary_json(config, results) -> str:
    done = [r.trial for r in results if r.error is None]
    rows = [row for r in results for row in r.rows]
    doc = {
        "name": config.name,
        "seed": config.seed,
        "trials": config.trials,
        "completed_trials": done,
        "failed_trials": [{"trial": r.trial, "error": r.error} for r in results if r.error],
        "selected_epoch": {str(r.trial): r.selected for r in results},
        "checkpoint_metric": config.checkpoint_metric,
        "metrics": aggregate(rows, [r.trial for r in results]),
    }
    return json.dumps(_strip_nan(doc), indent=1, sort_keys=True) + "\n"


def _strip_nan(obj):
    if isinstance(obj, dict):
        return {k: _strip_nan(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_strip_nan(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


@dataclass
class RunReport:
    out_dir: Optional[Path]
    results: list
    metrics_csv: str
    summary: dict

    def value(self, method, split, kind, group="robust"):
        return self.summary["metrics"][method][split][kind][group]

    def rows(self):
        return [row for r in self.results for row in r.rows]


def _worker(args):
    config, trial, methods, out_dir, reuse = args
    if methods == ("cluster",):
        return run_cluster_trial(config, trial, out_dir)
    return run_trial(config, trial, methods, out_dir, reuse)


def run_experiment(config: ExperimentConfig, methods, out_dir=None, reuse=None) -> RunReport:
    """Run methods over all trials, optionally in parallel; aggregate in trial order.

    ``methods == ["cluster"]`` runs only the ERM and clustering stages.
    """
    for m in methods:
        if m not in METHODS and list(methods) != ["cluster"]:
            raise ConfigError(f"unknown method {m!r}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.echo").write_text(dump_config(config))
        (out_dir / "methods.json").write_text(json.dumps(list(methods)) + "\n")
    jobs = [(config, t, tuple(methods), out_dir, reuse) for t in range(config.trials)]
    if config.workers > 1 and config.trials > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_worker, jobs))
    else:
        results = [_worker(j) for j in jobs]
    return _finish(config, results, out_dir)


def _finish(config, results, out_dir) -> RunReport:
    rows = [row for r in results for row in r.rows]
    csv_text = metrics_csv(rows)
    summary_text = summary_json(config, results)
    if out_dir is not None:
        (out_dir / "metrics.csv").write_text(csv_text)
        (out_dir / "summary.json").write_text(summary_text)
    return RunReport(out_dir, results, csv_text, json.loads(summary_text))


def run_george(config: ExperimentConfig, out_dir=None) -> RunReport:
    return run_experiment(config, ["george"], out_dir)


def run_baselines(config: ExperimentConfig, kinds=BASELINES, out_dir=None) -> RunReport:
    if isinstance(kinds, str):
        kinds = [kinds]
    for k in kinds:
        if k not in BASELINES:
            raise ConfigError(f"unknown baseline {k!r}")
    return run_experiment(config, list(kinds), out_dir)


def evaluate_run(run_dir, out_dir=None) -> RunReport:
    """Recompute the reports of a saved run from its checkpoints and clustering artifacts."""
    run_dir = Path(run_dir)
    config = load_config(run_dir / "config.echo")
    methods = json.loads((run_dir / "methods.json").read_text())
    results = []
    for t in range(config.trials):
        tdir = run_dir / f"trial_{t:03d}"
        meta = json.loads((tdir / "trial.json").read_text())
        result = TrialResult(t, selected=meta["selected_epoch"], error=meta["error"])
        if meta["error"] is None:
            if methods == ["cluster"]:
                raise ConfigError("cluster-only runs have no trained models to evaluate")
            splits = make_splits(config, t)
            for method in methods:
                result.rows += _reload_rows(config, t, method, tdir, splits)
        results.append(result)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    return _finish(config, results, out_dir)


def _reload_rows(config, trial, method, tdir, splits) -> list:
    train, val, test = splits
    model = models.load_checkpoint(tdir / f"{method}.ckpt")
    if method == "george":
        erm_path = tdir / "erm_stage.ckpt"
        erm_model = models.load_checkpoint(erm_path) if erm_path.exists() else None
        clustering = _load_clustering(tdir, erm_model)
        groups = {"train": clustering.assignments}
        for name, data in (("val", val), ("test", test)):
            groups[name] = cluster.assign(clustering, data, _features(config, erm_model, data))
        out = [MethodResult("george", model, None, groups, clustering.n_clusters)]
        if erm_model is not None:
            out.append(MethodResult("george_erm_stage", erm_model, None, groups,
                                    clustering.n_clusters))
    else:
        groups = {s: _read_assignments(tdir / f"{method}_groups_{s}.csv")
                  for s in ("train", "val", "test")}
        n_groups = int(max(g.max() for g in groups.values())) + 1
        out = [MethodResult(method, model, None, groups, n_groups)]
    rows = []
    for r in out:
        rows += report_rows(r, trial, splits)
    return rows


# ---------------------------------------------------------------- synthetic experiments

ERM_LIMIT_DIRECTION = np.array([1.0, 1.0]) / np.sqrt(2.0)
GDRO_LIMIT_DIRECTION = np.array([-1.0, 4.0]) / np.sqrt(17.0)


def angle_deg(u, v) -> float:
    u, v = np.asarray(u, float), np.asarray(v, float)
    c = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass
class SweepRow:
    alpha: float
    trial: int
    erm_robust: float
    gdro_robust: float
    erm_angle: float
    gdro_angle: float
    seconds: float


def example1_sweep(alphas, n: int = 10000, trials: int = 1, seed: int = 0,
                   erm_spec: LossSpec | None = None, gdro_spec: LossSpec | None = None,
                   dro_cfg: dro.DroConfig | None = None) -> list:
    """ERM versus true-subclass GDRO on the four-Gaussian toy over a grid of alpha.

    Test robust accuracy is measured on an independent draw of n points.
    Angles are between each model's decision normal and the limiting
    directions (1, 1) for ERM and (-1, 4) for GDRO.
    """
    erm_spec = erm_spec or _default_erm()
    gdro_spec = gdro_spec or _default_gdro()
    dro_cfg = dro_cfg or dro.DroConfig()
    rows = []
    for alpha in alphas:
        spec = synthgen.example1_spec(float(alpha))
        for t in range(trials):
            start = time.perf_counter()
            train = synthgen.sample_dataset(spec, n, trial_seed(seed, t, 10))
            test = synthgen.sample_dataset(spec, n, trial_seed(seed, t, 12))
            erm = dro.erm_train(train, ModelConfig(), erm_spec, trial_seed(seed, t, 1)).final
            pools = dro.hard_pools(train.z, spec.n_subclasses)
            gdro = dro.gdro_train(train, pools, ModelConfig(), gdro_spec, dro_cfg,
                                  trial_seed(seed, t, 2)).final

            def robust(m):
                return metrics.grouped_accuracy(models.predict(m, test.features), test, test.z,
                                                group_kind=metrics.TRUE_SUBCLASS,
                                                n_groups=spec.n_subclasses).robust

            rows.append(SweepRow(float(alpha), t, robust(erm), robust(gdro),
                                 angle_deg(erm.binary_direction()[0], ERM_LIMIT_DIRECTION),
                                 angle_deg(gdro.binary_direction()[0], GDRO_LIMIT_DIRECTION),
                                 time.perf_counter() - start))
    return rows


def sweep_table(rows) -> str:
    lines = ["alpha,trial,erm_robust_acc,gdro_robust_acc,erm_angle_deg,gdro_angle_deg"]
    for r in rows:
        lines.append(f"{r.alpha!r},{r.trial},{r.erm_robust!r},{r.gdro_robust!r},"
                     f"{r.erm_angle!r},{r.gdro_angle!r}")
    return "\n".join(lines) + "\n"
