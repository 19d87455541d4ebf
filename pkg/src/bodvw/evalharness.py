"""Experimental protocol: stratified splits, repeated runs, metrics, ablations, reports."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .cnn_adapter import CachedFeatureSource, FeatureExtractor, layer_name, parse_layer
from .codebook import KMeansConfig, train_codebook
from .deepfeatures import EPS, unroll
from .encoder import VARIANTS, encode_counts, normalize_features
from .errors import BodvwError, ConfigError, TrainingError
from .imageio import CHANNEL_MEANS_BGR, PREPROCESS_TAG, RESIZE_FILTER, DatasetManifest, load_manifest
from .svm import DEFAULT_C_GRID, DEFAULT_GAMMA, DEFAULT_TOL, STD_FLOOR, GridSearchSpec, grid_search_C

REPORT_SCHEMA_VERSION = 1
CLUSTER_GRID = tuple(range(100, 501, 50))
EXECUTION_KEYS = ("workers",)


class PipelineError(BodvwError, RuntimeError):
    """A run failed; ``report`` holds whatever finished before the failure."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: str = ""
    model: str = ""
    cache_dir: str = ""
    variant: str = "bodvw"
    layer: int = 4
    k: int = 400
    runs: int = 5
    split_ratio: float = 0.7
    base_seed: int = 0
    kmeans_max_iterations: int = 300
    kmeans_rel_tolerance: float = 1e-4
    kmeans_restarts: int = 3
    kmeans_refine_rounds: int = 10
    gamma: float = DEFAULT_GAMMA
    c_grid: tuple = DEFAULT_C_GRID
    folds: int = 5
    svm_tol: float = DEFAULT_TOL
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "c_grid", tuple(self.c_grid))
        try:
            object.__setattr__(self, "layer", parse_layer(self.layer))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if not 0 < self.split_ratio < 1:
            raise ConfigError("split_ratio must lie strictly between 0 and 1")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")

    def run_seed(self, run: int) -> int:
        return self.base_seed + run

    def kmeans_config(self, run: int) -> KMeansConfig:
        return KMeansConfig(k=self.k, max_iterations=self.kmeans_max_iterations,
                            rel_tolerance=self.kmeans_rel_tolerance, n_restarts=self.kmeans_restarts,
                            refine_rounds=self.kmeans_refine_rounds, seed=self.run_seed(run))

    def grid_spec(self, run: int) -> GridSearchSpec:
        return GridSearchSpec(C_grid=self.c_grid, folds=self.folds, fold_seed=self.run_seed(run))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["c_grid"] = list(self.c_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def design_record() -> dict:
    """Fixed choices the pipeline makes where the method leaves room."""
    return {
        "preprocessing": PREPROCESS_TAG,
        "resize_filter": RESIZE_FILTER,
        "channel_means_bgr": list(CHANNEL_MEANS_BGR),
        "epsilon": EPS,
        "kmeans_init": "k-means++ (single candidate), best-of-restarts by inertia",
        "kmeans_empty_cluster": "reseed to farthest point, lowest index on ties",
        "kmeans_stop": "relative inertia decrease <= rel_tolerance or max_iterations",
        "kmeans_refine": "single-point transfer rounds after Lloyd while the gain exceeds rel_tolerance",
        "codebook_per_run": "retrained on each run's training split",
        "split_rounding": "round half up per category, clamped to [1, n-1]",
        "svm_features": "encoder-normalized histograms, z-scored on the training split",
        "svm_std_floor": STD_FLOOR,
        "svm_multiclass": "one-vs-one, majority vote, ties by summed margin then lowest class index",
        "svm_solver": "SMO, maximal violating pair",
        "c_selection": "stratified k-fold mean accuracy, ties to smallest C, refit on full train split",
    }


# -- splits and metrics ---------------------------------------------------------

def stratified_split(manifest: DatasetManifest, ratio: float, seed: int):
    """Per category, round(ratio * n) (half up) images to train, the rest to test."""
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    labels = manifest.labels
    train_idx = []
    for c, name in enumerate(manifest.categories):
        members = np.flatnonzero(labels == c)
        n = members.size
        if n < 2:
            raise TrainingError(f"category {name!r} has {n} image(s); need at least 2 to split")
        n_train = min(max(int(math.floor(ratio * n + 0.5)), 1), n - 1)
        train_idx.extend(rng.permutation(members)[:n_train].tolist())
    train_set = set(train_idx)
    test_idx = [i for i in range(len(manifest)) if i not in train_set]
    return (manifest.subset(sorted(train_idx), f"{manifest.name}:train"),
            manifest.subset(test_idx, f"{manifest.name}:test"))


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def metrics(cm) -> dict:
    """Per-class precision, recall and F1 (fractions); 0/0 counts as 0."""
    cm = np.asarray(cm, dtype=np.float64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * (recall * precision) / (recall + precision), 0.0)
    return {"precision": precision, "recall": recall, "f1": f1}


# -- reports --------------------------------------------------------------------

@dataclass
class EvalReport:
    config: dict
    classes: list
    runs: list = field(default_factory=list)
    mean_accuracy: float = float("nan")
    std_accuracy: float = float("nan")
    per_class_mean: dict = field(default_factory=dict)
    complete: bool = True
    error: str | None = None
    design: dict = field(default_factory=design_record)
    dataset: str = ""
    tool_version: str = __version__
    schema_version: int = REPORT_SCHEMA_VERSION
    timings: dict = field(default_factory=dict)

    @property
    def accuracies(self) -> list:
        return [r["accuracy"] for r in self.runs]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalReport:
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(**d)

    def deterministic_dict(self) -> dict:
        """Everything except wall-clock timings and the worker count.

        Both describe how the experiment was executed, not what it computed.
        """
        d = self.to_dict()
        d.pop("timings")
        d["config"] = {k: v for k, v in d["config"].items() if k not in EXECUTION_KEYS}
        return d

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(self.deterministic_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _summarize(report: EvalReport):
    accs = report.accuracies
    if accs:
        report.mean_accuracy = math.fsum(accs) / len(accs)
        report.std_accuracy = float(np.std(accs))
    per_class = {}
    for ci, name in enumerate(report.classes):
        per_class[name] = {
            key: math.fsum(r["per_class"][key][ci] for r in report.runs) / len(report.runs)
            for key in ("precision", "recall", "f1")
        } if report.runs else {}
    report.per_class_mean = per_class


# -- one run --------------------------------------------------------------------

class _Memo:
    """Per-process memo of feature maps so repeated runs skip the source."""

    def __init__(self, source):
        self.source = source
        self.maps = {}

    def __call__(self, path, layer):
        key = (path, layer)
        if key not in self.maps:
            self.maps[key] = self.source(path, layer)
        return self.maps[key]


def _deep_features(source, paths, cfg):
    out = []
    for p in paths:
        fmap = source(p, cfg.layer)
        out.append(normalize_features(unroll(fmap), cfg.variant))
    return out


def _run_once(cfg: ExperimentConfig, manifest: DatasetManifest, source, run: int):
    timings = {}
    seed = cfg.run_seed(run)
    _, finalize = VARIANTS[cfg.variant]

    t = time.perf_counter()
    train, test = stratified_split(manifest, cfg.split_ratio, seed)
    train_paths, test_paths = set(train.paths), set(test.paths)
    if train_paths & test_paths:
        raise PipelineError("train/test overlap")
    timings["split"] = time.perf_counter() - t

    t = time.perf_counter()
    train_sets = _deep_features(source, train.paths, cfg)
    test_sets = _deep_features(source, test.paths, cfg)
    timings["features"] = time.perf_counter() - t

    # codebook, standardizer and C search must only ever see training images
    seen = {s.provenance for s in train_sets}
    if not seen <= train_paths or seen & test_paths:
        raise PipelineError(f"run {run}: codebook input is not confined to the training split")

    t = time.perf_counter()
    book = train_codebook(train_sets, cfg.kmeans_config(run), layer=cfg.layer)
    timings["codebook"] = time.perf_counter() - t

    t = time.perf_counter()
    Xtr = np.stack([finalize(encode_counts(s, book)).weights for s in train_sets])
    Xte = np.stack([finalize(encode_counts(s, book)).weights for s in test_sets])
    timings["encode"] = time.perf_counter() - t

    t = time.perf_counter()
    best_C, cv_table, model = grid_search_C(Xtr, train.labels.tolist(), cfg.grid_spec(run), cfg.gamma,
                                            cfg.svm_tol)
    timings["svm"] = time.perf_counter() - t

    pred = np.asarray(model.predict(Xte), dtype=np.int64)
    cm = confusion_matrix(test.labels, pred, len(manifest.categories))
    m = metrics(cm)
    record = {
        "run": run,
        "seed": seed,
        "n_train": len(train),
        "n_test": len(test),
        "accuracy": 100.0 * float(np.trace(cm)) / float(cm.sum()),
        "confusion_matrix": cm.tolist(),
        "per_class": {key: (100.0 * m[key]).tolist() for key in ("precision", "recall", "f1")},
        "best_C": best_C,
        "cv_table": cv_table,
        "codebook": {"k": book.k, "inertia": book.inertia, "iterations": book.iterations_run,
                     "hash": book.hash},
        "train_only_fit": True,
    }
    return record, timings


def _run_job(args):
    cfg, manifest, source, run = args
    return _run_once(cfg, manifest, source, run)


def default_feature_source(cfg: ExperimentConfig, manifest: DatasetManifest):
    if not cfg.model:
        raise ConfigError("no model path configured and no feature source given")
    extractor = FeatureExtractor(cfg.model)
    return CachedFeatureSource(extractor, cfg.cache_dir or None, resolve=manifest.resolve)


def run_experiment(cfg: ExperimentConfig, features=None, manifest: DatasetManifest | None = None) -> EvalReport:
    """Run ``cfg.runs`` independent split/codebook/SVM cycles and aggregate them.

    ``features`` is any callable ``(image_path, layer) -> FeatureMap``; by
    default the ONNX model at ``cfg.model`` is used through the feature cache.
    """
    if manifest is None:
        if not cfg.manifest:
            raise ConfigError("no manifest configured")
        manifest = load_manifest(cfg.manifest)
    if features is None:
        features = default_feature_source(cfg, manifest)
    source = _Memo(features)

    report = EvalReport(config=cfg.to_dict(), classes=list(manifest.categories), dataset=manifest.name)
    run_timings = []
    started = time.perf_counter()
    try:
        if cfg.workers > 1 and cfg.runs > 1:
            jobs = [(cfg, manifest, features, r) for r in range(cfg.runs)]
            with ProcessPoolExecutor(max_workers=min(cfg.workers, cfg.runs)) as pool:
                for record, timings in pool.map(_run_job, jobs):
                    report.runs.append(record)
                    run_timings.append(timings)
        else:
            for r in range(cfg.runs):
                record, timings = _run_once(cfg, manifest, source, r)
                report.runs.append(record)
                run_timings.append(timings)
    except Exception as exc:
        report.complete = False
        report.error = f"{type(exc).__name__}: {exc}"
        _summarize(report)
        report.timings = {"runs": run_timings, "total": time.perf_counter() - started}
        raise PipelineError(f"experiment failed after {len(report.runs)} run(s): {exc}", report) from exc

    _summarize(report)
    report.timings = {"runs": run_timings, "total": time.perf_counter() - started}
    return report


# -- ablations ------------------------------------------------------------------

@dataclass
class AblationTable:
    axis: str
    rows: list  # [{"value", "mean_accuracy", "std_accuracy", "accuracies"}]
    config: dict
    tool_version: str = __version__

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def best(self):
        return max(self.rows, key=lambda r: r["mean_accuracy"])["value"]


def _ablate(cfg, axis, values, features, manifest):
    if manifest is None:
        manifest = load_manifest(cfg.manifest)
    if features is None:
        features = default_feature_source(cfg, manifest)
    memo = _Memo(features)
    rows = []
    for v in values:
        sub = dataclasses.replace(cfg, **{axis: v})
        rep = run_experiment(sub, memo, manifest)
        label = layer_name(v) if axis == "layer" else v
        rows.append({"value": label, "mean_accuracy": rep.mean_accuracy, "std_accuracy": rep.std_accuracy,
                     "accuracies": rep.accuracies})
    return AblationTable(axis, rows, cfg.to_dict())


def ablate_layers(cfg: ExperimentConfig, features=None, manifest=None, layers=(1, 2, 3, 4, 5)) -> AblationTable:
    """Mean accuracy for each pooling layer, everything else fixed."""
    return _ablate(cfg, "layer", layers, features, manifest)


def ablate_clusters(cfg: ExperimentConfig, features=None, manifest=None, ks=CLUSTER_GRID) -> AblationTable:
    """Mean accuracy for each codebook size (100..500 step 50 by default)."""
    return _ablate(cfg, "k", ks, features, manifest)


# -- export ---------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.2f}"


def report_markdown(report: EvalReport) -> str:
    cfg = report.config
    lines = [
        f"# {report.dataset or 'dataset'}: {cfg['variant']} at {layer_name(cfg['layer'])}, k={cfg['k']}",
        "",
        f"Status: {'complete' if report.complete else 'INCOMPLETE: ' + str(report.error)}",
        "",
        f"## Accuracy over {len(report.runs)} run(s)",
        "",
        "| Run | Seed | Train | Test | Best C | Accuracy (%) |",
        "|---|---|---|---|---|---|",
    ]
    for r in report.runs:
        lines.append(f"| {r['run']} | {r['seed']} | {r['n_train']} | {r['n_test']} | {r['best_C']} "
                     f"| {_fmt(r['accuracy'])} |")
    lines += [f"| **Mean** | | | | | **{_fmt(report.mean_accuracy)}** |", "",
              "## Per-class metrics (mean over runs)", "",
              "| Class | Precision (%) | Recall (%) | F1-score (%) |", "|---|---|---|---|"]
    for name in report.classes:
        m = report.per_class_mean.get(name, {})
        if m:
            lines.append(f"| {name} | {_fmt(m['precision'])} | {_fmt(m['recall'])} | {_fmt(m['f1'])} |")
    lines += ["", "## Confusion matrices (rows: true, columns: predicted)", ""]
    for r in report.runs:
        lines.append(f"Run {r['run']}:")
        lines.append("")
        lines.append("| | " + " | ".join(report.classes) + " |")
        lines.append("|---" * (len(report.classes) + 1) + "|")
        for name, row in zip(report.classes, r["confusion_matrix"]):
            lines.append(f"| {name} | " + " | ".join(str(v) for v in row) + " |")
        lines.append("")
    lines += ["## Configuration", "", "```json", json.dumps(report.config, indent=2, sort_keys=True), "```", "",
              "## Fixed design choices", "", "```json", json.dumps(report.design, indent=2, sort_keys=True),
              "```", "", f"Tool version {report.tool_version}, report schema {report.schema_version}.", ""]
    return "\n".join(lines)


def ablation_markdown(table: AblationTable) -> str:
    head = "Pooling layer" if table.axis == "layer" else "Clusters (k)"
    lines = [f"# Ablation over {table.axis}", "", f"| {head} | Mean accuracy (%) | Std | Runs |",
             "|---|---|---|---|"]
    for r in table.rows:
        lines.append(f"| {r['value']} | {_fmt(r['mean_accuracy'])} | {_fmt(r['std_accuracy'])} "
                     f"| {len(r['accuracies'])} |")
    lines += ["", "```json", json.dumps(table.config, indent=2, sort_keys=True), "```", ""]
    return "\n".join(lines)


def _write(path, text):
    path = Path(path)
    try:
        if path.parent and not path.parent.exists():
            path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def export_report(report, path, format: str = "json") -> None:
    """Write an :class:`EvalReport` or :class:`AblationTable` as JSON or markdown."""
    if format == "json":
        _write(path, json.dumps(report.to_dict(), indent=2, sort_keys=True))
    elif format == "markdown":
        render = report_markdown if isinstance(report, EvalReport) else ablation_markdown
        _write(path, render(report))
    else:
        raise ValueError(f"unknown report format {format!r}")


def load_report(path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
