"""Command-line entry point: ``bodvw <subcommand> ...``.

Exit codes: 0 success, 2 usage/config/compatibility, 3 pipeline failure,
4 some items of a batch failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from . import __version__
from .cnn_adapter import CachedFeatureSource, FeatureExtractor, layer_name, parse_layer
from .codebook import load_codebook, save_codebook, train_codebook
from .deepfeatures import unroll
from .encoder import VARIANTS, encode_counts, normalize_features, read_features_csv, write_features_csv
from .errors import BodvwError, CompatibilityError, ConfigError, ImageDecodeError, ManifestError, ModelError
from .evalharness import (
    ExperimentConfig,
    PipelineError,
    ablate_clusters,
    ablate_layers,
    cpu_count,
    export_report,
    run_experiment,
)
from .imageio import load_and_preprocess, load_manifest
from .svm import GridSearchSpec, grid_search_C, load_model, save_model

log = logging.getLogger("bodvw")

CONFIG_SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_PIPELINE, EXIT_PARTIAL = 0, 2, 3, 4
_EXTRA_KEYS = {"out", "out_dir", "codebook", "svm_model", "features"}
_NORM_FOR_VARIANT = {"bodvw": "l2_per_vector", "dcf_bovw": "l1_per_vector"}


def _load_toml(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except (OSError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    version = data.pop("schema_version", None)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {CONFIG_SCHEMA_VERSION}, got {version!r}")
    return data


def resolve_config(args) -> tuple[ExperimentConfig, dict]:
    """Defaults < config file < flags.  Returns the experiment config and extras."""
    values = {}
    if getattr(args, "config", None):
        values.update(_load_toml(args.config))
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = set(values) - fields - _EXTRA_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in fields | _EXTRA_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    if getattr(args, "seed", None) is not None:
        values["base_seed"] = args.seed
    values.setdefault("workers", cpu_count())
    extras = {k: values.pop(k) for k in list(values) if k in _EXTRA_KEYS}
    try:
        cfg = ExperimentConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, extras


def _provenance(cfg: ExperimentConfig, extras: dict, command: str) -> dict:
    return {"command": command, "tool_version": __version__, "config": cfg.to_dict(), **extras}


def _require(value, name):
    if not value:
        raise ConfigError(f"--{name.replace('_', '-')} is required")
    return value


def _extractor(cfg: ExperimentConfig) -> FeatureExtractor:
    return FeatureExtractor(_require(cfg.model, "model"))


# -- subcommands ----------------------------------------------------------------

def _extract_job(job):
    source, path, layer = job
    try:
        if source.is_fresh(path, layer):
            return path, "skipped", None
        source(path, layer)
        return path, "extracted", None
    except (ImageDecodeError, OSError) as exc:
        return path, "failed", str(exc)


def cmd_extract(args) -> int:
    cfg, _ = resolve_config(args)
    if not cfg.cache_dir:
        raise ConfigError("--cache-dir is required for extract")
    manifest = load_manifest(_require(cfg.manifest, "manifest"))
    extractor = _extractor(cfg)
    if cfg.layer not in extractor.available_layers:
        raise ModelError(f"model exposes no tensor for {layer_name(cfg.layer)}")
    source = CachedFeatureSource(extractor, cfg.cache_dir, resolve=manifest.resolve)
    jobs = [(source, p, cfg.layer) for p in manifest.paths]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_extract_job, jobs, chunksize=8))
    else:
        results = [_extract_job(j) for j in jobs]
    counts = {"extracted": 0, "skipped": 0, "failed": 0}
    for path, status, err in results:
        counts[status] += 1
        if err:
            log.error("%s: %s", path, err)
    print(f"extracted={counts['extracted']} skipped={counts['skipped']} failed={counts['failed']} "
          f"total={len(results)} layer={layer_name(cfg.layer)}")
    return EXIT_USAGE if counts["failed"] else EXIT_OK


def _manifest_features(cfg, manifest, source):
    out = []
    for p in manifest.paths:
        out.append(normalize_features(unroll(source(p, cfg.layer)), cfg.variant))
    return out


def cmd_build_codebook(args) -> int:
    cfg, extras = resolve_config(args)
    out = _require(extras.get("out"), "out")
    manifest = load_manifest(_require(cfg.manifest, "manifest"))
    source = CachedFeatureSource(_extractor(cfg), cfg.cache_dir or None, resolve=manifest.resolve)
    features = _manifest_features(cfg, manifest, source)
    kcfg = cfg.kmeans_config(0)
    book = train_codebook(features, kcfg, layer=cfg.layer,
                          meta=_provenance(cfg, extras, "build-codebook") | {"variant": cfg.variant})
    save_codebook(book, out)
    print(f"codebook k={book.k} dim={book.dim} layer={layer_name(book.layer)} inertia={book.inertia:.6g} "
          f"iterations={book.iterations_run} hash={book.hash} -> {out}")
    return EXIT_OK


def _check_variant(book, variant):
    if book.norm_tag != _NORM_FOR_VARIANT[variant]:
        raise CompatibilityError(f"codebook was trained on {book.norm_tag} features, variant {variant} "
                                 f"needs {_NORM_FOR_VARIANT[variant]}")


def cmd_encode(args) -> int:
    cfg, extras = resolve_config(args)
    out = _require(extras.get("out"), "out")
    book = load_codebook(_require(extras.get("codebook"), "codebook"))
    _check_variant(book, cfg.variant)
    if getattr(args, "layer", None) is not None and cfg.layer != book.layer:
        raise CompatibilityError(f"codebook is for {layer_name(book.layer)}, not {layer_name(cfg.layer)}")
    cfg = dataclasses.replace(cfg, layer=book.layer)
    manifest = load_manifest(_require(cfg.manifest, "manifest"))
    source = CachedFeatureSource(_extractor(cfg), cfg.cache_dir or None, resolve=manifest.resolve)
    _, finalize = VARIANTS[cfg.variant]
    rows = []
    for p, label in manifest.entries:
        feats = normalize_features(unroll(source(p, book.layer)), cfg.variant)
        rows.append((p, manifest.categories[label], finalize(encode_counts(feats, book)).weights))
    meta = _provenance(cfg, extras, "encode") | {
        "codebook_hash": book.hash, "layer": book.layer, "variant": cfg.variant,
        "categories": list(manifest.categories)}
    write_features_csv(out, rows, meta)
    print(f"encoded {len(rows)} images into {book.k}-bin {cfg.variant} histograms -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, extras = resolve_config(args)
    out = _require(extras.get("out"), "out")
    _, labels, X, meta = read_features_csv(_require(extras.get("features"), "features"))
    if meta.get("variant") and meta["variant"] != cfg.variant and getattr(args, "variant", None):
        raise CompatibilityError(f"features were encoded as {meta['variant']}, not {cfg.variant}")
    spec = GridSearchSpec(C_grid=cfg.c_grid, folds=cfg.folds, fold_seed=cfg.base_seed)
    best_C, table, model = grid_search_C(X, labels, spec, cfg.gamma, cfg.svm_tol)
    model.meta = _provenance(cfg, extras, "train") | {
        "codebook_hash": meta.get("codebook_hash"), "layer": meta.get("layer"),
        "variant": meta.get("variant", cfg.variant), "cv_table": table}
    save_model(model, out)
    for row in table:
        print(f"C={row['C']:<4} cv_accuracy={100 * row['mean_accuracy']:.2f}%")
    print(f"best C={best_C}; model with {len(model.pairs)} pair classifier(s) -> {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.svm_model)
    book = load_codebook(args.codebook)
    want = model.meta.get("codebook_hash")
    if want and want != book.hash:
        raise CompatibilityError(f"SVM model expects codebook {want}, got {book.hash}")
    if model.meta.get("layer") is not None and parse_layer(model.meta["layer"]) != book.layer:
        raise CompatibilityError("SVM model and codebook disagree on the pooling layer")
    if args.layer is not None and parse_layer(args.layer) != book.layer:
        raise CompatibilityError(f"codebook is for {layer_name(book.layer)}, model tap requested "
                                 f"{layer_name(args.layer)}")
    variant = model.meta.get("variant") or "bodvw"
    _check_variant(book, variant)
    if not args.images:
        return EXIT_OK
    extractor = FeatureExtractor(_require(args.model, "model"))
    _, finalize = VARIANTS[variant]
    failed = 0
    for path in args.images:
        try:
            fmap = extractor.extract(load_and_preprocess(path), book.layer)
        except (ImageDecodeError, OSError) as exc:
            failed += 1
            log.error("%s: %s", path, exc)
            print(f"{path},ERROR")
            continue
        feats = normalize_features(unroll(fmap), variant)
        hist = finalize(encode_counts(feats, book, expected_hash=want or None))
        print(f"{path},{model.predict(hist.weights[None, :])[0]}")
    return EXIT_PARTIAL if failed else EXIT_OK


def _write_outputs(obj, out_dir: Path, stem: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    export_report(obj, out_dir / f"{stem}.json", "json")
    export_report(obj, out_dir / f"{stem}.md", "markdown")
    return out_dir / f"{stem}.json"


def cmd_evaluate(args) -> int:
    cfg, extras = resolve_config(args)
    out_dir = Path(extras.get("out_dir") or ".")
    stem = f"evaluate_{cfg.variant}_{layer_name(cfg.layer)}_k{cfg.k}"
    _require(cfg.manifest, "manifest")
    _require(cfg.model, "model")
    try:
        report = run_experiment(cfg)
    except PipelineError as exc:
        if exc.report is not None:
            _write_outputs(exc.report, out_dir, stem)
        raise
    path = _write_outputs(report, out_dir, stem)
    accs = ", ".join(f"{a:.2f}" for a in report.accuracies)
    print(f"{cfg.variant} {layer_name(cfg.layer)} k={cfg.k}: mean accuracy {report.mean_accuracy:.2f}% "
          f"over {len(report.runs)} run(s) [{accs}] -> {path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, extras = resolve_config(args)
    out_dir = Path(extras.get("out_dir") or ".")
    _require(cfg.manifest, "manifest")
    _require(cfg.model, "model")
    table = ablate_layers(cfg) if args.axis == "layers" else ablate_clusters(cfg)
    path = _write_outputs(table, out_dir, f"ablation_{args.axis}_{cfg.variant}")
    for row in table.rows:
        print(f"{row['value']}\t{row['mean_accuracy']:.2f}")
    print(f"best {table.axis}: {table.best} -> {path}")
    return EXIT_OK


# -- parser -----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="TOML config file (flat keys, schema_version = 1)")
    p.add_argument("--seed", type=int, help="base RNG seed (run r uses seed + r)")
    p.add_argument("--workers", type=int, help="parallel worker processes (default: available cores)")
    p.add_argument("--cache-dir", dest="cache_dir", help="feature-map cache directory")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _pipeline_flags(p: argparse.ArgumentParser, layer=True):
    p.add_argument("--manifest", help="CSV manifest with header path,label")
    p.add_argument("--model", help="VGG16 ONNX file")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    if layer:
        p.add_argument("--layer", type=parse_layer, help="pooling layer 1..5 (p_4 default)")
    p.add_argument("--k", type=int, help="codebook size")
    p.add_argument("--kmeans-restarts", dest="kmeans_restarts", type=int)
    p.add_argument("--kmeans-max-iterations", dest="kmeans_max_iterations", type=int)
    p.add_argument("--kmeans-rel-tolerance", dest="kmeans_rel_tolerance", type=float)
    p.add_argument("--kmeans-refine-rounds", dest="kmeans_refine_rounds", type=int,
                   help="single-point transfer rounds after Lloyd (0 = plain Lloyd)")


def _svm_flags(p: argparse.ArgumentParser):
    p.add_argument("--gamma", type=float, help="RBF gamma (default 1e-05)")
    p.add_argument("--folds", type=int, help="cross-validation folds for the C search")
    p.add_argument("--c-grid", dest="c_grid", type=lambda s: tuple(float(v) if "." in v else int(v)
                                                                   for v in s.split(",")),
                   help="comma-separated C candidates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bodvw", description="Bag of Deep Visual Words pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="cache pooling-layer feature maps for a manifest")
    _common(p)
    p.add_argument("--manifest")
    p.add_argument("--model")
    p.add_argument("--layer", type=parse_layer)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("build-codebook", help="k-means codebook over a (training) manifest")
    _common(p)
    _pipeline_flags(p)
    p.add_argument("--out", required=False, help="codebook file to write")
    p.set_defaults(func=cmd_build_codebook)

    p = sub.add_parser("encode", help="write BoVW histograms for a manifest as CSV")
    _common(p)
    _pipeline_flags(p)
    p.add_argument("--codebook")
    p.add_argument("--out", help="features CSV to write")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="grid-search C and train the SVM on a features CSV")
    _common(p)
    p.add_argument("--features")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    _svm_flags(p)
    p.add_argument("--out", help="SVM model JSON to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="classify images; prints path,label per line")
    _common(p)
    p.add_argument("--svm-model", dest="svm_model", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--model", help="VGG16 ONNX file")
    p.add_argument("--layer", type=parse_layer, help="assert the pooling layer the codebook must match")
    p.add_argument("images", nargs="*")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="full multi-run evaluation; writes JSON + markdown reports")
    _common(p)
    _pipeline_flags(p)
    _svm_flags(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--split-ratio", dest="split_ratio", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="pooling-layer or cluster-count ablation table")
    _common(p)
    p.add_argument("axis", choices=["layers", "clusters"])
    _pipeline_flags(p)
    _svm_flags(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--split-ratio", dest="split_ratio", type=float)
    p.add_argument("--out-dir", dest="out_dir")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ManifestError, ModelError, CompatibilityError) as exc:
        print(f"bodvw {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PipelineError, BodvwError, ValueError, RuntimeError) as exc:
        print(f"bodvw {args.command}: pipeline failure: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
