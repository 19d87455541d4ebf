"""Word histograms over a codebook and their final normalization.

Both variants share :func:`encode_counts`; they differ only in the
per-vector normalization before it and the histogram normalization after it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codebook import Codebook, nearest_centroids
from .deepfeatures import EPS, DeepFeatureSet, l1_normalize_each, l2_normalize_each, unroll
from .errors import CompatibilityError, DimensionError, NormalizationError

COUNTS, L2, L1 = "counts", "l2", "l1"


@dataclass(frozen=True, eq=False)
class BoVWVector:
    weights: np.ndarray  # int64 counts, or float64 after finalization
    norm_tag: str
    codebook_hash: str = ""
    provenance: str = ""

    def __post_init__(self):
        if self.norm_tag not in (COUNTS, L2, L1):
            raise ValueError(f"unknown histogram tag {self.norm_tag!r}")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    def __eq__(self, other):
        if not isinstance(other, BoVWVector):
            return NotImplemented
        return (np.array_equal(self.weights, other.weights) and self.weights.dtype == other.weights.dtype
                and (self.norm_tag, self.codebook_hash, self.provenance)
                == (other.norm_tag, other.codebook_hash, other.provenance))

    __hash__ = None


def encode_counts(features: DeepFeatureSet, book: Codebook, expected_hash: str | None = None) -> BoVWVector:
    """w_j = number of deep features whose nearest centroid is c_j.

    ``expected_hash`` turns on strict mode: the codebook must be the one the
    caller's downstream model was trained against.
    """
    if features.dim != book.dim:
        raise DimensionError(f"features have dimension {features.dim}, codebook {book.dim}")
    if features.norm_tag != book.norm_tag:
        raise CompatibilityError(
            f"features are {features.norm_tag} but the codebook was trained on {book.norm_tag}")
    if expected_hash is not None and expected_hash != book.hash:
        raise CompatibilityError(f"codebook hash {book.hash} != expected {expected_hash}")
    labels, _ = nearest_centroids(features.vectors, book.centroids)
    counts = np.bincount(labels, minlength=book.k).astype(np.int64)
    return BoVWVector(counts, COUNTS, book.hash, features.provenance)


def _finalize(hist: BoVWVector, ord: int, tag: str) -> BoVWVector:
    if hist.norm_tag != COUNTS:
        raise NormalizationError(f"histogram is already normalized ({hist.norm_tag})")
    w = hist.weights.astype(np.float64)
    return BoVWVector(w / (np.linalg.norm(w, ord=ord) + EPS), tag, hist.codebook_hash, hist.provenance)


def finalize_l2(hist: BoVWVector) -> BoVWVector:
    """BoDVW: w / (||w||_2 + EPS)."""
    return _finalize(hist, 2, L2)


def finalize_l1(hist: BoVWVector) -> BoVWVector:
    """DCF-BoVW: w / (sum w + EPS)."""
    return _finalize(hist, 1, L1)


# variant -> (per-vector normalization, histogram finalization)
VARIANTS = {
    "bodvw": (l2_normalize_each, finalize_l2),
    "dcf_bovw": (l1_normalize_each, finalize_l1),
}


def normalize_features(raw: DeepFeatureSet, variant: str) -> DeepFeatureSet:
    try:
        per_vector, _ = VARIANTS[variant]
    except KeyError:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None
    return per_vector(raw)


def encode_image(fmap, book: Codebook, variant: str = "bodvw", expected_hash: str | None = None) -> BoVWVector:
    """Feature map -> final histogram for ``variant``."""
    _, finalize = VARIANTS[variant]
    features = normalize_features(unroll(fmap), variant)
    return finalize(encode_counts(features, book, expected_hash))


def write_features_csv(path, rows, meta: dict | None = None) -> None:
    """Write ``path,label,w_1..w_k``; ``rows`` yields (path, label, weights).

    ``meta`` lands in a JSON sidecar next to the CSV.
    """
    rows = list(rows)
    path = Path(path)
    k = len(rows[0][2]) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label"] + [f"w_{j}" for j in range(1, k + 1)])
        for p, label, weights in rows:
            if len(weights) != k:
                raise DimensionError(f"row {p!r} has {len(weights)} weights, expected {k}")
            writer.writerow([p, label] + [repr(float(w)) for w in weights])
    if meta is not None:
        path.with_suffix(path.suffix + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_features_csv(path):
    """Return ``(paths, labels, X)`` and the sidecar metadata (or ``{}``)."""
    path = Path(path)
    paths, labels, rows = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["path", "label"]:
            raise ValueError(f"{path}: expected header path,label,w_1..w_k")
        for row in reader:
            if not row:
                continue
            paths.append(row[0])
            labels.append(row[1])
            rows.append([float(v) for v in row[2:]])
    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 2)
    sidecar = path.with_suffix(path.suffix + ".meta.json")
    meta = json.loads(sidecar.read_text()) if sidecar.is_file() else {}
    return paths, labels, X, meta
