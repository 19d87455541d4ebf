"""Per-position deep feature vectors and their normalizations.

A pooling-layer map of shape (H, W, L) yields N = H*W depth vectors.  BoDVW
L2-normalizes each one; the DCF-BoVW baseline uses the L1 norm instead.
Both divide by ``norm + EPS`` so all-zero positions (common in sparse chest
X-ray maps) come out as zero vectors instead of raising.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cnn_adapter import FeatureMap, layer_shape, parse_layer
from .errors import NormalizationError

EPS = 0.00000008

RAW = "raw"
L2_PER_VECTOR = "l2_per_vector"
L1_PER_VECTOR = "l1_per_vector"
NORM_TAGS = (RAW, L2_PER_VECTOR, L1_PER_VECTOR)


@dataclass(frozen=True)
class DeepFeatureSet:
    vectors: np.ndarray  # float64 (N, L)
    norm_tag: str
    layer: int
    provenance: str = ""

    def __post_init__(self):
        layer = parse_layer(self.layer)
        object.__setattr__(self, "layer", layer)
        if self.norm_tag not in NORM_TAGS:
            raise ValueError(f"unknown norm tag {self.norm_tag!r}")
        h, w, depth = layer_shape(layer)
        if self.vectors.shape != (h * w, depth):
            raise ValueError(f"expected {(h * w, depth)} vectors for p_{layer}, got {self.vectors.shape}")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def unroll(fmap: FeatureMap) -> DeepFeatureSet:
    """Row-major (h, w) flattening: vector ``h * W + w`` is ``map[h, w, :]``."""
    h, w, depth = fmap.values.shape
    vectors = fmap.values.reshape(h * w, depth).astype(np.float64)
    return DeepFeatureSet(vectors, RAW, fmap.layer, fmap.provenance)


def reroll(features: DeepFeatureSet) -> FeatureMap:
    """Inverse of :func:`unroll` for raw feature sets."""
    if features.norm_tag != RAW:
        raise NormalizationError("only raw feature sets can be rolled back into a feature map")
    shape = layer_shape(features.layer)
    return FeatureMap(features.layer, features.vectors.reshape(shape).astype(np.float32), features.provenance)


def normalize_rows(vectors, ord: int = 2) -> np.ndarray:
    """Row-wise ``x / (||x||_ord + EPS)`` on any (n, d) array, in float64."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ValueError("expected an (n, d) array")
    norms = np.linalg.norm(vectors, ord=ord, axis=1, keepdims=True)
    return vectors / (norms + EPS)


def _require_raw(features: DeepFeatureSet):
    if features.norm_tag != RAW:
        raise NormalizationError(f"feature set is already normalized ({features.norm_tag})")


def l2_normalize_each(features: DeepFeatureSet) -> DeepFeatureSet:
    """x' = x / (||x||_2 + EPS) for every depth vector."""
    _require_raw(features)
    return DeepFeatureSet(normalize_rows(features.vectors, 2), L2_PER_VECTOR, features.layer,
                          features.provenance)


def l1_normalize_each(features: DeepFeatureSet) -> DeepFeatureSet:
    """x' = x / (||x||_1 + EPS); the DCF-BoVW feature treatment."""
    _require_raw(features)
    return DeepFeatureSet(normalize_rows(features.vectors, 1), L1_PER_VECTOR, features.layer,
                          features.provenance)
