"""Synthetic pooling-layer maps with known class structure.

Every class owns a mixture over a small set of orthogonal, unit-norm,
non-negative prototype vectors.  Each spatial position of an image draws one
prototype from its class mixture, scales it by a random magnitude (which the
per-vector normalization removes) and adds a little rectified noise.  A
fraction of positions is left at exactly zero, as in sparse X-ray maps.
"""

from __future__ import annotations

import numpy as np

from .cnn_adapter import FeatureMap, layer_shape, parse_layer
from .imageio import DatasetManifest


def make_prototypes(n_prototypes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm prototypes on disjoint coordinate blocks (pairwise distance sqrt 2)."""
    if n_prototypes > dim:
        raise ValueError("need at least one coordinate per prototype")
    blocks = np.array_split(rng.permutation(dim), n_prototypes)
    protos = np.zeros((n_prototypes, dim))
    for p, block in enumerate(blocks):
        protos[p, block] = rng.uniform(0.5, 1.5, size=block.size)
    return protos / np.linalg.norm(protos, axis=1, keepdims=True)


def class_mixtures(n_classes: int, n_prototypes: int, rng: np.random.Generator,
                   min_separation: float = 0.6) -> np.ndarray:
    """Dirichlet mixtures, resampled until every pair differs by >= ``min_separation`` in L1."""
    for _ in range(1000):
        w = rng.dirichlet(np.full(n_prototypes, 0.7), size=n_classes)
        d = np.abs(w[:, None, :] - w[None, :, :]).sum(-1)
        if n_classes < 2 or d[np.triu_indices(n_classes, 1)].min() >= min_separation:
            return w
    raise RuntimeError("could not draw separated class mixtures")


class SyntheticFeatureSource:
    """Callable ``(path, layer) -> FeatureMap`` producing deterministic maps.

    Maps for any pooling layer are generated on demand from the image's seed,
    so layer ablations run on shape-correct synthetic data.
    """

    def __init__(self, n_prototypes: int, mixtures: np.ndarray, images: dict, seed: int,
                 noise: float = 0.02, zero_fraction: float = 0.1):
        self.n_prototypes = n_prototypes
        self.mixtures = mixtures
        self.images = images  # path -> (class index, image index)
        self.seed = seed
        self.noise = noise
        self.zero_fraction = zero_fraction
        self._prototypes = {}

    def prototypes(self, dim: int) -> np.ndarray:
        if dim not in self._prototypes:
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, 7919, dim]))
            self._prototypes[dim] = make_prototypes(self.n_prototypes, dim, rng)
        return self._prototypes[dim]

    def __call__(self, path: str, layer) -> FeatureMap:
        layer = parse_layer(layer)
        cls, idx = self.images[path]
        h, w, dim = layer_shape(layer)
        n = h * w
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, idx, layer]))
        protos = self.prototypes(dim)
        words = rng.choice(self.n_prototypes, size=n, p=self.mixtures[cls])
        scale = rng.uniform(0.5, 5.0, size=(n, 1))
        vecs = protos[words] * scale + np.abs(rng.normal(0.0, self.noise, size=(n, dim)))
        vecs[rng.random(n) < self.zero_fraction] = 0.0
        return FeatureMap(layer, vecs.reshape(h, w, dim).astype(np.float32), path)


def make_prototype_dataset(n_classes: int = 3, images_per_class: int = 50, n_prototypes: int = 5,
                           seed: int = 0, noise: float = 0.02, zero_fraction: float = 0.1,
                           name: str = "synthetic"):
    """Return ``(manifest, feature_source)`` for a synthetic classification task."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 104729]))
    mixtures = class_mixtures(n_classes, n_prototypes, rng)
    categories = tuple(f"class_{c}" for c in range(n_classes))
    entries, images = [], {}
    idx = 0
    for c in range(n_classes):
        for i in range(images_per_class):
            path = f"{name}/{categories[c]}/{i:04d}.png"
            entries.append((path, c))
            images[path] = (c, idx)
            idx += 1
    manifest = DatasetManifest(name=name, categories=categories, entries=tuple(entries))
    source = SyntheticFeatureSource(n_prototypes, mixtures, images, seed, noise, zero_fraction)
    return manifest, source
