"""Visual-word codebook: k-means over training deep features.

Codebook file layout (little-endian)::

    b"BDVWCDBK" | u32 version=1 | u32 k | u32 L | u64 seed | f64 inertia
    | u32 iterations | k*L float32 centroids (row-major)
    | u32 n | n bytes UTF-8 JSON metadata | u32 CRC32 of all preceding bytes

The metadata block carries layer, normalization tag, config hash and any
caller-supplied provenance.  Centroids live in memory at float64; reloading
rounds them to float32, and a second save/load cycle is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .cnn_adapter import parse_layer
from .deepfeatures import L1_PER_VECTOR, L2_PER_VECTOR
from .errors import DimensionError, FileFormatError, TrainingError

CODEBOOK_MAGIC = b"BDVWCDBK"
CODEBOOK_VERSION = 1
_HEADER = struct.Struct("<8sIIIQdI")

_CHUNK_ROWS = 4096
_TIE_RTOL = 1e-9


@dataclass(frozen=True)
class KMeansConfig:
    k: int = 400
    max_iterations: int = 300
    rel_tolerance: float = 1e-4
    n_restarts: int = 3
    seed: int = 0
    init: str = "kmeanspp"
    refine_rounds: int = 10

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.rel_tolerance < 0:
            raise ValueError("rel_tolerance must be >= 0")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.refine_rounds < 0:
            raise ValueError("refine_rounds must be >= 0")
        if self.init != "kmeanspp":
            raise ValueError(f"unsupported init {self.init!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Codebook:
    """k centroids of dimension L plus the training record."""

    centroids: np.ndarray
    layer: int
    seed: int = 0
    inertia: float = 0.0
    iterations_run: int = 0
    config_hash: str = ""
    norm_tag: str = L2_PER_VECTOR
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.array(self.centroids, dtype=np.float64, order="C")
        if c.ndim != 2 or c.shape[0] < 2:
            raise ValueError("a codebook needs a (k >= 2, L) centroid matrix")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite centroid")
        if self.inertia < 0:
            raise ValueError("inertia must be >= 0")
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "layer", parse_layer(self.layer))

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.centroids.astype("<f4").tobytes())
        h.update(f"|p_{self.layer}|{self.norm_tag}".encode())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            np.array_equal(self.centroids, other.centroids)
            and (self.layer, self.seed, self.inertia, self.iterations_run, self.config_hash, self.norm_tag)
            == (other.layer, other.seed, other.inertia, other.iterations_run, other.config_hash, other.norm_tag)
            and self.meta == other.meta
        )

    __hash__ = None


# -- nearest centroid ---------------------------------------------------------

def nearest_centroids(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest centroid (lowest index on ties) and squared distance.

    Distances are screened with the ||x||^2 - 2 x.c + ||c||^2 expansion; rows
    whose two best candidates are within rounding noise are re-scored with
    explicit differences so exact ties always resolve to the lowest index.
    """
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    n = X.shape[0]
    labels = np.empty(n, dtype=np.int64)
    d2 = np.empty(n)
    c2 = np.einsum("ij,ij->i", C, C)
    c2max = float(c2.max()) if len(c2) else 0.0
    for start in range(0, n, _CHUNK_ROWS):
        xs = X[start:start + _CHUNK_ROWS]
        x2 = np.einsum("ij,ij->i", xs, xs)
        d = c2[None, :] - 2.0 * (xs @ C.T)
        idx = np.argmin(d, axis=1)
        if C.shape[0] > 1:
            two = np.partition(d, 1, axis=1)[:, :2]
            close = (two[:, 1] - two[:, 0]) <= _TIE_RTOL * (x2 + c2max + 1.0)
            for r in np.flatnonzero(close):
                diff = C - xs[r]
                idx[r] = int(np.argmin(np.einsum("ij,ij->i", diff, diff)))
        labels[start:start + len(xs)] = idx
        diff = xs - C[idx]
        d2[start:start + len(xs)] = np.einsum("ij,ij->i", diff, diff)
    return labels, d2


def assign(x, book: Codebook) -> int:
    """0-based index of the centroid nearest to ``x``; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != book.dim:
        raise DimensionError(f"vector of shape {x.shape} vs codebook dimension {book.dim}")
    labels, _ = nearest_centroids(x[None, :], book.centroids)
    return int(labels[0])


def assign_all(X, book: Codebook) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != book.dim:
        raise DimensionError(f"vectors of shape {X.shape} vs codebook dimension {book.dim}")
    return nearest_centroids(X, book.centroids)[0]


# -- Lloyd ---------------------------------------------------------------------

@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    n_iter: int
    history: list  # inertia after every assignment step
    restart: int = 0


def _kmeanspp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    x2 = np.einsum("ij,ij->i", X, X)
    chosen = [int(rng.integers(n))]
    c = X[chosen[0]]
    d2 = np.maximum(x2 - 2.0 * (X @ c) + c @ c, 0.0)
    for _ in range(1, k):
        cum = np.cumsum(d2)
        total = cum[-1]
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        chosen.append(idx)
        c = X[idx]
        d2 = np.minimum(d2, np.maximum(x2 - 2.0 * (X @ c) + c @ c, 0.0))
    return X[chosen].copy()


def _repair_empty(X, centers, labels, d2, k):
    """Move each empty centroid onto the point farthest from its own centroid."""
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        movable = counts[labels] > 1
        if not movable.any():
            break
        score = np.where(movable, d2, -1.0)
        p = int(np.argmax(score))
        counts[labels[p]] -= 1
        labels[p] = j
        counts[j] = 1
        d2[p] = 0.0
        centers[j] = X[p]
    return counts


def _update(X, labels, centers, k):
    """Cluster means; members are summed in ascending point order."""
    new = centers.copy()
    for j in range(k):
        members = X[labels == j]
        if members.shape[0]:
            new[j] = members.sum(axis=0) / members.shape[0]
    return new


def lloyd(X: np.ndarray, init: np.ndarray, max_iterations: int, rel_tolerance: float) -> KMeansResult:
    k = init.shape[0]
    centers = init.astype(np.float64, copy=True)
    labels, d2 = nearest_centroids(X, centers)
    history = [float(d2.sum())]
    n_iter = 0
    for it in range(1, max_iterations + 1):
        _repair_empty(X, centers, labels, d2, k)
        centers = _update(X, labels, centers, k)
        labels, d2 = nearest_centroids(X, centers)
        prev, cur = history[-1], float(d2.sum())
        history.append(cur)
        n_iter = it
        empty = np.bincount(labels, minlength=k).min() == 0
        if not empty and (prev - cur) <= rel_tolerance * prev:
            break
    return KMeansResult(centers, labels, history[-1], n_iter, history)


def _transfer_gains(X, centers, labels, counts):
    """Exact inertia drop of moving each point alone to its best other cluster.

    Returns ``(gain, dest)``; points in singleton clusters get ``-inf``.
    """
    n, k = X.shape[0], centers.shape[0]
    gain = np.empty(n)
    dest = np.empty(n, dtype=np.int64)
    join_w = counts / (counts + 1.0)
    leave_w = np.where(counts > 1, counts / np.maximum(counts - 1.0, 1.0), -np.inf)
    c2 = np.einsum("ij,ij->i", centers, centers)
    for s in range(0, n, _CHUNK_ROWS):
        xb, lb = X[s:s + _CHUNK_ROWS], labels[s:s + _CHUNK_ROWS]
        rows = np.arange(xb.shape[0])
        d2 = np.maximum(np.einsum("ij,ij->i", xb, xb)[:, None] - 2.0 * (xb @ centers.T) + c2, 0.0)
        own = d2[rows, lb]
        join = d2 * join_w
        join[rows, lb] = np.inf
        best = join.argmin(axis=1) if k > 1 else np.zeros(len(rows), dtype=np.int64)
        with np.errstate(invalid="ignore"):
            gain[s:s + len(rows)] = leave_w[lb] * own - join[rows, best]
        dest[s:s + len(rows)] = best
    return gain, dest


def refine(X: np.ndarray, res: KMeansResult, cfg: KMeansConfig) -> KMeansResult:
    """Hartigan-style single-point transfers followed by Lloyd, repeated.

    Lloyd stops at any partition where each point is nearest its own mean; a
    transfer that accounts for both means moving can still lower the inertia.
    Each round applies the best transfers that touch disjoint clusters (their
    gains add up exactly), then re-runs Lloyd.  A round that fails to lower the
    measured inertia is discarded, so the history stays strictly decreasing.
    Rounds whose summed gain is within ``rel_tolerance`` of the inertia are
    skipped, matching the Lloyd stopping rule.
    """
    k = res.centroids.shape[0]
    for _ in range(cfg.refine_rounds):
        counts = np.bincount(res.labels, minlength=k).astype(np.float64)
        gain, dest = _transfer_gains(X, res.centroids, res.labels, counts)
        floor = 1e-12 * max(res.inertia, np.finfo(float).tiny)
        candidates = np.flatnonzero(gain > floor)
        if candidates.size == 0:
            break
        labels = res.labels.copy()
        used = np.zeros(k, dtype=bool)
        total = 0.0
        for p in candidates[np.argsort(-gain[candidates], kind="stable")]:
            a, b = labels[p], dest[p]
            if used[a] or used[b]:
                continue
            used[a] = used[b] = True
            labels[p] = b
            total += gain[p]
            if used.sum() >= k - 1:
                break
        if total <= cfg.rel_tolerance * res.inertia:
            break
        nxt = lloyd(X, _update(X, labels, res.centroids, k), cfg.max_iterations, cfg.rel_tolerance)
        if not (nxt.history[0] <= res.inertia and nxt.inertia < res.inertia):
            break
        nxt.history = res.history + nxt.history
        nxt.n_iter += res.n_iter
        res = nxt
    return res


def kmeans(X, cfg: KMeansConfig) -> list[KMeansResult]:
    """Run every restart and return them all (callers pick the best)."""
    X = np.asarray(X, dtype=np.float64)
    results = []
    for r in range(cfg.n_restarts):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, r]))
        init = _kmeanspp(X, cfg.k, rng)
        res = refine(X, lloyd(X, init, cfg.max_iterations, cfg.rel_tolerance), cfg)
        res.restart = r
        results.append(res)
    return results


def _stack_features(features, layer, norm_tag):
    if isinstance(features, np.ndarray):
        if layer is None:
            raise ValueError("layer is required when training from a raw array")
        return features, parse_layer(layer), norm_tag or L2_PER_VECTOR
    features = list(features)
    if not features:
        raise TrainingError("no training features")
    tags = {f.norm_tag for f in features}
    layers = {f.layer for f in features}
    dims = {f.dim for f in features}
    if len(dims) > 1:
        raise DimensionError(f"mixed feature dimensions {sorted(dims)}")
    if len(tags) > 1 or len(layers) > 1:
        raise TrainingError(f"mixed normalization tags {sorted(tags)} or layers {sorted(layers)}")
    tag, lay = tags.pop(), layers.pop()
    if layer is not None and parse_layer(layer) != lay:
        raise TrainingError(f"features come from p_{lay}, not p_{parse_layer(layer)}")
    return np.concatenate([f.vectors for f in features], axis=0), lay, tag


def train_codebook(features, cfg: KMeansConfig = KMeansConfig(), layer=None, norm_tag=None,
                   meta: dict | None = None) -> Codebook:
    """Cluster the pooled deep features of all training images.

    ``features`` is a sequence of :class:`DeepFeatureSet` (normalized) or an
    (n, L) array together with ``layer``.  The restart with the lowest
    inertia wins, earliest restart on ties.
    """
    X, layer, tag = _stack_features(features, layer, norm_tag)
    if tag not in (L2_PER_VECTOR, L1_PER_VECTOR):
        raise TrainingError(f"codebook features must be normalized, got {tag!r}")
    if X.ndim != 2:
        raise DimensionError("feature matrix must be 2-D")
    if not np.all(np.isfinite(X)):
        raise TrainingError("NaN or infinite value in training features")
    if X.shape[0] < cfg.k:
        raise TrainingError(f"{X.shape[0]} vectors cannot fill {cfg.k} clusters")

    best = None
    for res in kmeans(X, cfg):
        if best is None or res.inertia < best.inertia:
            best = res
    return Codebook(
        centroids=best.centroids,
        layer=layer,
        seed=cfg.seed,
        inertia=best.inertia,
        iterations_run=best.n_iter,
        config_hash=cfg.config_hash(),
        norm_tag=tag,
        meta=dict(meta or {}),
    )


# -- persistence ----------------------------------------------------------------

def save_codebook(book: Codebook, path) -> None:
    meta = json.dumps(
        {"layer": book.layer, "norm_tag": book.norm_tag, "config_hash": book.config_hash, "meta": book.meta},
        sort_keys=True,
    ).encode("utf-8")
    body = b"".join([
        _HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, book.k, book.dim, book.seed, book.inertia,
                     book.iterations_run),
        book.centroids.astype("<f4").tobytes(),
        struct.pack("<I", len(meta)),
        meta,
    ])
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_codebook(path) -> Codebook:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 8:
        raise FileFormatError(f"{path}: truncated codebook file")
    magic, version, k, dim, seed, inertia, iterations = _HEADER.unpack_from(data, 0)
    if magic != CODEBOOK_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != CODEBOOK_VERSION:
        raise FileFormatError(f"{path}: unsupported codebook version {version}")
    offset = _HEADER.size
    nbytes = k * dim * 4
    if len(data) < offset + nbytes + 8:
        raise FileFormatError(f"{path}: truncated codebook file")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise FileFormatError(f"{path}: checksum mismatch")
    centroids = np.frombuffer(data, dtype="<f4", count=k * dim, offset=offset).reshape(k, dim)
    offset += nbytes
    (n,) = struct.unpack_from("<I", data, offset)
    offset += 4
    if offset + n != len(data) - 4:
        raise FileFormatError(f"{path}: metadata length mismatch")
    meta = json.loads(data[offset:offset + n].decode("utf-8"))
    return Codebook(
        centroids=centroids.astype(np.float64),
        layer=meta["layer"],
        seed=seed,
        inertia=inertia,
        iterations_run=iterations,
        config_hash=meta["config_hash"],
        norm_tag=meta["norm_tag"],
        meta=meta.get("meta", {}),
    )
