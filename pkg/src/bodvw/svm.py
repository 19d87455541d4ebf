"""RBF-kernel SVM trained with SMO, one-vs-one multiclass and a C grid search.

The binary solver minimizes the soft-margin dual

    f(a) = 1/2 a^T Q a - e^T a,   Q_ij = y_i y_j K(x_i, x_j)
    s.t. 0 <= a_i <= C,  y^T a = 0

by sequential minimal optimization with maximal-violating-pair working-set
selection; it stops once the KKT gap m(a) - M(a) drops below ``tol``.
"""

from __future__ import annotations

import base64
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, FileFormatError, TrainingError

log = logging.getLogger(__name__)

DEFAULT_GAMMA = 1e-05
DEFAULT_C_GRID = (1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100)
DEFAULT_TOL = 1e-3
DEFAULT_CACHE_BYTES = 256 * 1024 * 1024
STD_FLOOR = 1e-12
MODEL_FORMAT = "bodvw-svm"
MODEL_VERSION = 1


# -- standardization -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Standardizer:
    means: np.ndarray
    stds: np.ndarray

    @property
    def dim(self) -> int:
        return self.means.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Standardizer):
            return NotImplemented
        return np.array_equal(self.means, other.means) and np.array_equal(self.stds, other.stds)

    __hash__ = None


def fit_standardizer(X) -> Standardizer:
    """Column means and population standard deviations (floored at 1e-12)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise TrainingError("standardizer needs at least two rows")
    return Standardizer(X.mean(axis=0), np.maximum(X.std(axis=0), STD_FLOOR))


def apply_standardizer(s: Standardizer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != s.dim:
        raise DimensionError(f"expected dimension {s.dim}, got {x.shape[-1]}")
    return (x - s.means) / s.stds


# -- kernel --------------------------------------------------------------------

def rbf_kernel(x, y, gamma: float = DEFAULT_GAMMA) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"kernel arguments differ in shape: {x.shape} vs {y.shape}")
    d = x - y
    return float(np.exp(-gamma * float(d @ d)))


def rbf_kernel_matrix(A, B, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    a2 = np.einsum("ij,ij->i", A, A)
    b2 = np.einsum("ij,ij->i", B, B)
    d = np.maximum(a2[:, None] + b2[None, :] - 2.0 * (A @ B.T), 0.0)
    return np.exp(-gamma * d)


class KernelRows:
    """Rows of K(X, X) on demand, kept in an LRU cache bounded by ``budget`` bytes.

    When the full matrix fits the budget it is computed once up front.
    """

    def __init__(self, X: np.ndarray, gamma: float, budget: int = DEFAULT_CACHE_BYTES, full=None):
        self.X = X
        self.gamma = gamma
        n = X.shape[0]
        self._x2 = np.einsum("ij,ij->i", X, X)
        self.diag = np.ones(n)
        self.full = full
        if self.full is None and n * n * 8 <= budget:
            self.full = rbf_kernel_matrix(X, X, gamma)
        self._max_rows = max(2, budget // max(1, n * 8))
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()

    def row(self, i: int) -> np.ndarray:
        if self.full is not None:
            return self.full[i]
        r = self._rows.get(i)
        if r is not None:
            self._rows.move_to_end(i)
            return r
        d = np.maximum(self._x2 + self._x2[i] - 2.0 * (self.X @ self.X[i]), 0.0)
        r = np.exp(-self.gamma * d)
        self._rows[i] = r
        if len(self._rows) > self._max_rows:
            self._rows.popitem(last=False)
        return r


# -- binary SMO ----------------------------------------------------------------

def _violating_pair(alpha, y, G, C):
    """Indices (i, j) of the maximal violating pair and the KKT gap m - M."""
    yG = -y * G
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    if not up.any() or not low.any():
        return -1, -1, 0.0
    i = int(np.argmax(np.where(up, yG, -np.inf)))
    j = int(np.argmin(np.where(low, yG, np.inf)))
    return i, j, float(yG[i] - yG[j])


def kkt_residual(alpha, y, K, C) -> float:
    """Maximal KKT violation m(a) - M(a), clipped at 0, recomputed from scratch."""
    alpha = np.asarray(alpha, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    G = y * (K @ (alpha * y)) - 1.0
    return max(0.0, _violating_pair(alpha, y, G, C)[2])


def dual_objective(alpha, y, K) -> float:
    """e^T a - 1/2 a^T Q a (the maximization form)."""
    ay = np.asarray(alpha) * np.asarray(y)
    return float(np.sum(alpha) - 0.5 * ay @ K @ ay)


def smo(kernel: KernelRows, y: np.ndarray, C: float, tol: float = DEFAULT_TOL, max_iter: int | None = None):
    """Solve the dual; returns ``(alpha, rho, n_iter, gap)``."""
    n = y.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)
    qd = kernel.diag
    max_iter = max_iter or max(100_000, 100 * n)
    tau = 1e-12
    gap = math.inf
    it = 0
    while it < max_iter:
        i, j, gap = _violating_pair(alpha, y, G, C)
        if i < 0 or gap < tol:
            break
        it += 1
        Ki, Kj = kernel.row(i), kernel.row(j)
        Qi = y[i] * y * Ki
        Qj = y[j] * y * Kj
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = qd[i] + qd[j] + 2.0 * Qi[j]
            quad = quad if quad > 0 else tau
            delta = (-G[i] - G[j]) / quad
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            quad = qd[i] + qd[j] - 2.0 * Qi[j]
            quad = quad if quad > 0 else tau
            delta = (G[i] - G[j]) / quad
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total
        alpha[i], alpha[j] = ni, nj
        G += Qi * (ni - ai) + Qj * (nj - aj)
    else:
        log.warning("SMO hit the iteration cap (%d) with KKT gap %.3g", max_iter, gap)

    yG = y * G
    at_upper = alpha >= C
    at_lower = alpha <= 0
    free = ~(at_upper | at_lower)
    if free.any():
        rho = float(yG[free].mean())
    else:
        ub_mask = (at_upper & (y < 0)) | (at_lower & (y > 0))
        lb_mask = (at_upper & (y > 0)) | (at_lower & (y < 0))
        ub = yG[ub_mask].min() if ub_mask.any() else math.inf
        lb = yG[lb_mask].max() if lb_mask.any() else -math.inf
        rho = float((ub + lb) / 2)
    return alpha, rho, it, max(0.0, gap)


@dataclass(eq=False)
class BinarySvm:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for the support vectors
    bias: float
    gamma: float
    C: float
    support: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    alpha: np.ndarray | None = None  # full dual vector, training diagnostics only
    info: dict = field(default_factory=dict)

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.support_vectors.shape[1]:
            raise DimensionError(f"expected dimension {self.support_vectors.shape[1]}, got {X.shape[1]}")
        return rbf_kernel_matrix(X, self.support_vectors, self.gamma) @ self.dual_coef + self.bias

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0, 1, -1)


def _check_binary(X, y, C, gamma):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimensionError("X must be (n, d) with one label per row")
    if not np.all(np.isfinite(X)):
        raise TrainingError("non-finite feature value")
    if not np.all((y == 1) | (y == -1)):
        raise TrainingError("binary labels must be +1 / -1")
    if not ((y > 0).any() and (y < 0).any()):
        raise TrainingError("both classes must be present")
    if not C > 0 or not gamma > 0:
        raise TrainingError("C and gamma must be positive")
    return X, y


def train_binary(X, y, C: float = 1.0, gamma: float = DEFAULT_GAMMA, tol: float = DEFAULT_TOL,
                 kernel: np.ndarray | None = None, cache_bytes: int = DEFAULT_CACHE_BYTES) -> BinarySvm:
    """Soft-margin RBF SVM on labels in {-1, +1}.

    ``kernel`` may hold the precomputed K(X, X) to share it between solves.
    """
    X, y = _check_binary(X, y, C, gamma)
    rows = KernelRows(X, gamma, cache_bytes, full=kernel)
    alpha, rho, n_iter, gap = smo(rows, y, C, tol)
    sv = np.flatnonzero(alpha > 0)
    info = {"n_iter": n_iter, "kkt_gap": gap, "n_sv": int(sv.size)}
    return BinarySvm(X[sv].copy(), alpha[sv] * y[sv], -rho, gamma, C, sv, alpha, info)


# -- multiclass ----------------------------------------------------------------

@dataclass(eq=False)
class SvmModel:
    classes: list
    pairs: list  # [((a, b), BinarySvm)], a < b class indices; +1 means class a
    gamma: float
    C: float
    standardizer: Standardizer
    meta: dict = field(default_factory=dict)

    def decision_votes(self, X):
        Xs = apply_standardizer(self.standardizer, np.atleast_2d(X))
        n, m = Xs.shape[0], len(self.classes)
        votes = np.zeros((n, m), dtype=np.int64)
        margin = np.zeros((n, m))
        for (a, b), svm in self.pairs:
            f = svm.decision_function(Xs)
            pos = f >= 0
            votes[pos, a] += 1
            votes[~pos, b] += 1
            margin[:, a] += f
            margin[:, b] -= f
        return votes, margin

    def predict_indices(self, X) -> np.ndarray:
        votes, margin = self.decision_votes(X)
        top = votes.max(axis=1, keepdims=True)
        return np.argmax(np.where(votes == top, margin, -np.inf), axis=1)

    def predict(self, X) -> list:
        return [self.classes[i] for i in self.predict_indices(X)]


@dataclass
class _Prepared:
    standardizer: Standardizer
    Xs: np.ndarray
    K: np.ndarray | None


def _prepare(X, gamma, cache_bytes=DEFAULT_CACHE_BYTES) -> _Prepared:
    std = fit_standardizer(X)
    Xs = apply_standardizer(std, X)
    n = Xs.shape[0]
    K = rbf_kernel_matrix(Xs, Xs, gamma) if n * n * 8 <= cache_bytes else None
    return _Prepared(std, Xs, K)


def _train_ovo(prep: _Prepared, yi: np.ndarray, classes: list, C, gamma, tol) -> SvmModel:
    pairs = []
    m = len(classes)
    for a in range(m):
        for b in range(a + 1, m):
            idx = np.flatnonzero((yi == a) | (yi == b))
            yb = np.where(yi[idx] == a, 1.0, -1.0)
            K = prep.K[np.ix_(idx, idx)] if prep.K is not None else None
            pairs.append(((a, b), train_binary(prep.Xs[idx], yb, C, gamma, tol, kernel=K)))
    return SvmModel(list(classes), pairs, gamma, C, prep.standardizer)


def _encode_labels(y):
    y = list(y)
    classes = sorted(set(y))
    index = {c: i for i, c in enumerate(classes)}
    return classes, np.array([index[v] for v in y], dtype=np.int64)


def train_multiclass(X, y, C: float = 1.0, gamma: float = DEFAULT_GAMMA, tol: float = DEFAULT_TOL) -> SvmModel:
    """Fit the standardizer on X, then one RBF SVM per unordered class pair."""
    X = np.asarray(X, dtype=np.float64)
    classes, yi = _encode_labels(y)
    if len(classes) < 2:
        raise TrainingError("need at least two classes")
    if X.shape[0] != yi.shape[0]:
        raise DimensionError("X and y lengths differ")
    return _train_ovo(_prepare(X, gamma), yi, classes, C, gamma, tol)


def predict(model: SvmModel, x):
    """Label of a single vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError("predict takes one vector; use model.predict for batches")
    return model.predict(x[None, :])[0]


# -- grid search ---------------------------------------------------------------

@dataclass(frozen=True)
class GridSearchSpec:
    C_grid: tuple = DEFAULT_C_GRID
    folds: int = 5
    fold_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "C_grid", tuple(self.C_grid))
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not self.C_grid:
            raise ValueError("C grid is empty")


def stratified_folds(yi: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold id per sample; each class is shuffled and dealt round-robin."""
    counts = np.bincount(yi)
    if counts.min() < folds:
        raise TrainingError(f"stratification impossible: a class has {counts.min()} samples for {folds} folds")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(yi.shape[0], dtype=np.int64)
    offset = 0
    for c in range(counts.shape[0]):
        members = rng.permutation(np.flatnonzero(yi == c))
        fold_of[members] = (np.arange(members.size) + offset) % folds
        offset += members.size
    return fold_of


def grid_search_C(X, y, spec: GridSearchSpec = GridSearchSpec(), gamma: float = DEFAULT_GAMMA,
                  tol: float = DEFAULT_TOL):
    """Stratified k-fold CV accuracy for each C; refit on all of X at the best C.

    Returns ``(best_C, table, model)`` where ``table`` lists, per C, the fold
    accuracies and their mean.  Ties go to the smallest C.
    """
    X = np.asarray(X, dtype=np.float64)
    classes, yi = _encode_labels(y)
    if len(classes) < 2:
        raise TrainingError("need at least two classes")
    fold_of = stratified_folds(yi, spec.folds, spec.fold_seed)

    prepared = []
    for f in range(spec.folds):
        tr, va = fold_of != f, fold_of == f
        prepared.append((_prepare(X[tr], gamma), yi[tr], X[va], yi[va]))

    table = []
    best_C, best_acc = None, -1.0
    for C in sorted(spec.C_grid):
        accs = []
        for prep, ytr, Xva, yva in prepared:
            present = sorted(set(ytr.tolist()))
            remap = {c: i for i, c in enumerate(present)}
            model = _train_ovo(prep, np.array([remap[v] for v in ytr]), present, C, gamma, tol)
            pred = np.array(model.predict(Xva))
            accs.append(float(np.mean(pred == yva)))
        mean = math.fsum(accs) / len(accs)
        table.append({"C": C, "fold_accuracies": accs, "mean_accuracy": mean})
        if mean > best_acc:
            best_C, best_acc = C, mean
    final = _train_ovo(_prepare(X, gamma), yi, classes, best_C, gamma, tol)
    return best_C, table, final


# -- persistence ---------------------------------------------------------------

def _b64(a) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"))
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise FileFormatError(f"array payload has {arr.size} values, expected shape {shape}")
    return arr.reshape(shape).astype(np.float64)


def model_to_dict(model: SvmModel) -> dict:
    dim = model.standardizer.dim
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "classes": list(model.classes),
        "gamma": model.gamma,
        "C": model.C,
        "dim": dim,
        "standardizer": {"means": _b64(model.standardizer.means), "stds": _b64(model.standardizer.stds)},
        "pairs": [
            {
                "classes": [a, b],
                "n_sv": int(svm.support_vectors.shape[0]),
                "support_vectors": _b64(svm.support_vectors),
                "dual_coef": _b64(svm.dual_coef),
                "bias": svm.bias,
            }
            for (a, b), svm in model.pairs
        ],
        "meta": model.meta,
    }


def model_from_dict(d: dict) -> SvmModel:
    if d.get("format") != MODEL_FORMAT or "version" not in d:
        raise FileFormatError("not a bodvw SVM model file")
    if d["version"] != MODEL_VERSION:
        raise FileFormatError(f"unsupported model version {d['version']}")
    dim = int(d["dim"])
    std = Standardizer(_unb64(d["standardizer"]["means"], (dim,)), _unb64(d["standardizer"]["stds"], (dim,)))
    pairs = []
    for p in d["pairs"]:
        n_sv = int(p["n_sv"])
        svm = BinarySvm(_unb64(p["support_vectors"], (n_sv, dim)), _unb64(p["dual_coef"], (n_sv,)),
                        float(p["bias"]), float(d["gamma"]), float(d["C"]))
        pairs.append((tuple(p["classes"]), svm))
    return SvmModel(list(d["classes"]), pairs, float(d["gamma"]), float(d["C"]), std, dict(d.get("meta", {})))


def save_model(model: SvmModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1), encoding="utf-8")


def load_model(path) -> SvmModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FileFormatError(f"{path}: invalid JSON ({exc})") from exc
    return model_from_dict(d)
