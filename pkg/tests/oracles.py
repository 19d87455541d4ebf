"""Independent reference computations used by the tests.

None of these call into the package's solvers: they are brute-force or
textbook implementations kept deliberately simple.
"""

import itertools
import math

import numpy as np


def brute_force_two_means(points):
    """Minimum 2-means inertia over every split of ``points`` into two non-empty groups."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    best = math.inf
    best_split = None
    for mask in range(1, 2 ** (n - 1)):
        a = [i for i in range(n) if mask >> i & 1]
        b = [i for i in range(n) if not mask >> i & 1]
        cost = 0.0
        for group in (a, b):
            g = points[group]
            cost += float(((g - g.mean(axis=0)) ** 2).sum())
        if cost < best:
            best, best_split = cost, (a, b)
    return best, best_split


def nearest_by_scan(x, centroids):
    """Plain loop; strict '<' keeps the lowest index on ties."""
    best_j, best_d = -1, math.inf
    for j, c in enumerate(centroids):
        d = sum((float(xi) - float(ci)) ** 2 for xi, ci in zip(x, c))
        if d < best_d:
            best_j, best_d = j, d
    return best_j


def hand_metrics(cm):
    """Per-class precision/recall/F1 with explicit loops and 0/0 := 0."""
    m = len(cm)
    out = {"precision": [], "recall": [], "f1": []}
    for c in range(m):
        tp = cm[c][c]
        fp = sum(cm[r][c] for r in range(m)) - tp
        fn = sum(cm[c][j] for j in range(m)) - tp
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * (r * p) / (r + p) if r + p else 0.0
        out["precision"].append(p)
        out["recall"].append(r)
        out["f1"].append(f)
    return out


def rbf_gram(A, B, gamma):
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    G = np.empty((len(A), len(B)))
    for i, a in enumerate(A):
        for j, b in enumerate(B):
            G[i, j] = math.exp(-gamma * float(((a - b) ** 2).sum()))
    return G


def _project(v, y, C):
    """Euclidean projection onto {0 <= a <= C, y.a = 0}.

    r(mu) = y . clip(v - mu*y, 0, C) is piecewise linear and non-increasing;
    evaluate it at every breakpoint, then interpolate inside the bracketing piece.
    """
    mus = np.sort(np.concatenate([v * y, (v - C) * y]))
    r = (np.clip(v[None, :] - mus[:, None] * y[None, :], 0.0, C) * y[None, :]).sum(axis=1)
    if r[0] <= 0:
        mu = mus[0]
    elif r[-1] >= 0:
        mu = mus[-1]
    else:
        i = int(np.flatnonzero(r <= 0)[0])
        m0, m1, r0, r1 = mus[i - 1], mus[i], r[i - 1], r[i]
        mu = m0 if r0 == r1 else m0 + (m1 - m0) * r0 / (r0 - r1)
    return np.clip(v - mu * y, 0.0, C)


def svm_dual_oracle(K, y, C, iters=20000):
    """Accelerated projected gradient on min 1/2 a'Qa - e'a; returns (alpha, bias, dual objective)."""
    y = np.asarray(y, dtype=np.float64)
    Q = (y[:, None] * y[None, :]) * K
    L = float(np.linalg.eigvalsh(Q).max()) + 1e-12
    a = np.zeros(len(y))
    z, t = a.copy(), 1.0
    for _ in range(iters):
        grad = Q @ z - 1.0
        a_new = _project(z - grad / L, y, C)
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        z = a_new + ((t - 1) / t_new) * (a_new - a)
        if np.max(np.abs(a_new - a)) < 1e-14 * max(1.0, C):
            a = a_new
            break
        a, t = a_new, t_new
    objective = float(a.sum() - 0.5 * a @ Q @ a)
    # bias from the KKT conditions: free vectors sit exactly on the margin
    f_no_bias = K @ (a * y)
    tol = 1e-6 * C
    free = (a > tol) & (a < C - tol)
    if free.any():
        b = float(np.mean(y[free] - f_no_bias[free]))
    else:
        lower, upper = -math.inf, math.inf
        for i in range(len(y)):
            g = y[i] - f_no_bias[i]
            at_zero = a[i] <= tol
            if (y[i] > 0) == at_zero:
                lower = max(lower, g)
            else:
                upper = min(upper, g)
        b = 0.5 * (lower + upper)
    return a, b, objective


def dual_value(alpha, y, K):
    ay = np.asarray(alpha) * np.asarray(y)
    return float(np.sum(alpha) - 0.5 * ay @ K @ ay)


def stratified_counts(n, ratio):
    """Round-half-up train size for a category of ``n`` images."""
    return int(math.floor(ratio * n + 0.5))


def all_two_partitions(n):
    return [s for s in itertools.product([0, 1], repeat=n) if 0 < sum(s) < n]
