"""Independent reference implementations used to cross-check the package."""

import math

import numpy as np


def knn_oracle(points, k):
    """Exhaustive pairwise sort: (distance, index) keys, Python sum of |differences|."""
    pts = [list(map(float, np.atleast_1d(p))) for p in points]
    n = len(pts)
    kk = min(k, n - 1)
    edges = []
    for i in range(n):
        cand = sorted((sum(abs(a - b) for a, b in zip(pts[i], pts[j])), j) for j in range(n) if j != i)
        edges += [(i, j) for _, j in cand[:kk]]
    return edges


def softmax_list(logits):
    m = max(logits)
    e = [math.exp(v - m) for v in logits]
    s = sum(e)
    return [v / s for v in e]


def population_std(values):
    mu = sum(values) / len(values)
    return math.sqrt(sum((v - mu) ** 2 for v in values) / len(values))


def ols_ar(series, p):
    """AR(p) by solving the least-squares problem with numpy's lstsq."""
    y = np.asarray(series, dtype=float)
    rows = [[1.0] + [y[t - i] for i in range(1, p + 1)] for t in range(p, len(y))]
    return np.linalg.lstsq(np.array(rows), y[p:], rcond=None)[0]
