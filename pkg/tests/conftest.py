import math

import numpy as np


def brute_force_knn(points, query, k):
    """Reference k-NN: full scan, sort by (squared distance, index)."""
    points = np.asarray(points)
    query = np.asarray(query)
    d2 = ((points - query[None, :]) ** 2).sum(axis=1)
    order = sorted(range(len(points)), key=lambda i: (d2[i], i))
    sel = order[: min(k, len(points))]
    return sel, [math.sqrt(d2[i]) for i in sel]


def random_cloud(seed, n, lo=0.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, (n, 3))


def reference_unbalanced_sinkhorn(C, eps, lam, iters):
    """Independent multiplicative-domain solver: uniform mass 1/n1 on both
    marginals, damped scaling updates."""
    n1, n2 = C.shape
    a = np.full(n1, 1.0 / n1)
    b = np.full(n2, 1.0 / n1)
    fi = lam / (lam + eps)
    K = np.exp(-C / eps)
    u = np.ones(n1)
    v = np.ones(n2)
    for _ in range(iters):
        u = (a / (K @ v)) ** fi
        v = (b / (K.T @ u)) ** fi
    return u[:, None] * K * v[None, :]


def reference_evaluate(pred, gt):
    """Straight-line recomputation of every flow metric."""
    e = np.sqrt(((pred - gt) ** 2).sum(axis=1))
    gn = np.sqrt((gt ** 2).sum(axis=1))
    rel_ok = gn > 0
    rel = np.where(rel_ok, e / np.where(rel_ok, gn, 1.0), 0.0)
    nepe = e[rel_ok] / gn[rel_ok]
    return {
        "epe": e.mean(),
        "nepe": nepe.mean() if rel_ok.any() else 0.0,
        "acc_strict": ((e < 0.05) | (rel_ok & (rel < 0.05))).mean(),
        "acc_relax": ((e < 0.10) | (rel_ok & (rel < 0.10))).mean(),
        "outliers": ((e > 0.30) | (rel_ok & (rel > 0.10))).mean(),
    }


def reference_nds(points, flows, k):
    """Per-point neighbor distance score via a full sort."""
    n = len(points)
    scores = np.empty(n)
    for i in range(n):
        d2 = ((points - points[i]) ** 2).sum(axis=1)
        order = sorted(range(n), key=lambda j: (d2[j], j))
        neigh = [j for j in order if j != i][:k]
        scores[i] = np.mean([((flows[i] - flows[j]) ** 2).sum() for j in neigh])
    return scores
