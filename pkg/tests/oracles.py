"""Independent reference implementations used as test oracles.

These are written for clarity, not speed, and share no code with the
package beyond plain numpy.
"""
import math

import numpy as np


def scalar_mlp_loss(weights, biases, x, labels, weight_decay=0.0):
    """Mean softmax cross-entropy of an FC ReLU network, with explicit loops."""
    total = 0.0
    n_layers = len(weights)
    for s in range(len(labels)):
        act = [float(v) for v in np.asarray(x[s]).reshape(-1)]
        for l in range(n_layers):
            w, b = weights[l], biases[l]
            out = []
            for j in range(w.shape[1]):
                z = b[j]
                for i in range(w.shape[0]):
                    z += act[i] * w[i, j]
                out.append(z if l == n_layers - 1 else max(z, 0.0))
            act = out
        m = max(act)
        lse = m + math.log(sum(math.exp(v - m) for v in act))
        total += lse - act[labels[s]]
    penalty = 0.5 * weight_decay * sum(float((w * w).sum()) for w in weights)
    return total / len(labels) + penalty


def sorted_topk(scores, k, candidates):
    """Top-k by descending score, ties to the lower index, via a full sort of
    (−score, index) pairs."""
    pairs = sorted((-float(scores[i]), int(i)) for i in candidates)
    return sorted(i for _, i in pairs[:k])


def drop_set(values, mask, k):
    """k active positions of smallest |value|, ties to the lower index."""
    flat_v, flat_m = values.reshape(-1), mask.reshape(-1)
    active = [i for i in range(flat_v.size) if flat_m[i]]
    return sorted_topk(-np.abs(flat_v), k, active)


def bisect_er_allocation(num_params, factors, S, dense=(), iters=200):
    """Solve for eps by bisection with densities min(1, eps * r)."""
    n = np.asarray(num_params, dtype=float)
    r = np.asarray(factors, dtype=float)
    target = (1.0 - S) * n.sum()
    fixed = np.zeros(len(n), dtype=bool)
    fixed[list(dense)] = True

    def nnz(eps):
        d = np.where(fixed, 1.0, np.minimum(1.0, eps * r))
        return (d * n).sum()

    lo, hi = 0.0, 1.0
    while nnz(hi) < target and hi < 1e12:
        hi *= 2
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if nnz(mid) < target:
            lo = mid
        else:
            hi = mid
    eps = 0.5 * (lo + hi)
    return 1.0 - np.where(fixed, 1.0, np.minimum(1.0, eps * r))


def bezier_point(points, t):
    """de Casteljau evaluation."""
    pts = [np.asarray(p, dtype=float) for p in points]
    while len(pts) > 1:
        pts = [(1 - t) * a + t * b for a, b in zip(pts, pts[1:])]
    return pts[0]


def brute_force_compaction(masks):
    """Live neuron counts per group by repeated single removals until stable."""
    m = [mk.copy() for mk in masks]
    sizes = [m[0].shape[0]] + [mk.shape[1] for mk in m]
    alive = [set(range(s)) for s in sizes]
    while True:
        changed = False
        for g in range(len(m)):
            for j in sorted(alive[g]):
                out_deg = m[g][j].sum()
                in_deg = m[g - 1][:, j].sum() if g > 0 else 1
                if out_deg == 0 or in_deg == 0:
                    alive[g].discard(j)
                    m[g][j, :] = False
                    if g > 0:
                        m[g - 1][:, j] = False
                    changed = True
        if not changed:
            return [len(a) for a in alive]
