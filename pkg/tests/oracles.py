"""Independent brute-force reference implementations used only by tests.

Nothing here shares numerical kernels with the package: gradients come from
finite differences of the loss, sums are plain Python loops, and SGD traces
are re-derived step by step.  Oracles only ever run on toy instances.
"""

from __future__ import annotations

import numpy as np

from partialfed.core import ParamBlock


def fd_gradient(loss_fn, blocks, eps=1e-6):
    """Central-difference gradient of loss_fn over a list of ParamBlocks."""
    grads = []
    for bi, block in enumerate(blocks):
        g = np.zeros(block.values.size)
        for j in range(block.values.size):
            plus = [b.copy() for b in blocks]
            minus = [b.copy() for b in blocks]
            plus[bi].values[j] += eps
            minus[bi].values[j] -= eps
            g[j] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * eps)
        grads.append(g)
    return grads


def oracle_sgd_trace(spec, g, l, batches, rate, steps, *, part):
    """Naive SGD on one parameter part, gradients re-derived from the loss
    by finite differences at every step.  Returns the parameter trace
    (flattened vectors), starting at the initial point.

    part: "local" steps l with g frozen; "global" steps g with l frozen.
    """
    g = [b.copy() for b in g]
    l = [b.copy() for b in l]
    trace = []

    def flat(blocks):
        return np.concatenate([b.values for b in blocks]) if blocks else np.zeros(0)

    trace.append(flat(l if part == "local" else g))
    for s in range(steps):
        batch = batches[s % len(batches)]
        if part == "local":
            grads = fd_gradient(lambda probe: spec.loss(g, probe, batch), l)
            l = [
                ParamBlock(b.name, b.values - rate * gr, b.shape)
                for b, gr in zip(l, grads)
            ]
            trace.append(flat(l))
        else:
            grads = fd_gradient(lambda probe: spec.loss(probe, l, batch), g)
            g = [
                ParamBlock(b.name, b.values - rate * gr, b.shape)
                for b, gr in zip(g, grads)
            ]
            trace.append(flat(g))
    return trace


def oracle_weighted_mean(deltas, weights):
    """Straight-line weighted mean: sum(w_i * d_i) / sum(w_i), python loop."""
    total = 0.0
    for w in weights:
        total += w
    out = [0.0] * len(deltas[0])
    for d, w in zip(deltas, weights):
        for j, v in enumerate(d):
            out[j] += (w / total) * v
    return np.asarray(out)


def oracle_meta_gradient(spec, g, dataset, hyper, rebuild_local, eps=1e-5):
    """Central differences of the composite map
    g -> query_loss(g, R(support, g)), rebuilding the local parameters from
    the same initialization for every probe."""
    query = dataset.batch(dataset.query_idx)
    out = []
    for bi, block in enumerate(g):
        for j in range(block.values.size):
            vals = []
            for sign in (+1.0, -1.0):
                probe = [b.copy() for b in g]
                probe[bi].values[j] += sign * eps
                l = rebuild_local(probe)
                vals.append(spec.loss(probe, l, query))
            out.append((vals[0] - vals[1]) / (2.0 * eps))
    return np.asarray(out)


def oracle_mf_two_step_update(q, p, items, ratings, eta_u, batches):
    """Hand-rolled global-factor SGD for the rating model, written with
    explicit loops: two (or more) steps over given batch index lists.
    Returns the updated item matrix."""
    q = np.array(q, dtype=np.float64, copy=True)
    p = np.asarray(p, dtype=np.float64)
    for bidx in batches:
        grad_rows = {}
        n = len(bidx)
        for i in bidx:
            j = int(items[i])
            pred = 0.0
            for k in range(len(p)):
                pred += p[k] * q[j, k]
            err = pred - ratings[i]
            row = grad_rows.setdefault(j, np.zeros(len(p)))
            for k in range(len(p)):
                row[k] += (2.0 / n) * err * p[k]
        for j, row in grad_rows.items():
            for k in range(len(p)):
                q[j, k] -= eta_u * row[k]
    return q


def oracle_mf_centralized_step(q, p_rows, owners, items, ratings, rate):
    """One full-batch joint SGD step on pooled rating data, explicit loops;
    returns (q', p_rows')."""
    q = np.array(q, dtype=np.float64, copy=True)
    p = np.array(p_rows, dtype=np.float64, copy=True)
    n = len(ratings)
    gq = np.zeros_like(q)
    gp = np.zeros_like(p)
    for i in range(n):
        u, j = int(owners[i]), int(items[i])
        pred = 0.0
        for k in range(p.shape[1]):
            pred += p[u, k] * q[j, k]
        err = pred - ratings[i]
        for k in range(p.shape[1]):
            gq[j, k] += (2.0 / n) * err * p[u, k]
            gp[u, k] += (2.0 / n) * err * q[j, k]
    return q - rate * gq, p - rate * gp
