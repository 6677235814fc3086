"""Compiled per-sample AdaGrad pass over plain numpy views of the tables.

One call walks a whole epoch of labeled triples in order, so the result is
the same as feeding them one at a time to ``sgd_update``. Under Hogwild the
views point into shared memory and every worker runs its own pass.
"""

import math

import numpy as np
from numba import njit

from .config import MODEL_KINDS

KIND_CODES = {kind: code for code, kind in enumerate(MODEL_KINDS)}
ANALOGY, DISTMULT, COMPLEX, HOLE = (KIND_CODES[k] for k in ("analogy", "distmult", "complex", "hole"))

OK, LOSS_DIVERGED, GRADIENT_DIVERGED = 0, 1, 2
DIVERGED_DETAIL = {LOSS_DIVERGED: "loss", GRADIENT_DIVERGED: "gradient"}


@njit(cache=True, nogil=True)
def _score_grad_blocks(s, r, o, n, gs, go, gr):
    m = s.shape[0]
    phi = 0.0
    for i in range(n):
        phi += r[i] * (s[i] * o[i])
        gs[i] = r[i] * o[i]
        go[i] = r[i] * s[i]
        gr[i] = s[i] * o[i]
    for i in range(n, m, 2):
        p1, p2 = s[i], s[i + 1]
        q1, q2 = o[i], o[i + 1]
        x, y = r[i], r[i + 1]
        dx = p1 * q1 + p2 * q2
        dy = p2 * q1 - p1 * q2
        phi += x * dx + y * dy
        gs[i] = x * q1 - y * q2
        gs[i + 1] = y * q1 + x * q2
        go[i] = x * p1 + y * p2
        go[i + 1] = x * p2 - y * p1
        gr[i] = dx
        gr[i + 1] = dy
    return phi


@njit(cache=True, nogil=True)
def _score_grad_complex(s, r, o, gs, go, gr):
    # (Im, Re) pairs; phi = Re(s * r * conj(o))
    m = s.shape[0]
    phi = 0.0
    for i in range(0, m, 2):
        s_im, s_re = s[i], s[i + 1]
        r_im, r_re = r[i], r[i + 1]
        o_im, o_re = o[i], o[i + 1]
        sr_re = s_re * r_re - s_im * r_im
        sr_im = s_re * r_im + s_im * r_re
        phi += sr_re * o_re + sr_im * o_im
        gs[i] = r_re * o_im - r_im * o_re
        gs[i + 1] = r_re * o_re + r_im * o_im
        gr[i] = s_re * o_im - s_im * o_re
        gr[i + 1] = s_re * o_re + s_im * o_im
        go[i] = sr_im
        go[i + 1] = sr_re
    return phi


@njit(cache=True, nogil=True)
def _score_grad_hole(s, r, o, gs, go, gr):
    # C[i][j] = r[(i - j) mod m]
    m = s.shape[0]
    phi = 0.0
    for i in range(m):
        gs[i] = 0.0
        go[i] = 0.0
        gr[i] = 0.0
    for i in range(m):
        for j in range(m):
            k = (i - j) % m
            phi += s[i] * r[k] * o[j]
            gs[i] += r[k] * o[j]
            go[j] += s[i] * r[k]
            gr[k] += s[i] * o[j]
    return phi


@njit(cache=True, nogil=True)
def score_grad(kind, n, s, r, o, gs, go, gr):
    """Score of one triple; writes the three unscaled gradients in place."""
    if kind == HOLE:
        return _score_grad_hole(s, r, o, gs, go, gr)
    if kind == COMPLEX:
        return _score_grad_complex(s, r, o, gs, go, gr)
    if kind == DISTMULT:
        return _score_grad_blocks(s, r, o, s.shape[0], gs, go, gr)
    return _score_grad_blocks(s, r, o, n, gs, go, gr)


@njit(cache=True, nogil=True)
def _all_finite(v):
    for i in range(v.shape[0]):
        if not math.isfinite(v[i]):
            return False
    return True


@njit(cache=True, nogil=True)
def _adagrad_row(row, sums, g, lr, l2, eps):
    for d in range(row.shape[0]):
        step = g[d] + l2 * row[d]
        # another worker may have grown the shared sum meanwhile; the local value still covers step^2
        acc = sums[d] + step * step
        sums[d] = acc
        row[d] += -lr * step / (math.sqrt(acc) + eps)


@njit(cache=True, nogil=True)
def adagrad_pass(kind, n, entity, relation, entity_sum, relation_sum, samples, labels, lr, l2, eps):
    """Softplus loss and one AdaGrad step per labeled triple, in order.

    Returns ``(loss_sum, status, position)``; a non-``OK`` status stops the pass
    at ``position`` before any update from that triple is applied.
    """
    m = entity.shape[1]
    gs = np.empty(m)
    go = np.empty(m)
    gr = np.empty(m)
    loss_sum = 0.0
    for t in range(samples.shape[0]):
        s, r, o = samples[t, 0], samples[t, 1], samples[t, 2]
        y = labels[t]
        z = -y * score_grad(kind, n, entity[s], relation[r], entity[o], gs, go, gr)
        if not math.isfinite(z):
            return loss_sum, LOSS_DIVERGED, t
        loss_sum += max(z, 0.0) + math.log1p(math.exp(-abs(z)))
        # -y * sigmoid(z)
        if z >= 0:
            scale = -y / (1.0 + math.exp(-z))
        else:
            e = math.exp(z)
            scale = -y * e / (1.0 + e)
        for d in range(m):
            gs[d] *= scale
            go[d] *= scale
            gr[d] *= scale
        if not (_all_finite(gs) and _all_finite(go) and _all_finite(gr)):
            return loss_sum, GRADIENT_DIVERGED, t
        if s == o:
            for d in range(m):
                gs[d] += go[d]
            _adagrad_row(entity[s], entity_sum[s], gs, lr, l2, eps)
        else:
            _adagrad_row(entity[s], entity_sum[s], gs, lr, l2, eps)
            _adagrad_row(entity[o], entity_sum[o], go, lr, l2, eps)
        _adagrad_row(relation[r], relation_sum[r], gr, lr, l2, eps)
    return loss_sum, OK, -1


def warm_up():
    """Compile every kernel path on a throwaway table."""
    table = np.zeros((2, 2))
    samples = np.zeros((1, 3), dtype=np.int64)
    labels = np.ones(1)
    for code in KIND_CODES.values():
        adagrad_pass(code, 0, table.copy(), table.copy(), table.copy(), table.copy(), samples, labels, 0.1, 0.0, 1e-8)
