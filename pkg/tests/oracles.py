"""Independent reference implementations used to check the real kernels.

Everything here trades speed for obviousness: nested loops, high-precision
arithmetic via mpmath, O(n^2) pair counting. None of it imports from the
package's kernel internals, so agreement is meaningful.
"""

from __future__ import annotations

import mpmath as mp
import numpy as np


def fd_grad(loss_fn, arr: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar loss wrt arr (mutated in place,
    restored before return). loss_fn() must recompute the loss from scratch."""
    flat = arr.reshape(-1)
    g = np.empty_like(flat)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + eps
        up = loss_fn()
        flat[i] = keep - eps
        down = loss_fn()
        flat[i] = keep
        g[i] = (up - down) / (2.0 * eps)
    return g.reshape(arr.shape)


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute discrepancy scaled by the largest gradient magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def conv2d_ref(x, w, b, stride, pads):
    """Nested-loop cross-correlation; x NCHW, w (O,C,kh,kw), explicit pads."""
    sh, sw = stride
    (pt, pb), (pl, pr) = pads
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    n, c, h, wd = xp.shape
    o, _, kh, kw = w.shape
    oh = (h - kh) // sh + 1
    ow = (wd - kw) // sw + 1
    y = np.zeros((n, o, oh, ow), dtype=np.float64)
    for img in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[img, ch, i * sh + u, j * sw + v] * w[f, ch, u, v]
                    y[img, f, i, j] = acc + (b[f] if b is not None else 0.0)
    return y


def pool2d_ref(x, kind, window, stride):
    kh, kw = window
    sh, sw = stride
    n, c, h, wd = x.shape
    oh = (h - kh) // sh + 1
    ow = (wd - kw) // sw + 1
    y = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for img in range(n):
        for ch in range(c):
            for i in range(oh):
                for j in range(ow):
                    win = x[img, ch, i * sh:i * sh + kh, j * sw:j * sw + kw]
                    y[img, ch, i, j] = win.max() if kind == "max" else win.mean()
    return y


def lse_pool_ref(x):
    """log(mean(exp(.))) over each channel's spatial cells, summed in mpmath
    so the usual max-subtraction trick is not needed for stability."""
    n, c, h, w = x.shape
    y = np.empty((n, c), dtype=np.float64)
    for img in range(n):
        for ch in range(c):
            terms = [mp.exp(mp.mpf(float(v))) for v in x[img, ch].reshape(-1)]
            y[img, ch] = float(mp.log(mp.fsum(terms) / (h * w)))
    return y


def batchnorm_ref(x, gamma, beta, eps):
    """Training-mode forward, one channel at a time with scalar loops for the
    moments, so nothing is shared with the vectorized version."""
    n, c, h, w = x.shape
    y = np.empty_like(x)
    means = np.empty(c)
    variances = np.empty(c)
    for ch in range(c):
        vals = [x[i, ch, a, b] for i in range(n) for a in range(h) for b in range(w)]
        m = sum(vals) / len(vals)
        v = sum((t - m) ** 2 for t in vals) / len(vals)
        means[ch] = m
        variances[ch] = v
        y[:, ch] = gamma[ch] * (x[:, ch] - m) / np.sqrt(v + eps) + beta[ch]
    return y, means, variances


def softmax_ref(x: np.ndarray) -> np.ndarray:
    """Row softmax in 50-digit arithmetic, rounded back to float64."""
    with mp.workdps(50):
        out = np.empty_like(x, dtype=np.float64)
        for r in range(x.shape[0]):
            es = [mp.e ** mp.mpf(float(v)) for v in x[r]]
            z = mp.fsum(es)
            out[r] = [float(e / z) for e in es]
    return out


def cross_entropy_ref(logits, labels, weights) -> float:
    """Weighted-mean negative log softmax probability, 50-digit arithmetic."""
    with mp.workdps(50):
        total = mp.mpf(0)
        wsum = mp.mpf(0)
        for r in range(logits.shape[0]):
            es = [mp.e ** mp.mpf(float(v)) for v in logits[r]]
            z = mp.fsum(es)
            p = es[int(labels[r])] / z
            wr = mp.mpf(float(weights[r]))
            total += wr * (-mp.log(p))
            wsum += wr
        return float(total / wsum)


def auc_pairwise(scores, labels) -> float:
    """O(n^2) Mann-Whitney AUC: fraction of (pos, neg) pairs ranked correctly,
    ties worth half. Exact rational arithmetic via integer half-credits."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        raise ValueError("need at least one positive and one negative")
    credit = 0  # in halves, so ties stay exact
    for p in pos:
        for q in neg:
            if p > q:
                credit += 2
            elif p == q:
                credit += 1
    return credit / (2.0 * len(pos) * len(neg))
