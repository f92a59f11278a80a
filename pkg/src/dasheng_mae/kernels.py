"""Hot inner loops, each in two flavours.

``*_nb`` functions are numba-compiled, ``*_np`` functions are plain numpy.
The un-suffixed names are bound to one flavour according to
:data:`dasheng_mae._accel.USE_NUMBA`. Both flavours are importable directly so
tests and ``benchmarks/`` can compare them.

All row-wise kernels take 2-D C-contiguous arrays; callers reshape.
"""

import math

import numpy as np
from scipy.special import erf as _erf

from ._accel import USE_NUMBA, _HAVE_NUMBA, njit

if _HAVE_NUMBA:
    from numba import prange
else:  # pragma: no cover
    prange = range

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# LayerNorm over the last axis
# ---------------------------------------------------------------------------


def layernorm_fwd_np(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd_np(dy, xhat, rstd, gamma):
    d = xhat.shape[1]
    dxhat = dy * gamma
    dgamma = (dy * xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dx = (rstd[:, None] / d) * (
        d * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
    )
    return dx.astype(dy.dtype, copy=False), dgamma, dbeta


@njit(parallel=True)
def layernorm_fwd_nb(x, gamma, beta, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in prange(n):
        m = 0.0
        for j in range(d):
            m += x[i, j]
        m /= d
        v = 0.0
        for j in range(d):
            c = x[i, j] - m
            v += c * c
        v /= d
        r = 1.0 / math.sqrt(v + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - m) * r
            xhat[i, j] = h
            y[i, j] = h * gamma[j] + beta[j]
    return y, xhat, rstd


@njit(parallel=True)
def _layernorm_dx_nb(dy, xhat, rstd, gamma):
    n, d = dy.shape
    dx = np.empty_like(dy)
    for i in prange(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            g = dy[i, j] * gamma[j]
            s1 += g
            s2 += g * xhat[i, j]
        scale = rstd[i] / d
        for j in range(d):
            dx[i, j] = scale * (d * dy[i, j] * gamma[j] - s1 - xhat[i, j] * s2)
    return dx


@njit
def _layernorm_dparams_nb(dy, xhat):
    n, d = dy.shape
    dgamma = np.zeros(d, dtype=dy.dtype)
    dbeta = np.zeros(d, dtype=dy.dtype)
    for i in range(n):
        for j in range(d):
            dgamma[j] += dy[i, j] * xhat[i, j]
            dbeta[j] += dy[i, j]
    return dgamma, dbeta


def layernorm_bwd_nb(dy, xhat, rstd, gamma):
    dx = _layernorm_dx_nb(dy, xhat, rstd, gamma)
    dgamma, dbeta = _layernorm_dparams_nb(dy, xhat)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# Exact (erf) GeLU
# ---------------------------------------------------------------------------


def gelu_fwd_np(x):
    return (0.5 * x * (1.0 + _erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_bwd_np(x, dy):
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return (dy * (cdf + x * pdf)).astype(dy.dtype, copy=False)


@njit
def gelu_fwd_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out.reshape(x.shape)


@njit
def gelu_bwd_nb(x, dy):
    xf = x.ravel()
    gf = dy.ravel()
    out = np.empty_like(gf)
    for i in range(xf.size):
        v = xf[i]
        cdf = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
        pdf = _INV_SQRT2PI * math.exp(-0.5 * v * v)
        out[i] = gf[i] * (cdf + v * pdf)
    return out.reshape(dy.shape)


# ---------------------------------------------------------------------------
# Softmax over the last axis
# ---------------------------------------------------------------------------


def softmax_fwd_np(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd_np(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


@njit
def softmax_fwd_nb(x):
    n, d = x.shape
    y = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            e = math.exp(x[i, j] - m)
            y[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(d):
            y[i, j] *= inv
    return y


@njit
def softmax_bwd_nb(y, dy):
    n, d = y.shape
    dx = np.empty_like(y)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += dy[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = y[i, j] * (dy[i, j] - s)
    return dx


# ---------------------------------------------------------------------------
# Polyphase FIR resampling
# ---------------------------------------------------------------------------
#
# ``h`` is the prototype low-pass at the upsampled rate, shaped (up, taps):
# h[p, j] is the tap applied to input sample ``base - j`` for output phase p.
# ``x`` carries ``pad`` samples of edge extension on both sides.


def resample_poly_np(x, h, up, down, n_out, pad):
    taps = h.shape[1]
    half = (up * taps) // 2
    m = np.arange(n_out, dtype=np.int64) * down + half
    phase = m % up
    base = m // up + pad
    idx = base[:, None] - np.arange(taps)[None, :]
    return (x[idx] * h[phase]).sum(axis=1)


@njit
def resample_poly_nb(x, h, up, down, n_out, pad):
    taps = h.shape[1]
    half = (up * taps) // 2
    out = np.empty(n_out, dtype=np.float64)
    for n in range(n_out):
        m = n * down + half
        p = m % up
        b = m // up + pad
        acc = 0.0
        for j in range(taps):
            acc += x[b - j] * h[p, j]
        out[n] = acc
    return out


# ---------------------------------------------------------------------------
# k-NN vote over a precomputed similarity matrix
# ---------------------------------------------------------------------------
#
# Neighbours are ranked by descending similarity, equal similarities by
# ascending training index. The class with most votes among the top k wins;
# a vote tie goes to the tied class whose member ranks first.


def knn_vote_np(sims, labels, k, n_classes):
    n_test = sims.shape[0]
    preds = np.empty(n_test, dtype=np.int64)
    for i in range(n_test):
        order = np.argsort(-sims[i], kind="stable")[:k]
        votes = np.bincount(labels[order], minlength=n_classes)
        tied = votes == votes.max()
        for j in order:
            if tied[labels[j]]:
                preds[i] = labels[j]
                break
    return preds


@njit(parallel=True)
def knn_vote_nb(sims, labels, k, n_classes):
    n_test = sims.shape[0]
    preds = np.empty(n_test, dtype=np.int64)
    for i in prange(n_test):
        order = np.argsort(-sims[i], kind="mergesort")[:k]
        votes = np.zeros(n_classes, dtype=np.int64)
        for j in order:
            votes[labels[j]] += 1
        best = votes.max()
        for j in order:
            if votes[labels[j]] == best:
                preds[i] = labels[j]
                break
    return preds


if USE_NUMBA:
    layernorm_fwd, layernorm_bwd = layernorm_fwd_nb, layernorm_bwd_nb
    gelu_fwd, gelu_bwd = gelu_fwd_nb, gelu_bwd_nb
    # numpy's vectorised float32 exp outruns numba's scalar loop, so the forward stays on numpy
    softmax_fwd, softmax_bwd = softmax_fwd_np, softmax_bwd_nb
    resample_poly = resample_poly_nb
    knn_vote = knn_vote_nb
else:
    layernorm_fwd, layernorm_bwd = layernorm_fwd_np, layernorm_bwd_np
    gelu_fwd, gelu_bwd = gelu_fwd_np, gelu_bwd_np
    softmax_fwd, softmax_bwd = softmax_fwd_np, softmax_bwd_np
    resample_poly = resample_poly_np
    knn_vote = knn_vote_np
