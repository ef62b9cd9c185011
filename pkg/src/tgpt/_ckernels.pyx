# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled per-element kernels.

Same surface as `tgpt.numerics.kernels_numpy`, with the multi-pass numpy
array expressions fused into single C loops.  Matrix multiplication stays
with numpy's BLAS in both backends.
"""

import numpy as np

from libc.math cimport erf, exp, log, pow, sqrt

ctypedef fused floating:
    float
    double

NAME = "cython"

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


cdef inline object _dtype_of(bint is_double):
    return np.float64 if is_double else np.float32


def layer_norm_fwd(floating[:, ::1] x, floating[::1] gamma, floating[::1] beta,
                   double eps):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], r, c
    dtype = _dtype_of(floating is double)
    y_np = np.empty((R, C), dtype=dtype)
    mean_np = np.empty(R, dtype=dtype)
    rstd_np = np.empty(R, dtype=dtype)
    cdef floating[:, ::1] y = y_np
    cdef floating[::1] mean = mean_np
    cdef floating[::1] rstd = rstd_np
    cdef double s, mu, var, rs, d
    with nogil:
        for r in range(R):
            s = 0.0
            for c in range(C):
                s += x[r, c]
            mu = s / C
            var = 0.0
            for c in range(C):
                d = x[r, c] - mu
                var += d * d
            var /= C
            rs = 1.0 / sqrt(var + eps)
            mean[r] = <floating> mu
            rstd[r] = <floating> rs
            for c in range(C):
                y[r, c] = <floating> (((x[r, c] - mu) * rs) * gamma[c] + beta[c])
    return y_np, mean_np, rstd_np


def layer_norm_bwd(floating[:, ::1] dy, floating[:, ::1] x, floating[::1] gamma,
                   floating[::1] mean, floating[::1] rstd):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], r, c
    dtype = _dtype_of(floating is double)
    dx_np = np.empty((R, C), dtype=dtype)
    dgamma_np = np.zeros(C, dtype=dtype)
    dbeta_np = np.zeros(C, dtype=dtype)
    cdef floating[:, ::1] dx = dx_np
    cdef floating[::1] dgamma = dgamma_np
    cdef floating[::1] dbeta = dbeta_np
    cdef double mu, rs, xhat, dxhat, m1, m2
    with nogil:
        for r in range(R):
            mu = mean[r]
            rs = rstd[r]
            m1 = 0.0
            m2 = 0.0
            for c in range(C):
                xhat = (x[r, c] - mu) * rs
                dxhat = dy[r, c] * gamma[c]
                m1 += dxhat
                m2 += dxhat * xhat
                dgamma[c] += <floating> (dy[r, c] * xhat)
                dbeta[c] += dy[r, c]
            m1 /= C
            m2 /= C
            for c in range(C):
                xhat = (x[r, c] - mu) * rs
                dxhat = dy[r, c] * gamma[c]
                dx[r, c] = <floating> ((dxhat - m1 - xhat * m2) * rs)
    return dx_np, dgamma_np, dbeta_np


def softmax_fwd(floating[:, ::1] x):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], r, c
    y_np = np.empty((R, C), dtype=_dtype_of(floating is double))
    cdef floating[:, ::1] y = y_np
    cdef double hi, s
    with nogil:
        for r in range(R):
            hi = x[r, 0]
            for c in range(1, C):
                if x[r, c] > hi:
                    hi = x[r, c]
            s = 0.0
            for c in range(C):
                y[r, c] = <floating> exp(x[r, c] - hi)
                s += y[r, c]
            for c in range(C):
                y[r, c] = <floating> (y[r, c] / s)
    return y_np


def softmax_bwd(floating[:, ::1] dy, floating[:, ::1] y):
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1], r, c
    dx_np = np.empty((R, C), dtype=_dtype_of(floating is double))
    cdef floating[:, ::1] dx = dx_np
    cdef double dot
    with nogil:
        for r in range(R):
            dot = 0.0
            for c in range(C):
                dot += dy[r, c] * y[r, c]
            for c in range(C):
                dx[r, c] = <floating> (y[r, c] * (dy[r, c] - dot))
    return dx_np


def gelu_fwd(floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    y_np = np.empty(n, dtype=_dtype_of(floating is double))
    cdef floating[::1] y = y_np
    with nogil:
        for i in range(n):
            y[i] = <floating> (0.5 * x[i] * (1.0 + erf(x[i] * INV_SQRT2)))
    return y_np


def gelu_bwd(floating[::1] dy, floating[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    dx_np = np.empty(n, dtype=_dtype_of(floating is double))
    cdef floating[::1] dx = dx_np
    cdef double cdf, pdf
    with nogil:
        for i in range(n):
            cdf = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
            pdf = exp(-0.5 * x[i] * x[i]) * INV_SQRT2PI
            dx[i] = <floating> (dy[i] * (cdf + x[i] * pdf))
    return dx_np


def l2norm_fwd(floating[:, ::1] x, double eps):
    cdef Py_ssize_t R = x.shape[0], C = x.shape[1], r, c
    dtype = _dtype_of(floating is double)
    y_np = np.empty((R, C), dtype=dtype)
    inv_np = np.empty(R, dtype=dtype)
    cdef floating[:, ::1] y = y_np
    cdef floating[::1] inv = inv_np
    cdef double s, nrm
    with nogil:
        for r in range(R):
            s = 0.0
            for c in range(C):
                s += x[r, c] * x[r, c]
            nrm = sqrt(s)
            if nrm < eps:
                nrm = eps
            inv[r] = <floating> (1.0 / nrm)
            for c in range(C):
                y[r, c] = <floating> (x[r, c] * inv[r])
    return y_np, inv_np


def l2norm_bwd(floating[:, ::1] dy, floating[:, ::1] y, floating[::1] inv):
    cdef Py_ssize_t R = y.shape[0], C = y.shape[1], r, c
    dx_np = np.empty((R, C), dtype=_dtype_of(floating is double))
    cdef floating[:, ::1] dx = dx_np
    cdef double dot
    with nogil:
        for r in range(R):
            dot = 0.0
            for c in range(C):
                dot += dy[r, c] * y[r, c]
            for c in range(C):
                dx[r, c] = <floating> ((dy[r, c] - y[r, c] * dot) * inv[r])
    return dx_np


def cross_entropy_fwd(floating[:, ::1] logits, long long[::1] targets):
    cdef Py_ssize_t R = logits.shape[0], C = logits.shape[1], r, c
    dtype = _dtype_of(floating is double)
    nll_np = np.empty(R, dtype=dtype)
    probs_np = np.empty((R, C), dtype=dtype)
    cdef floating[::1] nll = nll_np
    cdef floating[:, ::1] probs = probs_np
    cdef double hi, s, lse
    with nogil:
        for r in range(R):
            hi = logits[r, 0]
            for c in range(1, C):
                if logits[r, c] > hi:
                    hi = logits[r, c]
            s = 0.0
            for c in range(C):
                probs[r, c] = <floating> exp(logits[r, c] - hi)
                s += probs[r, c]
            lse = log(s)
            nll[r] = <floating> (lse - (logits[r, targets[r]] - hi))
            for c in range(C):
                probs[r, c] = <floating> (probs[r, c] / s)
    return nll_np, probs_np


def cross_entropy_bwd(floating[:, ::1] probs, long long[::1] targets,
                      floating[::1] rowscale):
    cdef Py_ssize_t R = probs.shape[0], C = probs.shape[1], r, c
    dl_np = np.empty((R, C), dtype=_dtype_of(floating is double))
    cdef floating[:, ::1] dl = dl_np
    with nogil:
        for r in range(R):
            for c in range(C):
                dl[r, c] = probs[r, c] * rowscale[r]
            dl[r, targets[r]] -= rowscale[r]
    return dl_np


def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    _adamw_flat(p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1),
                step, lr, beta1, beta2, eps, weight_decay)


def _adamw_flat(floating[::1] p, floating[::1] g, floating[::1] m,
                floating[::1] v, Py_ssize_t step, double lr, double beta1,
                double beta2, double eps, double weight_decay):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double bc1 = 1.0 - pow(beta1, step)
    cdef double bc2 = 1.0 - pow(beta2, step)
    cdef double decay = 1.0 - lr * weight_decay
    cdef double gi, mi, vi, mhat, vhat
    with nogil:
        for i in range(n):
            if weight_decay != 0.0:
                p[i] = <floating> (p[i] * decay)
            gi = g[i]
            mi = beta1 * m[i] + (1.0 - beta1) * gi
            vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
            m[i] = <floating> mi
            v[i] = <floating> vi
            mhat = mi / bc1
            vhat = vi / bc2
            p[i] = <floating> (p[i] - lr * mhat / (sqrt(vhat) + eps))
