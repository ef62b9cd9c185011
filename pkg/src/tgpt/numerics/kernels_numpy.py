"""Pure numpy implementations of the per-element hot kernels.

This module and the compiled extension ``tgpt._ckernels`` expose the same
functions with the same signatures; ``tgpt.numerics.backend`` picks one at
import time.  Matrix multiplication is not here on purpose: both backends
leave it to numpy's BLAS.

Conventions shared by both backends:

- row-wise kernels take C-contiguous 2-D arrays shaped (rows, columns),
- elementwise kernels take C-contiguous 1-D arrays,
- float inputs share one dtype (float32 or float64) and outputs keep it,
- backward kernels return gradients, except `adamw_update` which mutates
  its parameter and moment buffers in place.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

NAME = "numpy"


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    y = xhat * gamma + beta
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype), rstd.astype(x.dtype)


def layer_norm_bwd(dy, x, gamma, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dbeta = dy.sum(axis=0)
    dgamma = (dy * xhat).sum(axis=0)
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx.astype(x.dtype, copy=False), dgamma, dbeta


def softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(dy, y):
    dot = (dy * y).sum(axis=1, keepdims=True)
    return y * (dy - dot)


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(dy, x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return dy * (cdf + x * pdf)


def l2norm_fwd(x, eps):
    norm = np.sqrt((x * x).sum(axis=1))
    inv = 1.0 / np.maximum(norm, eps)
    return x * inv[:, None], inv


def l2norm_bwd(dy, y, inv):
    dot = (dy * y).sum(axis=1, keepdims=True)
    return (dy - y * dot) * inv[:, None]


def cross_entropy_fwd(logits, targets):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(logits.shape[0])
    nll = lse - shifted[rows, targets]
    probs = np.exp(shifted - lse[:, None])
    return nll.astype(logits.dtype, copy=False), probs.astype(logits.dtype, copy=False)


def cross_entropy_bwd(probs, targets, rowscale):
    dlogits = probs * rowscale[:, None]
    rows = np.arange(probs.shape[0])
    dlogits[rows, targets] -= rowscale
    return dlogits


def adamw_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay):
    # Decoupled weight decay shrinks the parameter before the moment step.
    if weight_decay != 0.0:
        p *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    p -= lr * mhat / (np.sqrt(vhat) + eps)
