"""NumPy implementations of the hot kernels.

This module defines the reference semantics; the compiled extension in
``_core.pyx`` mirrors this surface exactly and the two are interchangeable.
All functions take and return C-contiguous float64 arrays and never mutate
their inputs.
"""

import numpy as np

NAME = "fallback"


def matmul(a, b):
    """a: [m,k] @ b: [k,n] -> [m,n]."""
    return np.ascontiguousarray(a @ b)


def matmul_nt(a, b):
    """a: [m,k] @ b.T where b: [n,k] -> [m,n]."""
    return np.ascontiguousarray(a @ b.T)


def matmul_tn(a, b):
    """a.T @ b where a: [k,m], b: [k,n] -> [m,n]."""
    return np.ascontiguousarray(a.T @ b)


def softmax_rows(x):
    """Row-wise softmax of x: [m,n], max-shifted for stability."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy):
    """Gradient wrt the softmax input given output y and upstream gy."""
    inner = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - inner)


def layer_norm_forward(x, gamma, beta, eps):
    """Normalize each row of x: [m,d] to zero mean / unit variance, then scale.

    Returns (y, xhat, inv_std); xhat and inv_std are cached for the backward
    pass. Variance is the biased (1/d) estimator.
    """
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std[:, None]
    y = xhat * gamma + beta
    return y, xhat, inv_std


def layer_norm_backward(xhat, inv_std, gamma, gy):
    """Gradients (dx, dgamma, dbeta) given the cached forward intermediates."""
    d = xhat.shape[1]
    dxhat = gy * gamma
    dgamma = (gy * xhat).sum(axis=0)
    dbeta = gy.sum(axis=0)
    s1 = dxhat.sum(axis=1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=1, keepdims=True)
    dx = (dxhat - s1 / d - xhat * (s2 / d)) * inv_std[:, None]
    return dx, dgamma, dbeta
