"""Numpy implementations of the hot kernels.

This is the fallback backend and the reference the compiled extension is
tested against. Every function takes and returns C-contiguous float64
arrays; reductions run over the last axis.
"""

import numpy as np

NAME = "numpy"

# tanh-form GELU: 0.5 x (1 + tanh(c (x + a x^3)))
_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, gy):
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    sech2 = 1.0 - t * t
    return gy * (0.5 * (1.0 + t) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x))


def softmax_fwd(x):
    shifted = x - np.max(x, axis=-1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= np.sum(shifted, axis=-1, keepdims=True)
    return shifted


def softmax_bwd(y, gy):
    dot = np.sum(y * gy, axis=-1, keepdims=True)
    return y * (gy - dot)


def log_softmax_fwd(x):
    m = np.max(x, axis=-1, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


def log_softmax_bwd(y, gy):
    return gy - np.exp(y) * np.sum(gy, axis=-1, keepdims=True)


def layer_norm_fwd(x, gain, bias, eps):
    mu = np.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    return xhat * gain + bias, xhat, inv_std


def layer_norm_bwd(xhat, inv_std, gain, gy):
    # gy has the full input shape; gain/bias gradients reduce over leading axes
    dxhat = gy * gain
    mean_dxhat = np.mean(dxhat, axis=-1, keepdims=True)
    mean_dxhat_xhat = np.mean(dxhat * xhat, axis=-1, keepdims=True)
    gx = (dxhat - mean_dxhat - xhat * mean_dxhat_xhat) * inv_std
    lead = tuple(range(gy.ndim - 1))
    ggain = np.sum(gy * xhat, axis=lead)
    gbias = np.sum(gy, axis=lead)
    return gx, ggain, gbias


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    """In-place Adam with bias correction; `step` is the 1-based step count."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
