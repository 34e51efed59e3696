# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused float64 kernels for the training hot path.

Same contract as numpy_backend: C-contiguous float64 in, reductions over
the last axis. Single-threaded on purpose: bit-for-bit run-to-run
determinism matters more here than another core.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()

NAME = "compiled"

# tanh-form GELU: 0.5 x (1 + tanh(c (x + a x^3)))
cdef double GELU_C = 0.7978845608028653558798921198687637  # sqrt(2/pi)
cdef double GELU_A = 0.044715


cdef inline void _gelu_fwd(const double[::1] x, double[::1] y) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double inner
    for i in range(n):
        inner = GELU_C * (x[i] + GELU_A * x[i] * x[i] * x[i])
        y[i] = 0.5 * x[i] * (1.0 + tanh(inner))


cdef inline void _gelu_bwd(const double[::1] x, const double[::1] gy, double[::1] gx) noexcept nogil:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double inner, t, sech2
    for i in range(n):
        inner = GELU_C * (x[i] + GELU_A * x[i] * x[i] * x[i])
        t = tanh(inner)
        sech2 = 1.0 - t * t
        gx[i] = gy[i] * (0.5 * (1.0 + t)
                         + 0.5 * x[i] * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x[i] * x[i]))


def gelu_fwd(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.empty_like(x)
    _gelu_fwd(x.reshape(-1), y.reshape(-1))
    return y


def gelu_bwd(x, gy):
    x = np.ascontiguousarray(x, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    gx = np.empty_like(x)
    _gelu_bwd(x.reshape(-1), gy.reshape(-1), gx.reshape(-1))
    return gx


cdef void _softmax_fwd(const double[:, ::1] x, double[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    cdef double m, s
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            y[r, c] = exp(x[r, c] - m)
            s += y[r, c]
        for c in range(cols):
            y[r, c] /= s


cdef void _softmax_bwd(const double[:, ::1] y, const double[:, ::1] gy, double[:, ::1] gx) noexcept nogil:
    cdef Py_ssize_t r, c, rows = y.shape[0], cols = y.shape[1]
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += y[r, c] * gy[r, c]
        for c in range(cols):
            gx[r, c] = y[r, c] * (gy[r, c] - dot)


def softmax_fwd(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.empty_like(x)
    cols = x.shape[x.ndim - 1]
    _softmax_fwd(x.reshape(-1, cols), y.reshape(-1, cols))
    return y


def softmax_bwd(y, gy):
    y = np.ascontiguousarray(y, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    gx = np.empty_like(y)
    cols = y.shape[y.ndim - 1]
    _softmax_bwd(y.reshape(-1, cols), gy.reshape(-1, cols), gx.reshape(-1, cols))
    return gx


cdef void _log_softmax_fwd(const double[:, ::1] x, double[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    cdef double m, s
    for r in range(rows):
        m = x[r, 0]
        for c in range(1, cols):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(cols):
            s += exp(x[r, c] - m)
        s = log(s)
        for c in range(cols):
            y[r, c] = x[r, c] - m - s


cdef void _log_softmax_bwd(const double[:, ::1] y, const double[:, ::1] gy, double[:, ::1] gx) noexcept nogil:
    cdef Py_ssize_t r, c, rows = y.shape[0], cols = y.shape[1]
    cdef double s
    for r in range(rows):
        s = 0.0
        for c in range(cols):
            s += gy[r, c]
        for c in range(cols):
            gx[r, c] = gy[r, c] - exp(y[r, c]) * s


def log_softmax_fwd(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.empty_like(x)
    cols = x.shape[x.ndim - 1]
    _log_softmax_fwd(x.reshape(-1, cols), y.reshape(-1, cols))
    return y


def log_softmax_bwd(y, gy):
    y = np.ascontiguousarray(y, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    gx = np.empty_like(y)
    cols = y.shape[y.ndim - 1]
    _log_softmax_bwd(y.reshape(-1, cols), gy.reshape(-1, cols), gx.reshape(-1, cols))
    return gx


cdef void _layer_norm_fwd(const double[:, ::1] x, const double[::1] gain, const double[::1] bias,
                          double eps, double[:, ::1] y, double[:, ::1] xhat,
                          double[::1] inv_std) noexcept nogil:
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    cdef double mu, var, d, istd
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += x[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = x[r, c] - mu
            var += d * d
        var /= cols
        istd = 1.0 / sqrt(var + eps)
        inv_std[r] = istd
        for c in range(cols):
            xhat[r, c] = (x[r, c] - mu) * istd
            y[r, c] = xhat[r, c] * gain[c] + bias[c]


cdef void _layer_norm_bwd(const double[:, ::1] xhat, const double[::1] inv_std,
                          const double[::1] gain, const double[:, ::1] gy,
                          double[:, ::1] gx, double[::1] ggain, double[::1] gbias) noexcept nogil:
    cdef Py_ssize_t r, c, rows = xhat.shape[0], cols = xhat.shape[1]
    cdef double mean_d, mean_dx, d
    for c in range(cols):
        ggain[c] = 0.0
        gbias[c] = 0.0
    for r in range(rows):
        mean_d = 0.0
        mean_dx = 0.0
        for c in range(cols):
            d = gy[r, c] * gain[c]
            mean_d += d
            mean_dx += d * xhat[r, c]
        mean_d /= cols
        mean_dx /= cols
        for c in range(cols):
            d = gy[r, c] * gain[c]
            gx[r, c] = (d - mean_d - xhat[r, c] * mean_dx) * inv_std[r]
            ggain[c] += gy[r, c] * xhat[r, c]
            gbias[c] += gy[r, c]


def layer_norm_fwd(x, gain, bias, eps):
    x = np.ascontiguousarray(x, dtype=np.float64)
    gain = np.ascontiguousarray(gain, dtype=np.float64)
    bias = np.ascontiguousarray(bias, dtype=np.float64)
    cols = x.shape[x.ndim - 1]
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    inv_std = np.empty(x.size // cols, dtype=np.float64)
    _layer_norm_fwd(x.reshape(-1, cols), gain, bias, eps,
                    y.reshape(-1, cols), xhat.reshape(-1, cols), inv_std)
    return y, xhat, inv_std.reshape(tuple(x.shape[:x.ndim - 1]) + (1,))


def layer_norm_bwd(xhat, inv_std, gain, gy):
    xhat = np.ascontiguousarray(xhat, dtype=np.float64)
    gy = np.ascontiguousarray(gy, dtype=np.float64)
    gain = np.ascontiguousarray(gain, dtype=np.float64)
    cols = xhat.shape[xhat.ndim - 1]
    gx = np.empty_like(xhat)
    ggain = np.empty(cols, dtype=np.float64)
    gbias = np.empty(cols, dtype=np.float64)
    _layer_norm_bwd(xhat.reshape(-1, cols), np.ascontiguousarray(inv_std.reshape(-1)),
                    gain, gy.reshape(-1, cols), gx.reshape(-1, cols), ggain, gbias)
    return gx, ggain, gbias


cdef void _adam(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double b1, double b2, double eps,
                double bc1, double bc2) noexcept nogil:
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double mhat, vhat
    for i in range(n):
        m[i] = b1 * m[i] + (1.0 - b1) * g[i]
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        p[i] -= lr * mhat / (sqrt(vhat) + eps)


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    _adam(param.reshape(-1), np.ascontiguousarray(grad.reshape(-1)), m.reshape(-1), v.reshape(-1),
          lr, beta1, beta2, eps, 1.0 - beta1 ** step, 1.0 - beta2 ** step)
