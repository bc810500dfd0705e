# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled training kernels.

Every kernel follows the same floating-point discipline as the pure-Python
reference in ``pyref.py``:

* one IEEE-754 rounding per multiply and per add (compiled with
  -ffp-contract=off, so no FMA fusion),
* reductions accumulate in a fixed ascending order (k for matmul, column
  index for row reductions, row index for column reductions),
* masked/zeroed entries are written as +0.0.

Under that discipline the two backends are bit-identical for all kernels
built from +, -, *, /, sqrt and comparisons; kernels using exp/log (softmax,
cross-entropy) may differ from the NumPy twin in the last ulp because NumPy
ships its own vectorized exp/log.

Shape validation lives in ``cllora.numerics``; these kernels assume
C-contiguous float64 inputs of consistent shapes.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


def matmul(double[:, ::1] a, double[:, ::1] b):
    """c[i,j] = sum_k a[i,k]*b[k,j], k ascending (i-k-j loop order)."""
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    out = np.zeros((m, n))
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, k, j
    cdef double aik
    with nogil:
        for i in range(m):
            for k in range(kk):
                aik = a[i, k]
                for j in range(n):
                    c[i, j] += aik * b[k, j]
    return out


def add_scaled(double[:, ::1] y, double[:, ::1] x, double alpha):
    """In place: y += alpha * x (two roundings per element)."""
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                y[i, j] += alpha * x[i, j]


def sgd_step(double[:, ::1] params, double[:, ::1] grads, double eta):
    """In place: params -= eta * grads."""
    cdef Py_ssize_t m = params.shape[0], n = params.shape[1]
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                params[i, j] -= eta * grads[i, j]


def relu(double[:, ::1] x):
    """y = max(x, 0) with +0.0 where x <= 0."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                y[i, j] = x[i, j] if x[i, j] > 0.0 else 0.0
    return out


def relu_backward(double[:, ::1] dy, double[:, ::1] x):
    """dx = dy where x > 0 else +0.0."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] dx = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(m):
            for j in range(n):
                dx[i, j] = dy[i, j] if x[i, j] > 0.0 else 0.0
    return out


def row_softmax(double[:, ::1] x):
    """Row-wise softmax with max subtraction; row sums accumulate left to right."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] s = out
    cdef Py_ssize_t i, j
    cdef double mx, acc
    with nogil:
        for i in range(m):
            mx = x[i, 0]
            for j in range(1, n):
                if x[i, j] > mx:
                    mx = x[i, j]
            acc = 0.0
            for j in range(n):
                s[i, j] = exp(x[i, j] - mx)
                acc += s[i, j]
            for j in range(n):
                s[i, j] = s[i, j] / acc
    return out


def row_softmax_backward(double[:, ::1] s, double[:, ::1] ds):
    """dx[i,j] = s[i,j] * (ds[i,j] - sum_k ds[i,k]*s[i,k])."""
    cdef Py_ssize_t m = s.shape[0], n = s.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] dx = out
    cdef Py_ssize_t i, j
    cdef double acc
    with nogil:
        for i in range(m):
            acc = 0.0
            for j in range(n):
                acc += ds[i, j] * s[i, j]
            for j in range(n):
                dx[i, j] = s[i, j] * (ds[i, j] - acc)
    return out


def causal_softmax(double[:, ::1] x):
    """Square score matrix: row i is softmaxed over columns 0..i, zeros after."""
    cdef Py_ssize_t t = x.shape[0]
    out = np.zeros((t, t))
    cdef double[:, ::1] s = out
    cdef Py_ssize_t i, j
    cdef double mx, acc
    with nogil:
        for i in range(t):
            mx = x[i, 0]
            for j in range(1, i + 1):
                if x[i, j] > mx:
                    mx = x[i, j]
            acc = 0.0
            for j in range(i + 1):
                s[i, j] = exp(x[i, j] - mx)
                acc += s[i, j]
            for j in range(i + 1):
                s[i, j] = s[i, j] / acc
    return out


def causal_softmax_backward(double[:, ::1] s, double[:, ::1] ds):
    """Backward of causal_softmax; entries with column > row are +0.0."""
    cdef Py_ssize_t t = s.shape[0]
    out = np.zeros((t, t))
    cdef double[:, ::1] dx = out
    cdef Py_ssize_t i, j
    cdef double acc
    with nogil:
        for i in range(t):
            acc = 0.0
            for j in range(i + 1):
                acc += ds[i, j] * s[i, j]
            for j in range(i + 1):
                dx[i, j] = s[i, j] * (ds[i, j] - acc)
    return out


def layernorm_forward(double[:, ::1] x, double[:, ::1] gamma, double[:, ::1] beta,
                      double eps):
    """Row-wise layer norm with affine params (gamma/beta shaped 1 x n).

    Returns (y, mean, rstd); mean and rstd are (m, 1) caches for backward.
    """
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n))
    mean_out = np.empty((m, 1))
    rstd_out = np.empty((m, 1))
    cdef double[:, ::1] y = out
    cdef double[:, ::1] mean = mean_out
    cdef double[:, ::1] rstd = rstd_out
    cdef Py_ssize_t i, j
    cdef double acc, mu, d, var, r
    with nogil:
        for i in range(m):
            acc = 0.0
            for j in range(n):
                acc += x[i, j]
            mu = acc / n
            acc = 0.0
            for j in range(n):
                d = x[i, j] - mu
                acc += d * d
            var = acc / n
            r = 1.0 / sqrt(var + eps)
            mean[i, 0] = mu
            rstd[i, 0] = r
            for j in range(n):
                y[i, j] = gamma[0, j] * ((x[i, j] - mu) * r) + beta[0, j]
    return out, mean_out, rstd_out


def layernorm_backward(double[:, ::1] dy, double[:, ::1] x, double[:, ::1] gamma,
                       double[:, ::1] mean, double[:, ::1] rstd):
    """Backward of layernorm_forward. Returns (dx, dgamma, dbeta).

    dgamma/dbeta accumulate over rows in ascending row order.
    """
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    dx_out = np.empty((m, n))
    dgamma_out = np.zeros((1, n))
    dbeta_out = np.zeros((1, n))
    cdef double[:, ::1] dx = dx_out
    cdef double[:, ::1] dgamma = dgamma_out
    cdef double[:, ::1] dbeta = dbeta_out
    cdef Py_ssize_t i, j
    cdef double mu, r, xhat, dxh, s1, s2, m1, m2
    with nogil:
        for i in range(m):
            mu = mean[i, 0]
            r = rstd[i, 0]
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                xhat = (x[i, j] - mu) * r
                dxh = dy[i, j] * gamma[0, j]
                s1 += dxh
                s2 += dxh * xhat
                dgamma[0, j] += dy[i, j] * xhat
                dbeta[0, j] += dy[i, j]
            m1 = s1 / n
            m2 = s2 / n
            for j in range(n):
                xhat = (x[i, j] - mu) * r
                dxh = dy[i, j] * gamma[0, j]
                dx[i, j] = ((dxh - m1) - xhat * m2) * r
    return dx_out, dgamma_out, dbeta_out


def cross_entropy(double[:, ::1] logits, long long[::1] targets):
    """Mean next-token cross-entropy and its logit gradient.

    loss = mean_i(log(sum_j exp(l[i,j] - max_i)) - (l[i,t_i] - max_i))
    grad = (softmax(logits) - onehot) / T
    """
    cdef Py_ssize_t t = logits.shape[0], v = logits.shape[1]
    grad_out = np.empty((t, v))
    cdef double[:, ::1] g = grad_out
    cdef Py_ssize_t i, j
    cdef long long tgt
    cdef double mx, acc, total, l
    total = 0.0
    with nogil:
        for i in range(t):
            mx = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            acc = 0.0
            for j in range(v):
                g[i, j] = exp(logits[i, j] - mx)
                acc += g[i, j]
            tgt = targets[i]
            l = log(acc) - (logits[i, tgt] - mx)
            total += l
            for j in range(v):
                g[i, j] = g[i, j] / acc
            g[i, tgt] -= 1.0
            for j in range(v):
                g[i, j] = g[i, j] / t
    return total / t, grad_out
