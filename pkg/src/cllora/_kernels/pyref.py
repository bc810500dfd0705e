"""Pure-NumPy reference kernels.

Mirrors the compiled kernels in ``_core.pyx`` operation-for-operation: the
same fixed reduction orders (ascending k / column / row) and one IEEE-754
rounding per multiply and per add. Ordered reductions are realized either by
sweeping the reduced axis with vectorized +=, or with np.cumsum (sequential
by construction); np.sum/np.dot are never used because NumPy's pairwise
summation reassociates.

Kernels built from +, -, *, /, sqrt are bit-identical to the compiled ones.
exp/log based kernels (softmax, cross-entropy) can differ in the last ulp
since NumPy's vectorized exp/log is not guaranteed to match libm.
"""

import numpy as np


def _sum_cols(x):
    """Row sums accumulated in ascending column order, shape (m, 1)."""
    return np.cumsum(x, axis=1)[:, -1:]


def _sum_rows(x):
    """Column sums accumulated in ascending row order, shape (1, n)."""
    return np.cumsum(x, axis=0)[-1:, :]


def matmul(a, b):
    """c[i,j] = sum_k a[i,k]*b[k,j], k ascending."""
    m, kk = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    tmp = np.empty((m, n))
    for k in range(kk):
        np.multiply(a[:, k:k + 1], b[k:k + 1, :], out=tmp)
        np.add(c, tmp, out=c)
    return c


def add_scaled(y, x, alpha):
    """In place: y += alpha * x (two roundings per element)."""
    np.add(y, np.multiply(alpha, x), out=y)


def sgd_step(params, grads, eta):
    """In place: params -= eta * grads."""
    np.subtract(params, np.multiply(eta, grads), out=params)


def relu(x):
    return np.where(x > 0.0, x, 0.0)


def relu_backward(dy, x):
    return np.where(x > 0.0, dy, 0.0)


def row_softmax(x):
    mx = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - mx)
    return e / _sum_cols(e)


def row_softmax_backward(s, ds):
    acc = _sum_cols(np.multiply(ds, s))
    return s * (ds - acc)


def causal_softmax(x):
    t = x.shape[0]
    out = np.zeros((t, t))
    for i in range(t):
        row = x[i, :i + 1]
        e = np.exp(row - np.max(row))
        out[i, :i + 1] = e / np.cumsum(e)[-1]
    return out


def causal_softmax_backward(s, ds):
    t = s.shape[0]
    out = np.zeros((t, t))
    for i in range(t):
        si = s[i, :i + 1]
        dsi = ds[i, :i + 1]
        acc = np.cumsum(np.multiply(dsi, si))[-1]
        out[i, :i + 1] = si * (dsi - acc)
    return out


def layernorm_forward(x, gamma, beta, eps):
    n = x.shape[1]
    mean = _sum_cols(x) / n
    d = x - mean
    var = _sum_cols(np.multiply(d, d)) / n
    rstd = 1.0 / np.sqrt(var + eps)
    y = gamma * ((x - mean) * rstd) + beta
    return y, mean, rstd


def layernorm_backward(dy, x, gamma, mean, rstd):
    n = x.shape[1]
    xhat = (x - mean) * rstd
    dxh = dy * gamma
    m1 = _sum_cols(dxh) / n
    m2 = _sum_cols(np.multiply(dxh, xhat)) / n
    dx = ((dxh - m1) - xhat * m2) * rstd
    dgamma = _sum_rows(np.multiply(dy, xhat))
    dbeta = _sum_rows(dy)
    return dx, dgamma, dbeta


def cross_entropy(logits, targets):
    t, v = logits.shape
    rows = np.arange(t)
    mx = np.max(logits, axis=1, keepdims=True)
    e = np.exp(logits - mx)
    s = _sum_cols(e)
    losses = np.log(s[:, 0]) - (logits[rows, targets] - mx[:, 0])
    loss = np.cumsum(losses)[-1] / t
    g = e / s
    g[rows, targets] -= 1.0
    np.divide(g, t, out=g)
    return float(loss), g
