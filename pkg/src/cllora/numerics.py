"""Deterministic dense linear algebra, sampling, and training kernels.

Matrices are 2-D C-contiguous float64 ndarrays throughout. All reductions
run in a fixed order (see ``cllora._kernels``), so results are bit-identical
across runs on the same platform, and the compiled/pure-Python backends agree
bitwise on every kernel that avoids exp/log.

Randomness goes through :class:`Rng`, a PCG64 generator (NumPy's default
64-bit PCG variant, constants documented upstream) whose child streams are
derived by SHA-256 hashing of (parent key, label). The same seed therefore
yields the same stream regardless of how many sibling streams exist.
"""

from __future__ import annotations

import hashlib
import math
import struct
from typing import Sequence

import numpy as np

from . import _kernels

LAYERNORM_EPS = 1e-5


class ShapeError(ValueError):
    """Operands have incompatible shapes; carries both shapes."""

    def __init__(self, op: str, a_shape, b_shape):
        self.op = op
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)
        super().__init__(f"{op}: incompatible shapes {self.a_shape} x {self.b_shape}")


class NonFiniteError(ArithmeticError):
    """A public operation produced NaN or Inf entries."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array, validating rank."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got ndim={a.ndim}")
    return a


def _check_finite(a: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{op} produced non-finite entries")
    return a


# ---------------------------------------------------------------------------
# Random number generation
# ---------------------------------------------------------------------------

_KEY_DOMAIN = b"cllora.rng.v1"


class Rng:
    """Seeded PCG64 stream with reproducible, independent child streams.

    ``split(label)`` hashes (key, label) with SHA-256 into a fresh 256-bit
    key, so child streams are independent of each other and of how much the
    parent has been consumed.
    """

    def __init__(self, seed: int | None = None, *, _key: bytes | None = None):
        if _key is None:
            if seed is None:
                raise ValueError("Rng requires a seed")
            packed = struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF)
            _key = hashlib.sha256(_KEY_DOMAIN + packed).digest()
        self.key = _key
        self._gen = np.random.Generator(
            np.random.PCG64(int.from_bytes(_key, "little"))
        )

    def split(self, label: str) -> "Rng":
        """Independent child stream for (this stream, label)."""
        key = hashlib.sha256(self.key + b"\x00" + label.encode("utf-8")).digest()
        return Rng(_key=key)

    def normal(self, rows: int, cols: int, std: float) -> np.ndarray:
        """i.i.d. N(0, std^2) matrix; std must be positive."""
        if not std > 0:
            raise ValueError(f"std must be positive, got {std}")
        return self._gen.standard_normal((rows, cols)) * std

    def standard_normal(self) -> float:
        return float(self._gen.standard_normal())

    def uniform(self) -> float:
        return float(self._gen.random())

    def random(self, size: int) -> np.ndarray:
        """Uniform [0, 1) draws."""
        return self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def gamma(self, shape: float) -> float:
        """Gamma(shape, 1) draw via the Marsaglia-Tsang squeeze.

        Shapes below 1 use the u^(1/shape) boost on a Gamma(shape+1) draw.
        """
        if not shape > 0:
            raise ValueError(f"gamma shape must be positive, got {shape}")
        if shape < 1.0:
            g = self.gamma(shape + 1.0)
            u = self.uniform()
            while u == 0.0:
                u = self.uniform()
            return g * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.standard_normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.uniform()
            if u < 1.0 - 0.0331 * x * x * x * x:
                return d * v
            if u == 0.0 or math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
                return d * v

    def dirichlet(self, alpha: Sequence[float]) -> np.ndarray:
        """Dirichlet(alpha) draw on the probability simplex.

        Gamma draws are renormalized by their total, so components are
        nonnegative and sum to 1 within a few ulps.
        """
        alpha = np.asarray(alpha, dtype=np.float64)
        if alpha.ndim != 1 or alpha.size < 2:
            raise ValueError("alpha must be a vector of length >= 2")
        if not (alpha > 0).all():
            bad = int(np.argmin(alpha > 0))
            raise ValueError(
                f"alpha components must be positive, got alpha[{bad}]={alpha[bad]}"
            )
        for _ in range(100):
            g = np.array([self.gamma(float(a)) for a in alpha])
            total = g.sum()
            if total > 0.0 and np.isfinite(total):
                return g / total
        raise NonFiniteError("dirichlet: gamma draws degenerate after 100 attempts")


def sample_normal(rng: Rng, rows: int, cols: int, std: float) -> np.ndarray:
    """i.i.d. N(0, std^2) matrix from the given stream."""
    return rng.normal(rows, cols, std)


def sample_dirichlet(rng: Rng, alpha: Sequence[float]) -> np.ndarray:
    """Dirichlet(alpha) draw from the given stream."""
    return rng.dirichlet(alpha)


# ---------------------------------------------------------------------------
# Linear algebra and differentiable kernels
# ---------------------------------------------------------------------------


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with fixed ascending-k reduction order."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _check_finite(_kernels.matmul(a, b), "matmul")


def matmul_backward(a: np.ndarray, b: np.ndarray, dc: np.ndarray):
    """Gradients of c = a @ b: (dc @ b^T, a^T @ dc)."""
    da = _kernels.matmul(np.ascontiguousarray(dc), transpose(b))
    db = _kernels.matmul(transpose(a), np.ascontiguousarray(dc))
    return da, db


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    return _check_finite(a + b, "add")


def scale(a: np.ndarray, alpha: float) -> np.ndarray:
    return _check_finite(as_matrix(a) * alpha, "scale")


def sgd_step(params: np.ndarray, grads: np.ndarray, eta: float) -> np.ndarray:
    """In place: params -= eta * grads. Returns params."""
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape:
        raise ShapeError("sgd_step", params.shape, grads.shape)
    if not eta > 0:
        raise ValueError(f"eta must be positive, got {eta}")
    _kernels.sgd_step(params, grads, eta)
    return _check_finite(params, "sgd_step")


def relu(x: np.ndarray) -> np.ndarray:
    return _kernels.relu(as_matrix(x))


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return _kernels.relu_backward(as_matrix(dy), as_matrix(x))


def row_softmax(x: np.ndarray) -> np.ndarray:
    return _check_finite(_kernels.row_softmax(as_matrix(x)), "row_softmax")


def row_softmax_backward(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    return _kernels.row_softmax_backward(as_matrix(s), as_matrix(ds))


def causal_row_softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax of row i over columns 0..i; strictly-upper entries are 0."""
    scores = as_matrix(scores, "scores")
    if scores.shape[0] != scores.shape[1]:
        raise ShapeError("causal_row_softmax", scores.shape, scores.shape)
    return _check_finite(_kernels.causal_softmax(scores), "causal_row_softmax")


def causal_row_softmax_backward(s: np.ndarray, ds: np.ndarray) -> np.ndarray:
    return _kernels.causal_softmax_backward(as_matrix(s), as_matrix(ds))


def layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
              eps: float = LAYERNORM_EPS):
    """Row-wise layer norm with affine params. Returns (y, mean, rstd)."""
    x = as_matrix(x, "x")
    gamma = as_matrix(np.atleast_2d(gamma), "gamma")
    beta = as_matrix(np.atleast_2d(beta), "beta")
    if gamma.shape != (1, x.shape[1]) or beta.shape != (1, x.shape[1]):
        raise ShapeError("layernorm", x.shape, gamma.shape)
    y, mean, rstd = _kernels.layernorm_forward(x, gamma, beta, eps)
    return _check_finite(y, "layernorm"), mean, rstd


def layernorm_backward(dy: np.ndarray, x: np.ndarray, gamma: np.ndarray,
                       mean: np.ndarray, rstd: np.ndarray):
    """Backward of :func:`layernorm`. Returns (dx, dgamma, dbeta)."""
    return _kernels.layernorm_backward(
        as_matrix(dy), as_matrix(x), as_matrix(np.atleast_2d(gamma)), mean, rstd
    )


def cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over positions and its gradient.

    loss = mean_t(-log softmax(logits)[t, target_t]);
    grad = (softmax(logits) - onehot) / T.
    """
    logits = as_matrix(logits, "logits")
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    if targets.ndim != 1 or targets.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    v = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        bad = int(np.argmax((targets < 0) | (targets >= v)))
        raise ValueError(
            f"target id {targets[bad]} at position {bad} outside [0, {v})"
        )
    if targets.size == 0:
        raise ValueError("cross_entropy requires at least one position")
    loss, grad = _kernels.cross_entropy(logits, targets)
    if not math.isfinite(loss):
        raise NonFiniteError("cross_entropy produced a non-finite loss")
    return loss, grad


def identity(n: int) -> np.ndarray:
    return np.eye(n)


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols))
