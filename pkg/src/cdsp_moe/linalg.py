"""Dense helpers shared by every other module.

Matrices are plain float64 numpy arrays. Functions accept scalars or arrays
and work element-wise unless stated otherwise.
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
COS_EPS = 1e-8


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sigmoid(x):
    x = np.clip(np.asarray(x, dtype=np.float64), -700.0, 700.0)
    # exp of a non-positive argument never overflows; pick the branch by sign
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0, e) / (1.0 + e)
    return out if out.ndim else float(out)


def sigmoid_prime(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def silu(x):
    return np.asarray(x, dtype=np.float64) * sigmoid(x) if np.ndim(x) else float(x * sigmoid(x))


def silu_prime(x):
    s = sigmoid(x)
    return s + x * s * (1.0 - s)


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ShapeError("softmax of an empty vector")
    z = np.exp(v - v.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def layer_norm(x, eps: float = LN_EPS) -> np.ndarray:
    """Normalise along the last axis (population variance, no affine)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm of an empty vector")
    c = x - x.mean(axis=-1, keepdims=True)
    # second pass removes the rounding residue of the first mean, which the
    # eps-sized denominator would otherwise amplify for near-constant rows
    c -= c.mean(axis=-1, keepdims=True)
    return c / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)


def layer_norm_backward(x, d_out, eps: float = LN_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    g = np.asarray(d_out, dtype=np.float64)
    return inv * (g - g.mean(axis=-1, keepdims=True)
                  - xhat * (g * xhat).mean(axis=-1, keepdims=True))


def cosine_similarity(a, b, eps: float = COS_EPS) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b / (na * nb + eps))


def argtop_r(v, r: int) -> np.ndarray:
    """Indices of the ``r`` largest entries, ties to the lowest index, sorted."""
    v = np.asarray(v, dtype=np.float64).ravel()
    if not 1 <= r <= v.size:
        raise ValueError(f"r={r} outside [1, {v.size}]")
    order = np.argsort(-v, kind="stable")
    return np.sort(order[:r])


def argtop_rows(m, k: int) -> np.ndarray:
    """Row-wise ``argtop_r`` for a 2-d array; returns shape (rows, k)."""
    m = as_matrix(m)
    if not 1 <= k <= m.shape[1]:
        raise ValueError(f"k={k} outside [1, {m.shape[1]}]")
    return np.sort(np.argsort(-m, axis=1, kind="stable")[:, :k], axis=1)


def binary_entropy(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any((p < 0.0) | (p > 1.0)) or np.any(np.isnan(p)):
        raise ValueError("binary_entropy needs p in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0) - np.where(p < 1, (1 - p) * np.log1p(-p), 0.0)
    return h if h.ndim else float(h)


class Rng:
    """Seeded generator; every stochastic draw in the package goes through one.

    Backed by numpy's PCG64 stream, which is reproducible across platforms
    for a fixed numpy major version.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def bernoulli(self, p: float, size=None) -> np.ndarray:
        return self._gen.uniform(size=size) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        ss = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0] >> 1))

    def state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state
