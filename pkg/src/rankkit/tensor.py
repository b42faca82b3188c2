"""Dense float64 helpers, trainable parameters, seeded RNG streams and a
central-difference gradient oracle.

Arrays are plain ``numpy.ndarray`` values in float64. Every layer in the
package implements its own backward pass; :func:`finite_diff_grad` is the
reference those backward passes are checked against.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, ParameterError

DTYPE = np.float64


def as_tensor(x, ndim: int | None = None) -> np.ndarray:
    arr = np.asarray(x, dtype=DTYPE)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"expected rank-{ndim} tensor, got shape {arr.shape}")
    return arr


@dataclass(eq=False)
class Parameter:
    """A named trainable tensor with its gradient and optional Fisher diagonal."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    fisher_diag: np.ndarray | None = None

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=DTYPE)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"{self.name}: grad shape {self.grad.shape} != {self.value.shape}")
        if self.fisher_diag is not None:
            self.set_fisher(self.fisher_diag)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def zero_grad(self):
        self.grad[...] = 0.0

    def set_fisher(self, fisher):
        fisher = np.asarray(fisher, dtype=DTYPE)
        if fisher.shape != self.value.shape:
            raise DimensionError(f"{self.name}: fisher shape {fisher.shape} != {self.value.shape}")
        if np.any(fisher < 0):
            raise ParameterError(f"{self.name}: Fisher diagonal must be non-negative")
        self.fisher_diag = fisher.copy()


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a, 2)
    b = as_tensor(b, 2)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(m, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``m / temperature`` with max subtraction.

    Works on the last axis, so a stack of matrices (B, r, r) is also accepted.
    """
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    z = as_tensor(m) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(x):
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=DTYPE)
    return np.logaddexp(0.0, x)


def inverse_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


def finite_diff_grad(
    f: Callable[[], float], params: Sequence[Parameter], epsilon: float = 1e-6
) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. every element of ``params``.

    ``f`` takes no arguments and must read the parameters' current values.
    Values are restored exactly after each perturbation.
    """
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    grads = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = f()
            flat[i] = orig - epsilon
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * epsilon)
        grads.append(g)
    return grads


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise maximum."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def make_rng(seed: int, stream: str = "") -> np.random.Generator:
    """PCG64 generator for the named sub-stream of ``seed``.

    The stream name is folded into the seed sequence through CRC-32, so
    ``make_rng(7, "init")`` and ``make_rng(7, "shuffle")`` are independent
    and each is reproducible bit-exactly on every platform.
    """
    key = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    if stream:
        key.append(zlib.crc32(stream.encode("utf-8")))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def zero_grads(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


def flatten_values(params: Iterable[Parameter]) -> np.ndarray:
    return np.concatenate([p.value.ravel() for p in params])
