"""Feature-interaction and tower layers with hand-written backward passes.

All layers take batched inputs of shape (B, d). The single-example
functions at the bottom (``cross_forward`` etc.) accept length-d vectors.
Each ``backward`` call consumes the cache of the most recent ``forward``
and *accumulates* into the parameters' ``grad`` buffers.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import (
    Parameter,
    as_tensor,
    inverse_softplus,
    sigmoid,
    softmax_rows,
    softplus,
    xavier_uniform,
)


class Module:
    def parameters(self) -> list[Parameter]:
        return []

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


def _check_dim(x: np.ndarray, d: int, what: str):
    if x.shape[-1] != d:
        raise DimensionError(f"{what}: expected last dim {d}, got shape {x.shape}")


class LowRankCrossLayer(Module):
    """x0 * (U V^T xl + bias) + xl with U, V of shape (d, r)."""

    def __init__(self, dim: int, rank: int, rng: np.random.Generator | None = None, name: str = "cross"):
        if not 0 < rank <= dim:
            raise ParameterError(f"rank must be in [1, {dim}], got {rank}")
        self.dim, self.rank = dim, rank
        init = (lambda shape: xavier_uniform(rng, dim, rank, shape)) if rng is not None else np.zeros
        self.U = Parameter(f"{name}.U", init((dim, rank)))
        self.V = Parameter(f"{name}.V", init((dim, rank)))
        self.bias = Parameter(f"{name}.bias", np.zeros(dim))
        self._cache = None

    def parameters(self):
        return [self.U, self.V, self.bias]

    def delta(self, x0, xl):
        _check_dim(x0, self.dim, "x0")
        _check_dim(xl, self.dim, "xl")
        h = xl @ self.V.value
        inner = h @ self.U.value.T + self.bias.value
        self._cache = (x0, xl, h, inner)
        return x0 * inner

    def delta_backward(self, g):
        x0, xl, h, inner = self._cache
        gi = g * x0
        self.bias.grad += gi.sum(axis=0)
        self.U.grad += gi.T @ h
        dh = gi @ self.U.value
        self.V.grad += xl.T @ dh
        return g * inner, dh @ self.V.value.T

    def forward(self, x0, xl):
        return self.delta(x0, xl) + xl

    def backward(self, g):
        dx0, dxl = self.delta_backward(g)
        return dx0, dxl + g


class AttentionCrossLayer(Module):
    """Low-rank cross layer with an r x r attention score matrix between
    the down- and up-projections.

    q, k, v = V_q^T xl, V_k^T xl, V_v^T xl; S = softmax_rows(q k^T / (tau sqrt r));
    delta = x0 * (U_a (S v) + bias_a). The temperature is stored as a
    softplus-parameterised scalar so it stays positive while training.

    Setting ``identity_scores = True`` pins S to the identity (test hook).
    """

    def __init__(
        self,
        dim: int,
        rank: int,
        rng: np.random.Generator | None = None,
        temperature: float = 1.0,
        name: str = "attn",
    ):
        if not 0 < rank <= dim:
            raise ParameterError(f"rank must be in [1, {dim}], got {rank}")
        if not temperature > 0:
            raise ParameterError(f"temperature must be positive, got {temperature}")
        self.dim, self.rank = dim, rank
        init = (lambda shape: xavier_uniform(rng, dim, rank, shape)) if rng is not None else np.zeros
        self.Vq = Parameter(f"{name}.Vq", init((dim, rank)))
        self.Vk = Parameter(f"{name}.Vk", init((dim, rank)))
        self.Vv = Parameter(f"{name}.Vv", init((dim, rank)))
        self.Ua = Parameter(f"{name}.Ua", init((dim, rank)))
        self.bias = Parameter(f"{name}.bias", np.zeros(dim))
        self.raw_temperature = Parameter(f"{name}.raw_temperature", np.array([inverse_softplus(temperature)]))
        self.identity_scores = False
        self._cache = None

    def parameters(self):
        return [self.Vq, self.Vk, self.Vv, self.Ua, self.bias, self.raw_temperature]

    @property
    def temperature(self) -> float:
        return float(softplus(self.raw_temperature.value[0]))

    def scores(self, q, k):
        """(B, r, r) attention scores for per-example q, k of shape (B, r)."""
        tau = self.temperature
        if not tau > 0:
            raise ParameterError("temperature must be positive")
        if self.identity_scores:
            return np.broadcast_to(np.eye(self.rank), (q.shape[0], self.rank, self.rank))
        logits = q[:, :, None] * k[:, None, :] / np.sqrt(self.rank)
        return softmax_rows(logits, tau)

    def delta(self, x0, xl):
        _check_dim(x0, self.dim, "x0")
        _check_dim(xl, self.dim, "xl")
        q = xl @ self.Vq.value
        k = xl @ self.Vk.value
        v = xl @ self.Vv.value
        S = self.scores(q, k)
        a = np.einsum("bij,bj->bi", S, v)
        inner = a @ self.Ua.value.T + self.bias.value
        self._cache = (x0, xl, q, k, v, S, a, inner)
        return x0 * inner

    def delta_backward(self, g):
        x0, xl, q, k, v, S, a, inner = self._cache
        gi = g * x0
        self.bias.grad += gi.sum(axis=0)
        self.Ua.grad += gi.T @ a
        da = gi @ self.Ua.value
        dv = np.einsum("bij,bi->bj", S, da)
        if self.identity_scores:
            dq = np.zeros_like(q)
            dk = np.zeros_like(k)
        else:
            dS = da[:, :, None] * v[:, None, :]
            dA = S * (dS - (S * dS).sum(axis=-1, keepdims=True))
            tau = self.temperature
            c = 1.0 / (tau * np.sqrt(self.rank))
            dq = c * np.einsum("bij,bj->bi", dA, k)
            dk = c * np.einsum("bij,bi->bj", dA, q)
            dc = float(np.einsum("bij,bi,bj->", dA, q, k))
            dtau = dc * (-c / tau)
            self.raw_temperature.grad += dtau * sigmoid(self.raw_temperature.value)
        self.Vq.grad += xl.T @ dq
        self.Vk.grad += xl.T @ dk
        self.Vv.grad += xl.T @ dv
        dxl = dq @ self.Vq.value.T + dk @ self.Vk.value.T + dv @ self.Vv.value.T
        return g * inner, dxl

    def forward(self, x0, xl):
        return self.delta(x0, xl) + xl

    def backward(self, g):
        dx0, dxl = self.delta_backward(g)
        return dx0, dxl + g


class ResidualDCNBlock(Module):
    """Stack of cross layers; each layer sums the plain low-rank delta and
    (optionally) the attention delta onto a single residual term.

    With ``attention=False`` this is a plain low-rank DCNv2 cross network.
    """

    def __init__(
        self,
        dim: int,
        rank: int,
        layer_count: int = 2,
        attention: bool = True,
        rng: np.random.Generator | None = None,
        temperature: float = 1.0,
        name: str = "dcn",
    ):
        if layer_count < 1:
            raise ParameterError("layer_count must be positive")
        self.dim, self.rank, self.layer_count = dim, rank, layer_count
        self.plain = [LowRankCrossLayer(dim, rank, rng, name=f"{name}.{i}.plain") for i in range(layer_count)]
        self.attn = (
            [AttentionCrossLayer(dim, rank, rng, temperature, name=f"{name}.{i}.attn") for i in range(layer_count)]
            if attention
            else []
        )

    def parameters(self):
        out = []
        for i in range(self.layer_count):
            out += self.plain[i].parameters()
            if self.attn:
                out += self.attn[i].parameters()
        return out

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        _check_dim(x, self.dim, "x")
        xl = x
        for i in range(self.layer_count):
            d = self.plain[i].delta(x, xl)
            if self.attn:
                d = d + self.attn[i].delta(x, xl)
            xl = d + xl
        return xl

    def backward(self, g):
        dx0 = np.zeros_like(g)
        for i in reversed(range(self.layer_count)):
            dx0_p, dxl_p = self.plain[i].delta_backward(g)
            dx0 += dx0_p
            g_next = g + dxl_p
            if self.attn:
                dx0_a, dxl_a = self.attn[i].delta_backward(g)
                dx0 += dx0_a
                g_next = g_next + dxl_a
            g = g_next
        return g + dx0

    def summary(self) -> dict:
        return {
            "dim": self.dim,
            "rank": self.rank,
            "layer_count": self.layer_count,
            "attention": bool(self.attn),
            "plain_params_per_layer": self.plain[0].param_count(),
            "attn_params_per_layer": self.attn[0].param_count() if self.attn else 0,
            "total_params": self.param_count(),
        }


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z, a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z, a: (z > 0).astype(np.float64)),
    "linear": (lambda z: z, lambda z, a: np.ones_like(z)),
}


def _activation(name: str):
    try:
        return _ACTIVATIONS[name]
    except KeyError:
        raise ParameterError(f"unknown activation {name!r}") from None


class DenseLayer(Module):
    def __init__(self, in_dim: int, out_dim: int, activation: str = "tanh", rng=None, name: str = "dense"):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self._act, self._dact = _activation(activation)
        W = xavier_uniform(rng, in_dim, out_dim, (out_dim, in_dim)) if rng is not None else np.zeros((out_dim, in_dim))
        self.W = Parameter(f"{name}.W", W)
        self.c = Parameter(f"{name}.c", np.zeros(out_dim))
        self._cache = None

    def parameters(self):
        return [self.W, self.c]

    def forward(self, x):
        _check_dim(x, self.in_dim, "dense input")
        z = x @ self.W.value.T + self.c.value
        a = self._act(z)
        self._cache = (x, z, a)
        return a

    def backward(self, g):
        x, z, a = self._cache
        dz = g * self._dact(z, a)
        self.W.grad += dz.T @ x
        self.c.grad += dz.sum(axis=0)
        return dz @ self.W.value


class GatedDenseLayer(Module):
    """activation(W x + c) * sigmoid(W_g x + c_g)."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "tanh", rng=None, name: str = "gated"):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self._act, self._dact = _activation(activation)
        init = (lambda: xavier_uniform(rng, in_dim, out_dim, (out_dim, in_dim))) if rng is not None else (
            lambda: np.zeros((out_dim, in_dim))
        )
        self.W = Parameter(f"{name}.W", init())
        self.c = Parameter(f"{name}.c", np.zeros(out_dim))
        self.W_g = Parameter(f"{name}.W_g", init())
        self.c_g = Parameter(f"{name}.c_g", np.zeros(out_dim))
        self._cache = None

    def parameters(self):
        return [self.W, self.c, self.W_g, self.c_g]

    def forward(self, x):
        _check_dim(x, self.in_dim, "gated input")
        z = x @ self.W.value.T + self.c.value
        a = self._act(z)
        gate = sigmoid(x @ self.W_g.value.T + self.c_g.value)
        self._cache = (x, z, a, gate)
        return a * gate

    def backward(self, g):
        x, z, a, gate = self._cache
        dz = g * gate * self._dact(z, a)
        dzg = g * a * gate * (1.0 - gate)
        self.W.grad += dz.T @ x
        self.c.grad += dz.sum(axis=0)
        self.W_g.grad += dzg.T @ x
        self.c_g.grad += dzg.sum(axis=0)
        return dz @ self.W.value + dzg @ self.W_g.value


class MLPTower(Module):
    """Hidden layers (optionally gated) followed by a linear output layer.

    ``last_hidden`` holds the input to the output layer from the latest
    forward call; the bandit module regresses on it.
    """

    def __init__(
        self,
        in_dim: int,
        hidden: list[int],
        n_out: int,
        gating: bool = False,
        activation: str = "tanh",
        rng=None,
        name: str = "tower",
    ):
        self.in_dim, self.n_out = in_dim, n_out
        cls = GatedDenseLayer if gating else DenseLayer
        self.hidden = []
        prev = in_dim
        for i, h in enumerate(hidden):
            self.hidden.append(cls(prev, h, activation, rng, name=f"{name}.h{i}"))
            prev = h
        self.out = DenseLayer(prev, n_out, "linear", rng, name=f"{name}.out")
        self.last_hidden = None

    @property
    def repr_dim(self) -> int:
        return self.out.in_dim

    def parameters(self):
        out = []
        for layer in self.hidden:
            out += layer.parameters()
        return out + self.out.parameters()

    def forward(self, x):
        for layer in self.hidden:
            x = layer.forward(x)
        self.last_hidden = x
        return self.out.forward(x)

    def backward(self, g):
        g = self.out.backward(g)
        for layer in reversed(self.hidden):
            g = layer.backward(g)
        return g


def _as_batch(x, d):
    x = as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"expected a vector, got shape {x.shape}")
    _check_dim(x, d, "vector")
    return x[None, :]


def cross_forward(layer: LowRankCrossLayer, x0, xl) -> np.ndarray:
    return layer.forward(_as_batch(x0, layer.dim), _as_batch(xl, layer.dim))[0]


def attention_cross_forward(layer: AttentionCrossLayer, x0, xl) -> np.ndarray:
    return layer.forward(_as_batch(x0, layer.dim), _as_batch(xl, layer.dim))[0]


def residual_dcn_forward(block: ResidualDCNBlock, x) -> np.ndarray:
    return block.forward(_as_batch(x, block.dim))[0]


def gated_forward(layer: GatedDenseLayer, x) -> np.ndarray:
    return layer.forward(_as_batch(x, layer.in_dim))[0]
