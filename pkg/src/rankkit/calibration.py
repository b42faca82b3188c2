"""Isotonic calibration layer trained jointly with the ranking model, and the
observed/expected ratio diagnostic.

The layer is a monotone piecewise-linear map of a raw logit. The input is
shifted by ``y_min`` and bucketized with width ``step``; bucket ``i`` has
slope ``relu(w_i + e_i)`` where ``e`` optionally comes from a per-category
embedding of one calibration feature.
"""

from __future__ import annotations

import csv
import logging

import numpy as np

from .errors import InputError, UndefinedMetricError
from .tensor import Parameter

log = logging.getLogger(__name__)


class IsotonicLayer:
    def __init__(
        self,
        step: float = 0.1,
        bucket_count: int = 200,
        y_min: float = -10.0,
        calibration_vocab: int = 0,
        name: str = "iso",
    ):
        if not step > 0 or bucket_count < 1:
            raise InputError("step must be positive and bucket_count >= 1")
        self.step = float(step)
        self.bucket_count = int(bucket_count)
        self.y_min = float(y_min)
        self.calibration_vocab = int(calibration_vocab)
        # unit slopes and b = y_min make the initial map the identity on
        # (y_min, y_min + step * bucket_count]
        self.w = Parameter(f"{name}.w", np.ones(bucket_count))
        self.b = Parameter(f"{name}.b", np.array([self.y_min]))
        self.embedding = (
            Parameter(f"{name}.calib_embedding", np.zeros((calibration_vocab, bucket_count)))
            if calibration_vocab > 0
            else None
        )
        self._cache = None

    def parameters(self):
        return [self.w, self.b] + ([self.embedding] if self.embedding is not None else [])

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def bucketize(self, y):
        """Active bucket k and its partial length v_k for each input."""
        u = np.asarray(y, dtype=np.float64) - self.y_min
        K, step = self.bucket_count, self.step
        pos = u > 0
        k = np.where(pos, np.ceil(u / step) - 1, 0).astype(np.int64)
        k = np.clip(k, 0, K - 1)
        # k = max{j : u - step*j > 0}; repair float rounding of the ceil
        down = pos & (k > 0) & (u - step * k <= 0)
        k[down] -= 1
        up = pos & (k < K - 1) & (u - step * (k + 1) > 0)
        k[up] += 1
        v_k = np.where(pos, u - step * k, u)
        return k, v_k

    def slopes(self, calib_index=None):
        if self.embedding is None:
            if calib_index is not None:
                raise InputError("layer has no calibration embedding; do not pass calibration features")
            return np.maximum(self.w.value, 0.0)
        if calib_index is None:
            raise InputError("calibration features required by this layer")
        return np.maximum(self.w.value[None, :] + self.embedding.value[calib_index], 0.0)

    def forward(self, y, calib_index=None):
        y = np.asarray(y, dtype=np.float64)
        if not np.all(np.isfinite(y)):
            raise InputError("isotonic layer received a non-finite logit")
        k, v_k = self.bucketize(y)
        s = self.slopes(None if calib_index is None else np.asarray(calib_index, dtype=np.int64))
        if s.ndim == 1:
            cum = np.concatenate([[0.0], np.cumsum(s)[:-1]]) * self.step
            out = cum[k] + s[k] * v_k + self.b.value[0]
        else:
            cum = np.concatenate([np.zeros((s.shape[0], 1)), np.cumsum(s, axis=1)[:, :-1]], axis=1) * self.step
            rows = np.arange(s.shape[0])
            out = cum[rows, k] + s[rows, k] * v_k + self.b.value[0]
        self._cache = (k, v_k, s, calib_index)
        return out

    def backward(self, g):
        """Accumulate parameter gradients; return d out / d y times ``g``."""
        k, v_k, s, calib_index = self._cache
        g = np.asarray(g, dtype=np.float64)
        K = self.bucket_count
        self.b.grad[0] += g.sum()
        idx = np.arange(K)
        # M[n, i] = d out_n / d slope_i
        M = np.where(idx[None, :] < k[:, None], self.step, 0.0)
        M[np.arange(len(k)), k] = v_k
        if s.ndim == 1:
            active = s > 0
            self.w.grad += (g @ M) * active
            return g * s[k]
        active = s > 0
        Mg = M * g[:, None] * active
        self.w.grad += Mg.sum(axis=0)
        onehot = np.zeros((len(k), self.calibration_vocab))
        onehot[np.arange(len(k)), np.asarray(calib_index, dtype=np.int64)] = 1.0
        self.embedding.grad += onehot.T @ Mg
        return g * s[np.arange(len(k)), k]

    def curve(self, calib_index: int | None = None) -> list[dict]:
        """Per-bucket rows: bucket_index, lower_edge, slope, cumulative_output."""
        s = self.slopes(None if calib_index is None else np.array([calib_index]))
        s = s if s.ndim == 1 else s[0]
        rows, acc = [], self.b.value[0]
        for i in range(self.bucket_count):
            acc += s[i] * self.step
            rows.append(
                {
                    "bucket_index": i,
                    "lower_edge": self.y_min + i * self.step,
                    "slope": float(s[i]),
                    "cumulative_output": float(acc),
                }
            )
        return rows

    def export_curve_csv(self, path, calib_index: int | None = None):
        rows = self.curve(calib_index)
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["bucket_index", "lower_edge", "slope", "cumulative_output"])
            writer.writeheader()
            for r in rows:
                writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def isotonic_forward(layer: IsotonicLayer, y: float, calib_index: int | None = None) -> float:
    ci = None if calib_index is None else np.array([calib_index])
    return float(layer.forward(np.array([y]), ci)[0])


def isotonic_backward(layer: IsotonicLayer, y: float, calib_index: int | None = None, upstream_grad: float = 1.0):
    """Gradients of one evaluation: returns (d/dy, d/dw, d/db, d/d embedding).

    Parameter grads are also accumulated into the layer's buffers.
    """
    for p in layer.parameters():
        p.zero_grad()
    isotonic_forward(layer, y, calib_index)
    dy = float(layer.backward(np.array([upstream_grad]))[0])
    emb = layer.embedding.grad.copy() if layer.embedding is not None else None
    return dy, layer.w.grad.copy(), float(layer.b.grad[0]), emb


def oe_ratio(labels, probabilities) -> float:
    """Observed / expected: sum of labels over sum of predicted probabilities."""
    labels = np.asarray(labels, dtype=np.float64)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if labels.shape != probabilities.shape or labels.size == 0:
        raise InputError("labels and probabilities must be non-empty and equally long")
    expected = probabilities.sum()
    if expected <= 0:
        raise UndefinedMetricError("O/E ratio undefined: predicted probabilities sum to 0")
    return float(labels.sum() / expected)
