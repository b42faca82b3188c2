"""Optimizers, warmup and global-norm clipping, the empirical Fisher diagonal,
and the cold-weight incremental-training penalty."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, NumericalError, ParameterError, SnapshotError
from .model import Batch, MultiTaskModel, loss_and_grad, task_weight_vector
from .tensor import Parameter

log = logging.getLogger(__name__)

MAX_WARMUP_FRACTION = 0.6


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    peak_learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    adagrad_eps: float = 1e-10
    adagrad_initial: float = 0.0
    total_steps: int = 1000
    warmup_fraction: float = 0.05
    clip_global_norm: float = 1.0
    batch_size: int = 256
    decay: str = "none"  # none | linear (to zero at the last step)

    def validate(self):
        if self.decay not in ("none", "linear"):
            raise ConfigError(f"unknown decay {self.decay!r}")
        if self.kind not in ("adam", "adagrad"):
            raise ConfigError(f"unknown optimizer kind {self.kind!r}")
        if not self.peak_learning_rate > 0:
            raise ConfigError("peak_learning_rate must be positive")
        if not 0 <= self.warmup_fraction <= MAX_WARMUP_FRACTION:
            raise ConfigError(
                f"warmup_fraction={self.warmup_fraction} must lie in [0, {MAX_WARMUP_FRACTION}] "
                "(warmup is capped at 60% of total training steps)"
            )
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if not self.clip_global_norm > 0:
            raise ConfigError("clip_global_norm must be positive")


@dataclass
class IncrementalConfig:
    forgetting_factor: float = 1.0
    cold_weight: float = 0.2
    fisher_max_examples: int = 100_000
    step_fraction: float = 0.25  # incremental steps as a fraction of cold-start steps

    def validate(self):
        if self.forgetting_factor < 0:
            raise ConfigError("forgetting_factor must be non-negative")
        if not 0 <= self.cold_weight <= 1:
            raise ConfigError("cold_weight must lie in [0, 1]")
        if not 0 < self.step_fraction <= 1:
            raise ConfigError("step_fraction must lie in (0, 1]")
        if self.fisher_max_examples < 1:
            raise ConfigError("fisher_max_examples must be positive")


def warmup_fraction_for_batch(base_fraction: float, base_batch: int, batch: int) -> float:
    """Double the warmup fraction each time the batch doubles, capped at 60%.

    Batches smaller than ``base_batch`` keep ``base_fraction``.
    """
    if not 0 < base_fraction <= MAX_WARMUP_FRACTION:
        raise ParameterError("base_fraction must lie in (0, 0.6]")
    if base_batch < 1 or batch < 1:
        raise ParameterError("batch sizes must be positive")
    if batch <= base_batch:
        return base_fraction
    return min(MAX_WARMUP_FRACTION, base_fraction * batch / base_batch)


def warmup_steps(config: OptimizerConfig) -> int:
    return int(round(config.warmup_fraction * config.total_steps))


def learning_rate(step: int, config: OptimizerConfig) -> float:
    """Linear ramp peak*(s+1)/W over the first W steps, then constant, or
    with ``decay="linear"`` falling to zero at ``total_steps``."""
    W = warmup_steps(config)
    if step < W:
        return config.peak_learning_rate * (step + 1) / W
    if config.decay == "linear":
        return config.peak_learning_rate * (config.total_steps - step) / max(1, config.total_steps - W)
    return config.peak_learning_rate


def global_norm(params: Sequence[Parameter]) -> float:
    total = 0.0
    for p in params:
        total += float(np.sum(p.grad * p.grad))
    return float(np.sqrt(total))


def clip_global(params: Sequence[Parameter], clip_norm: float = 1.0) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``clip_norm``.

    Returns the factor applied (1.0 when no clipping happened).
    """
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise DivergenceError(f"non-finite gradient in {p.name}")
    g = global_norm(params)
    if g > clip_norm:
        factor = clip_norm / g
        for p in params:
            p.grad *= factor
        return factor
    return 1.0


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: dict[int, tuple] = {}
        self.t = 0

    def step(self, params: Sequence[Parameter], lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in params:
            m, v = self.state.get(id(p), (None, None))
            if m is None:
                m = np.zeros_like(p.value)
                v = np.zeros_like(p.value)
                self.state[id(p)] = (m, v)
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class AdaGrad:
    def __init__(self, eps=1e-10, initial_accumulator=0.0):
        self.eps = eps
        self.initial = initial_accumulator
        self.state: dict[int, np.ndarray] = {}

    def step(self, params: Sequence[Parameter], lr: float):
        for p in params:
            acc = self.state.get(id(p))
            if acc is None:
                acc = np.full_like(p.value, self.initial)
                self.state[id(p)] = acc
            acc += p.grad * p.grad
            p.value -= lr * p.grad / np.sqrt(acc + self.eps)


def make_optimizer(config: OptimizerConfig):
    if config.kind == "adam":
        return Adam(config.beta1, config.beta2, config.adam_eps)
    return AdaGrad(config.adagrad_eps, config.adagrad_initial)


def adam_step(params, lr, optimizer: Adam | None = None) -> Adam:
    optimizer = optimizer or Adam()
    optimizer.step(params, lr)
    return optimizer


def adagrad_step(params, lr, optimizer: AdaGrad | None = None) -> AdaGrad:
    optimizer = optimizer or AdaGrad()
    optimizer.step(params, lr)
    return optimizer


# --- incremental training -------------------------------------------------


@dataclass
class Snapshot:
    """Frozen weights and Fisher diagonals keyed by parameter name."""

    weights: dict[str, np.ndarray]
    fisher: dict[str, np.ndarray]
    kind: str = "cold"  # cold | incremental

    @classmethod
    def from_params(cls, params: Sequence[Parameter], kind: str = "cold") -> "Snapshot":
        weights, fisher = {}, {}
        for p in params:
            weights[p.name] = p.value.copy()
            fisher[p.name] = p.fisher_diag.copy() if p.fisher_diag is not None else np.zeros_like(p.value)
        return cls(weights, fisher, kind)

    def check(self, params: Sequence[Parameter]):
        for p in params:
            if p.name not in self.weights:
                raise SnapshotError(f"snapshot lacks parameter {p.name}")
            if self.weights[p.name].shape != p.shape or self.fisher[p.name].shape != p.shape:
                raise SnapshotError(f"snapshot shape mismatch for {p.name}")


def incremental_penalty(
    params: Sequence[Parameter],
    cold: Snapshot,
    prior: Snapshot,
    forgetting_factor: float,
    cold_weight: float,
    accumulate_grad: bool = False,
) -> float:
    """lambda/2 * [a * sum H0 (w - w0)^2 + (1 - a) * sum H_prev (w - w_prev)^2].

    With ``accumulate_grad`` the gradient
    lambda * [a * H0 (w - w0) + (1 - a) * H_prev (w - w_prev)] is added to each
    parameter's ``grad``.
    """
    if not 0 <= cold_weight <= 1:
        raise ParameterError("cold_weight must lie in [0, 1]")
    cold.check(params)
    prior.check(params)
    a, lam = cold_weight, forgetting_factor
    total = 0.0
    for p in params:
        d0 = p.value - cold.weights[p.name]
        dp = p.value - prior.weights[p.name]
        h0, hp = cold.fisher[p.name], prior.fisher[p.name]
        total += a * float(np.sum(h0 * d0 * d0)) + (1 - a) * float(np.sum(hp * dp * dp))
        if accumulate_grad:
            p.grad += lam * (a * h0 * d0 + (1 - a) * hp * dp)
    return 0.5 * lam * total


def incremental_init(w0, w_prev, cold_weight: float) -> np.ndarray:
    """Elementwise cold_weight * w0 + (1 - cold_weight) * w_prev."""
    if not 0 <= cold_weight <= 1:
        raise ParameterError("cold_weight must lie in [0, 1]")
    w0 = np.asarray(w0, dtype=np.float64)
    w_prev = np.asarray(w_prev, dtype=np.float64)
    if w0.shape != w_prev.shape:
        raise SnapshotError("w0 and w_prev shapes differ")
    return cold_weight * w0 + (1.0 - cold_weight) * w_prev


def apply_incremental_init(params: Sequence[Parameter], cold: Snapshot, prior: Snapshot, cold_weight: float):
    cold.check(params)
    prior.check(params)
    for p in params:
        p.value[...] = incremental_init(cold.weights[p.name], prior.weights[p.name], cold_weight)


def fisher_diag(model: MultiTaskModel, batch: Batch, max_examples: int | None = None) -> dict[str, np.ndarray]:
    """Empirical Fisher diagonal: mean over examples of the squared
    per-example gradient of the total multi-task loss."""
    params = model.parameters()
    n = len(batch) if max_examples is None else min(len(batch), max_examples)
    if n == 0:
        raise ParameterError("fisher_diag needs a non-empty dataset")
    acc = {p.name: np.zeros_like(p.value) for p in params}
    weights = task_weight_vector(model)
    chunk = None
    for i in range(n):
        if i % 256 == 0:
            chunk = batch.take(np.arange(i, min(i + 256, n)))
        one = chunk.take([i % 256])
        model.zero_grad()
        logits = model.forward(one)
        _, g = loss_and_grad(logits, one.labels, one.mask, weights)
        model.backward(g)
        for p in params:
            acc[p.name] += p.grad * p.grad
    model.zero_grad()
    for p in params:
        acc[p.name] /= n
        p.set_fisher(acc[p.name])
    return acc


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    steps: int = 0
    clip_factors: list = field(default_factory=list)


def train(
    model: MultiTaskModel,
    batch: Batch,
    config: OptimizerConfig,
    rng: np.random.Generator,
    penalty: Callable[[Sequence[Parameter]], float] | None = None,
    steps: int | None = None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Minibatch training with linear warmup and global-norm clipping.

    ``penalty(params)`` may add a regularizer; it must accumulate its own
    gradient into ``grad`` and return its value. A non-finite loss or
    gradient, or a parameter that turns non-finite after an update, raises
    :class:`DivergenceError` carrying the step index.
    """
    config.validate()
    params = model.parameters()
    opt = make_optimizer(config)
    steps = config.total_steps if steps is None else steps
    n = len(batch)
    bs = min(config.batch_size, n)
    weights = task_weight_vector(model)
    result = TrainResult()
    order = rng.permutation(n)
    cursor = 0
    epoch_losses = []
    epoch = 0
    for step in range(steps):
        if cursor + bs > n:
            if on_epoch and epoch_losses:
                on_epoch(epoch, float(np.mean(epoch_losses)))
            epoch += 1
            epoch_losses = []
            order = rng.permutation(n)
            cursor = 0
        mb = batch.take(order[cursor : cursor + bs])
        cursor += bs
        model.zero_grad()
        try:
            logits = model.forward(mb)
            loss, g = loss_and_grad(logits, mb.labels, mb.mask, weights)
            model.backward(g)
        except (ParameterError, NumericalError) as exc:
            # a parameter left its valid domain during training
            raise DivergenceError(f"{exc} at step {step}", step=step) from exc
        if penalty is not None:
            loss += penalty(params)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        try:
            factor = clip_global(params, config.clip_global_norm)
        except DivergenceError as exc:
            raise DivergenceError(f"{exc} at step {step}", step=step) from None
        opt.step(params, learning_rate(step, config))
        bad = next((p.name for p in params if not np.all(np.isfinite(p.value))), None)
        if bad is not None:
            raise DivergenceError(f"non-finite parameter {bad} after step {step}", step=step)
        result.losses.append(loss)
        result.clip_factors.append(factor)
        epoch_losses.append(loss)
    if on_epoch and epoch_losses:
        on_epoch(epoch, float(np.mean(epoch_losses)))
    result.steps = steps
    return result


def make_penalty(cold: Snapshot, prior: Snapshot, config: IncrementalConfig):
    def penalty(params):
        return incremental_penalty(params, cold, prior, config.forgetting_factor, config.cold_weight, True)

    return penalty
