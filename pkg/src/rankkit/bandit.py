"""Neural-linear Thompson sampling: Bayesian linear regression on the
last-layer inputs of a trained tower, one Gaussian posterior per task."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import ConfigError, DimensionError, InputError, NumericalError

MAX_DIM = 512


@dataclass
class Posterior:
    """Gaussian posterior N(P^-1 b, P^-1) over last-layer weights, with a
    zero-mean N(0, prior_scale^-1 I) prior and Gaussian noise variance."""

    dim: int
    prior_scale: float = 1.0
    noise_variance: float = 1.0
    precision: np.ndarray = None
    moment: np.ndarray = None
    observation_count: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.dim > MAX_DIM:
            raise ConfigError(f"posterior dim must lie in [1, {MAX_DIM}]")
        if not (self.prior_scale > 0 and self.noise_variance > 0):
            raise ConfigError("prior_scale and noise_variance must be positive")
        if self.precision is None:
            self.precision = self.prior_scale * np.eye(self.dim)
        if self.moment is None:
            self.moment = np.zeros(self.dim)
        self.precision = np.asarray(self.precision, dtype=np.float64)
        self.moment = np.asarray(self.moment, dtype=np.float64)

    def copy(self) -> "Posterior":
        return Posterior(
            self.dim, self.prior_scale, self.noise_variance, self.precision.copy(), self.moment.copy(),
            self.observation_count,
        )

    def _cholesky(self):
        try:
            return np.linalg.cholesky(self.precision)
        except np.linalg.LinAlgError:
            try:
                return np.linalg.cholesky(self.precision + 1e-8 * np.eye(self.dim))
            except np.linalg.LinAlgError as exc:
                raise NumericalError("posterior precision is not positive definite") from exc

    @property
    def mean(self) -> np.ndarray:
        L = self._cholesky()
        return cho_solve((L, True), self.moment)

    @property
    def covariance(self) -> np.ndarray:
        L = self._cholesky()
        return cho_solve((L, True), np.eye(self.dim))


def posterior_update(p: Posterior, features, targets) -> Posterior:
    """Return the posterior after observing (z_i, y_i) pairs:
    P += sum z z^T / s2, b += sum z y / s2."""
    if len(features) and np.asarray(features).shape[-1] != p.dim:
        raise DimensionError(f"features must have width {p.dim}")
    Z = np.asarray(features, dtype=np.float64).reshape(-1, p.dim) if len(features) else np.zeros((0, p.dim))
    y = np.asarray(targets, dtype=np.float64).reshape(-1)
    if Z.shape[0] != y.shape[0]:
        raise DimensionError("features and targets must have equal length")
    out = p.copy()
    if Z.shape[0] == 0:
        return out
    out.precision = p.precision + (Z.T @ Z) / p.noise_variance
    out.precision = 0.5 * (out.precision + out.precision.T)
    out.moment = p.moment + (Z.T @ y) / p.noise_variance
    out.observation_count = p.observation_count + Z.shape[0]
    return out


def thompson_sample(p: Posterior, rng: np.random.Generator) -> np.ndarray:
    """One exact draw from N(mu, P^-1): mu + L^-T xi with L L^T = P."""
    L = p._cholesky()
    mu = cho_solve((L, True), p.moment)
    xi = rng.standard_normal(p.dim)
    return mu + solve_triangular(L.T, xi, lower=False)


def select_item(p: Posterior, candidates, rng: np.random.Generator) -> int:
    """Argmax of w . z over candidates for one shared sampled w; lowest index wins ties."""
    Z = np.asarray(candidates, dtype=np.float64)
    if Z.size == 0 or len(Z) == 0:
        raise InputError("select_item needs at least one candidate")
    w = thompson_sample(p, rng)
    return int(np.argmax(Z @ w))


def greedy_item(p: Posterior, candidates) -> int:
    Z = np.asarray(candidates, dtype=np.float64)
    if len(Z) == 0:
        raise InputError("greedy_item needs at least one candidate")
    return int(np.argmax(Z @ p.mean))


@dataclass
class ReplayBuffer:
    """Bounded FIFO of (z, y) rows used to rebuild a posterior after the
    representation is refreshed."""

    capacity: int = 100_000
    rows: deque = field(default_factory=deque)

    def add(self, z, y):
        self.rows.append((np.asarray(z, dtype=np.float64), float(y)))
        while len(self.rows) > self.capacity:
            self.rows.popleft()

    def rebuild(self, dim: int, prior_scale: float, noise_variance: float, transform=None) -> Posterior:
        p = Posterior(dim, prior_scale, noise_variance)
        if not self.rows:
            return p
        Z = np.stack([r[0] for r in self.rows])
        if transform is not None:
            Z = transform(Z)
        return posterior_update(p, Z, [r[1] for r in self.rows])


# --- simulation ---------------------------------------------------------------


def gaussian_two_arm_regret(
    rng: np.random.Generator,
    rounds: int = 2000,
    means=(0.9, 0.1),
    noise_sd: float = 1.0,
    policy: str = "thompson",
    explore_pulls: int = 10,
    prior_scale: float = 1.0,
    noise_variance: float = 1.0,
    update_every: int = 1,
) -> np.ndarray:
    """Cumulative regret curve of one policy on a Gaussian bandit with
    one-hot arm features.

    ``greedy`` pulls arms round-robin for ``explore_pulls`` rounds, then
    always takes the argmax of the posterior mean. Posterior updates are
    applied every ``update_every`` rounds.
    """
    means = np.asarray(means, dtype=np.float64)
    k = len(means)
    Z = np.eye(k)
    post = Posterior(k, prior_scale, noise_variance)
    pending_z, pending_y = [], []
    regret = np.zeros(rounds)
    best = means.max()
    total = 0.0
    for t in range(rounds):
        if policy == "thompson":
            arm = select_item(post, Z, rng)
        elif policy == "greedy":
            arm = t % k if t < explore_pulls else greedy_item(post, Z)
        elif policy == "random":
            arm = int(rng.integers(0, k))
        else:
            raise ConfigError(f"unknown policy {policy!r}")
        reward = means[arm] + noise_sd * rng.standard_normal()
        pending_z.append(Z[arm])
        pending_y.append(reward)
        if len(pending_z) >= update_every:
            post = posterior_update(post, pending_z, pending_y)
            pending_z, pending_y = [], []
        total += best - means[arm]
        regret[t] = total
    return regret
