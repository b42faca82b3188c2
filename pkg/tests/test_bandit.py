import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rankkit.bandit import (
    Posterior,
    ReplayBuffer,
    gaussian_two_arm_regret,
    greedy_item,
    posterior_update,
    select_item,
    thompson_sample,
)
from rankkit.errors import ConfigError, DimensionError, InputError
from rankkit.tensor import make_rng

Z5 = np.array([[1.0, 0.5, -0.2], [0.3, -1.0, 0.8], [-0.7, 0.2, 0.1], [1.5, 1.1, -0.4], [0.0, -0.3, 2.0]])
Y5 = np.array([1.0, 0.0, 1.0, 1.0, 0.0])


def test_prior_invariants():
    p = Posterior(3, prior_scale=2.0)
    assert np.array_equal(p.precision, 2.0 * np.eye(3)) and np.array_equal(p.moment, np.zeros(3))
    assert np.array_equal(p.mean, np.zeros(3))
    with pytest.raises(ConfigError):
        Posterior(513)


def test_ridge_oracle():
    p = posterior_update(Posterior(3), Z5, Y5)
    ridge = np.linalg.solve(Z5.T @ Z5 + np.eye(3), Z5.T @ Y5)
    assert np.max(np.abs(p.mean - ridge)) <= 1e-10
    assert p.observation_count == 5


def test_empty_batch_and_dimension_errors():
    p = Posterior(3)
    q = posterior_update(p, [], [])
    assert np.array_equal(q.precision, p.precision) and q.observation_count == 0
    with pytest.raises(DimensionError):
        posterior_update(p, np.ones((2, 4)), [1, 2])
    with pytest.raises(DimensionError):
        posterior_update(p, np.ones((2, 3)), [1])


def test_batch_composability():
    a = posterior_update(posterior_update(Posterior(3), Z5[:2], Y5[:2]), Z5[2:], Y5[2:])
    b = posterior_update(Posterior(3), Z5, Y5)
    assert np.max(np.abs(a.precision - b.precision)) <= 1e-10
    assert np.max(np.abs(a.moment - b.moment)) <= 1e-10


def test_degenerate_prior_samples_at_mean():
    p = Posterior(4, prior_scale=1e12)
    s = thompson_sample(p, make_rng(0, "ts"))
    assert np.max(np.abs(s)) < 1e-5


def test_monte_carlo_moments():
    p = posterior_update(Posterior(3, 1.0, 0.5), Z5, Y5)
    rng = make_rng(1, "mc")
    S = np.stack([thompson_sample(p, rng) for _ in range(100_000)])
    cov = p.covariance
    se = np.sqrt(np.diag(cov) / len(S))
    assert np.all(np.abs(S.mean(axis=0) - p.mean) <= 4 * se)
    emp = np.cov(S.T)
    assert np.linalg.norm(emp - cov) / np.linalg.norm(cov) <= 0.05


def test_posterior_contraction():
    N, lam, s2 = 50, 1.0, 2.0
    p = posterior_update(Posterior(2, lam, s2), np.tile([1.0, 0.0], (N, 1)), np.ones(N))
    analytic = 1.0 / (lam + N / s2)
    assert abs(p.covariance[0, 0] - analytic) < 1e-14
    rng = make_rng(2, "contract")
    draws = np.array([thompson_sample(p, rng)[0] for _ in range(40_000)])
    assert abs(draws.var() / analytic - 1.0) < 0.05


def test_selection_rules():
    rng = make_rng(3, "sel")
    p = Posterior(2)
    assert select_item(p, [[0.3, 0.1]], rng) == 0
    with pytest.raises(InputError):
        select_item(p, [], rng)
    sharp = posterior_update(Posterior(2, 1e12), [], [])
    sharp.moment = sharp.precision @ np.array([1.0, -1.0])
    assert select_item(sharp, [[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]], rng) == 1
    # ties break to the lowest index
    assert greedy_item(Posterior(2), [[1.0, 0.0], [0.0, 1.0]]) == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 100))
def test_selection_scale_invariant(seed, c):
    p = posterior_update(Posterior(3), Z5, Y5)
    cands = make_rng(seed, "cand").normal(size=(6, 3))
    a = select_item(p, cands, make_rng(seed, "w"))
    b = select_item(p, c * cands, make_rng(seed, "w"))
    assert a == b


def test_precision_stays_spd_over_many_updates():
    rng = make_rng(4, "spd")
    lam = 0.5
    p = Posterior(4, lam)
    for _ in range(100):
        p = posterior_update(p, rng.normal(size=(100, 4)), rng.random(100))
    assert np.max(np.abs(p.precision - p.precision.T)) <= 1e-10
    assert np.linalg.eigvalsh(p.precision).min() >= lam - 1e-6
    assert p.observation_count == 10_000


def test_replay_buffer_rebuild():
    buf = ReplayBuffer(capacity=3)
    for z, y in zip(Z5, Y5):
        buf.add(z, y)
    assert len(buf.rows) == 3
    p = buf.rebuild(3, 1.0, 1.0)
    q = posterior_update(Posterior(3), Z5[2:], Y5[2:])
    np.testing.assert_allclose(p.precision, q.precision, atol=1e-14)


def test_random_policy_regret_is_linear():
    r = gaussian_two_arm_regret(make_rng(5, "rnd"), 2000, policy="random")
    # expected per-round regret 0.4
    assert abs(r[-1] / 2000 - 0.4) < 0.05
    assert abs(r[999] / 1000 - 0.4) < 0.06
