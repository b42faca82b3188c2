"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL] criterion N: ...`` line.
Run alone with ``python3 tests/test_acceptance.py`` or
``pytest tests/test_acceptance.py -v``.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import conftest  # noqa: E402
import gradcheck  # noqa: E402
from cli_pipeline import full_pipeline, write_config  # noqa: E402

from rankkit import experiments as ex  # noqa: E402
from rankkit.bandit import Posterior, posterior_update, thompson_sample  # noqa: E402
from rankkit.calibration import IsotonicLayer  # noqa: E402
from rankkit.datagen import generate_replay_log, make_world, truth_scorer  # noqa: E402
from rankkit.embeddings import (  # noqa: E402
    QRHashEmbedding,
    dequantize_row,
    int8_roundtrip_check,
    qr_indices,
    quantize_table,
)
from rankkit.layers import AttentionCrossLayer, LowRankCrossLayer  # noqa: E402
from rankkit.metrics import replay_contribution_rate, served_order_scorer  # noqa: E402
from rankkit.model import ModelConfig, MultiTaskModel  # noqa: E402
from rankkit.tensor import make_rng  # noqa: E402
from rankkit.training import Snapshot, incremental_penalty  # noqa: E402

SEEDS5 = (0, 1, 2, 3, 4)
SUITE_BUDGET_S = 30 * 60


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, text: str):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}")
        assert ok, f"criterion {n}: {text}"

    return emit


# --- 1 ------------------------------------------------------------------------------------


def test_criterion_01_gradient_suite(verdict):
    t0 = time.monotonic()
    worst = {name: max(case(seed) for seed in range(20)) for name, case in gradcheck.CASES.items()}
    elapsed = time.monotonic() - t0
    ok = all(v <= gradcheck.RTOL for v in worst.values()) and elapsed < 60
    top = max(worst, key=worst.get)
    verdict(1, ok, f"{len(worst)} layers x 20 seeds, worst rel err {worst[top]:.1e} ({top}) <= 1e-4, {elapsed:.1f}s < 60s")


# --- 2 ------------------------------------------------------------------------------------


def test_criterion_02_identity_scores_degenerate_to_plain_cross(verdict):
    equal = 0
    for seed in range(20):
        rng = make_rng(seed, "degeneracy")
        d, r = int(rng.integers(2, 10)), 0
        r = int(rng.integers(1, d + 1))
        attn = AttentionCrossLayer(d, r, rng, temperature=float(rng.uniform(0.2, 5.0)))
        attn.bias.value[...] = rng.normal(size=d)
        attn.identity_scores = True
        plain = LowRankCrossLayer(d, r)
        plain.U.value[...] = attn.Ua.value
        plain.V.value[...] = attn.Vv.value
        plain.bias.value[...] = attn.bias.value
        x0, xl = rng.normal(size=(7, d)), rng.normal(size=(7, d))
        equal += bool(np.array_equal(attn.forward(x0, xl), plain.forward(x0, xl)))
    verdict(2, equal == 20, f"identity-score attention == plain low-rank cross bit-for-bit on {equal}/20 random layers")


# --- 3 ------------------------------------------------------------------------------------


def _isotonic_property_sweep(n: int = 10_000) -> tuple[int, int]:
    mono = cont = 0
    for i in range(n):
        rng = make_rng(i, "iso-accept")
        K = int(rng.integers(1, 40))
        step = float(rng.uniform(0.01, 1.0))
        vocab = int(rng.integers(0, 3))
        layer = IsotonicLayer(step, K, float(rng.uniform(-10, 5)), calibration_vocab=vocab)
        layer.w.value[...] = rng.normal(size=K) * rng.uniform(0.1, 3.0)
        layer.b.value[...] = rng.normal()
        ci = None
        if vocab:
            layer.embedding.value[...] = rng.normal(size=(vocab, K))
            ci = int(rng.integers(0, vocab))
        y = np.sort(rng.uniform(layer.y_min - 2, layer.y_min + step * K + 2, 64))
        out = layer.forward(y, None if ci is None else np.full(64, ci))
        mono += bool(np.all(np.diff(out) >= 0))
        edges = layer.y_min + step * np.arange(K + 1)
        eps = 1e-9
        idx = None if ci is None else np.full(K + 1, ci)
        gap = np.abs(layer.forward(edges + eps, idx) - layer.forward(edges - eps, idx))
        slope = max(1.0, float(layer.slopes(None if ci is None else np.array([ci])).max()))
        scale = max(1.0, float(np.max(np.abs(out))))
        cont += bool(np.all(gap <= slope * 2 * eps + 1e-12 * scale))
    return mono, cont


def test_criterion_03_isotonic(verdict):
    mono, cont = _isotonic_property_sweep()
    y = np.linspace(-10.0, 10.0, 20_001)[1:]
    ident = float(np.max(np.abs(IsotonicLayer().forward(y) - y)))
    oes = [ex.isotonic_oe_study(s) for s in SEEDS5]
    finals = [r.final for r in oes]
    ok = mono == cont == 10_000 and ident <= 1e-12 and all(0.98 <= f <= 1.02 for f in finals)
    verdict(
        3,
        ok,
        f"monotone {mono}/10000, continuous {cont}/10000, identity err {ident:.1e}; held-out O/E "
        f"{', '.join(f'{r.initial:.3f}->{r.final:.4f}' for r in oes)} (target [0.98, 1.02], 5/5 seeds)",
    )


# --- 4 and 5 share the compression benchmark -------------------------------------------------


@pytest.fixture(scope="module")
def compression():
    t0 = time.monotonic()
    results = [ex.compression_study(s) for s in (0, 1, 2)]
    return results, time.monotonic() - t0


def test_criterion_04_quantization(verdict, compression):
    exhaustive = all(int8_roundtrip_check(v) for v in range(-128, 128))
    ok_bound = True
    for seed in range(50):
        rng = make_rng(seed, "quant-accept")
        full = rng.normal(0, rng.uniform(0.01, 10), (int(rng.integers(1, 200)), int(rng.integers(1, 64))))
        q = quantize_table(full)
        ok_bound &= bool(np.all(np.abs(q.dequantize() - full) <= q.scale[:, None] / 2 + 1e-12))
    q = quantize_table(np.array([[0.0, 1.0]]))
    worked = (
        abs(q.middle[0] - 128 / 255) < 1e-15
        and q.payload.tolist() == [[-128, 127]]
        and np.allclose(dequantize_row(q, 0), [0.0, 1.0], atol=1e-15)
    )
    results, _ = compression
    changes = [r.quantized_relative_change for r in results]
    parity = all(c <= 0.002 for c in changes)
    verdict(
        4,
        exhaustive and ok_bound and worked and parity,
        f"int8 round trip 256/256={exhaustive}, error <= scale/2 on 50 tables={ok_bound}, "
        f"[0,1] row middle=128/255 codes [-128,127]={worked}; quantized AUC relative change "
        f"{', '.join(f'{c:.2e}' for c in changes)} <= 2e-3",
    )


def test_criterion_05_qr_hashing(verdict, compression):
    Q = R = 64
    q, r = qr_indices(np.arange(Q * R), Q, R)
    unique = len(set(zip(q.tolist(), r.tolist()))) == Q * R
    counts = all(
        QRHashEmbedding(Qs, Rs, d).param_count() == (Qs + Rs) * d for Qs, Rs, d in [(64, 64, 8), (4096, 1000, 16), (7, 3, 5)]
    )
    results, elapsed = compression
    losses = [x.qr_relative_loss for x in results]
    ratio = results[0].compression
    ok = unique and counts and ratio >= 100 and float(np.mean(losses)) < 0.005 and elapsed < 600
    verdict(
        5,
        ok,
        f"(q, r) unique over 64x64={unique}, param count (Q+R)*dim={counts}; {ratio:.1f}x compression, "
        f"relative AUC loss per seed {', '.join(f'{l:+.3%}' for l in losses)}, mean {np.mean(losses):+.3%} < 0.5%; "
        f"{elapsed:.0f}s < 600s",
    )


# --- 6 ------------------------------------------------------------------------------------


def _alpha_zero_exact() -> bool:
    model = MultiTaskModel(ModelConfig(interaction="residual"), seed=3)
    rng = make_rng(3, "alpha0")
    params = model.parameters()

    def snap():
        return Snapshot(
            {p.name: rng.normal(size=p.shape) for p in params}, {p.name: rng.random(p.shape) for p in params}
        )

    cold, prior = snap(), snap()
    lam = 2.5
    for p in params:
        p.zero_grad()
    got = incremental_penalty(params, cold, prior, lam, 0.0, accumulate_grad=True)
    # single-anchor form lam/2 * sum H (w - w_prev)^2, same association as the library
    single = 0.0
    for p in params:
        d = p.value - prior.weights[p.name]
        single += float(np.sum(prior.fisher[p.name] * d * d))
    single = 0.5 * lam * single
    grads_ok = all(
        np.array_equal(p.grad, lam * (prior.fisher[p.name] * (p.value - prior.weights[p.name]))) for p in params
    )
    return got == single and grads_ok


def test_criterion_06_incremental(verdict):
    exact = _alpha_zero_exact()
    runs = [ex.incremental_protocol(s) for s in SEEDS5]
    passes = sum(r.passed for r in runs)
    detail = "; ".join(
        f"seed {r.seed}: cold {r.cold_auc:.4f} vs incremental mean {r.mean_incremental_auc:.4f} "
        f"({r.increment_steps}/{r.cold_steps} steps)"
        for r in runs
    )
    verdict(6, exact and passes >= 4, f"alpha=0 penalty equals single-anchor form exactly={exact}; {passes}/5 seeds pass (need 4); {detail}")


# --- 7 ------------------------------------------------------------------------------------


def test_criterion_07_bandit(verdict):
    rng = make_rng(0, "bandit-accept")
    Z, y = rng.normal(size=(40, 4)), rng.normal(size=40)
    lam, s2 = 0.7, 1.3
    p = posterior_update(Posterior(4, lam, s2), Z, y)
    ridge = np.linalg.solve(Z.T @ Z + lam * s2 * np.eye(4), Z.T @ y)
    ridge_err = float(np.max(np.abs(p.mean - ridge)))
    draws = np.stack([thompson_sample(p, rng) for _ in range(100_000)])
    se = np.sqrt(np.diag(p.covariance) / len(draws))
    mean_ok = bool(np.all(np.abs(draws.mean(axis=0) - p.mean) <= 4 * se))
    cov_rel = float(np.linalg.norm(np.cov(draws.T) - p.covariance) / np.linalg.norm(p.covariance))
    curves = ex.regret_curves(range(20), 2000)
    ts, gr = float(curves["thompson"][:, -1].mean()), float(curves["greedy"][:, -1].mean())
    ok = ridge_err <= 1e-10 and mean_ok and cov_rel <= 0.05 and ts < gr
    verdict(
        7,
        ok,
        f"ridge oracle err {ridge_err:.1e} <= 1e-10, MC mean within 4 SE={mean_ok}, MC cov rel err {cov_rel:.3f} <= 0.05; "
        f"mean regret at 2000 rounds over 20 seeds: thompson {ts:.1f} < greedy {gr:.1f}",
    )


# --- 8 ------------------------------------------------------------------------------------


def test_criterion_08_replay(verdict):
    from test_metrics import dense_scorer, hand_fixture

    hand = replay_contribution_rate(hand_fixture(), dense_scorer)
    hand_ok = hand.rate == 0.5 and (hand.matched, hand.matched_with_contribution) == (2, 1)
    world = make_world(seed=1)
    log_ = generate_replay_log(world, truth_scorer(world), 500, 5, make_rng(0, "self-replay"))
    self_ok = replay_contribution_rate(log_, served_order_scorer(log_)).matched == len(log_)
    studies = [ex.replay_study(s, sessions=5000) for s in range(10)]
    wins = sum(s.truth_rate > s.random_rate for s in studies)
    tm, rm = np.mean([s.truth_rate for s in studies]), np.mean([s.random_rate for s in studies])
    ok = hand_ok and self_ok and wins == 10 and tm > rm
    verdict(
        8,
        ok,
        f"hand fixture rate 1/2 counts (2,1)={hand_ok}, self-replay matched == sessions={self_ok}; "
        f"ground truth beats random on {wins}/10 seeds x 5000 sessions, mean rate {tm:.4f} vs {rm:.4f}",
    )


# --- 9 ------------------------------------------------------------------------------------


def test_criterion_09_ablation(verdict):
    variants = ["mlp-baseline", "+ids", "+residual-dcn", "+isotonic"]
    rows = ex.run_ablation(variants, seeds=SEEDS5)
    means = [r.mean_auc for r in rows]
    monotone = all(b >= a for a, b in zip(means, means[1:]))
    sig = {r.variant: r.step_significant(2.0) for r in rows if r.variant in ("+ids", "+residual-dcn")}
    steps = ", ".join(
        f"{r.variant} {np.mean(r.step_delta):+.4f} (sd {np.std(r.step_delta, ddof=1):.4f})" for r in rows[1:]
    )
    verdict(
        9,
        monotone and all(sig.values()),
        f"mean AUC {' -> '.join(f'{m:.4f}' for m in means)} monotone={monotone}; step deltas {steps}; "
        f"2-sigma positive: {sig}",
    )


# --- 10 -----------------------------------------------------------------------------------


def test_criterion_10_determinism(verdict, tmp_path):
    cfg = write_config(tmp_path / "cfg.json", {"seed": 29})
    a = full_pipeline(tmp_path / "run_a", cfg)
    b = full_pipeline(tmp_path / "run_b", cfg)
    same = {k: a[k].read_bytes() == b[k].read_bytes() for k in ("checkpoint", "quantized", "report", "report_csv")}
    data_same = all(
        (a["data"] / f.name).read_bytes() == f.read_bytes() for f in sorted(b["data"].iterdir())
    )
    elapsed = time.monotonic() - conftest.SESSION_START
    ok = all(same.values()) and data_same and elapsed <= SUITE_BUDGET_S
    verdict(
        10,
        ok,
        f"two gen-data -> train -> quantize -> eval runs byte-identical: data={data_same}, "
        f"{', '.join(f'{k}={v}' for k, v in same.items())}; suite elapsed {elapsed:.0f}s <= {SUITE_BUDGET_S}s",
    )


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
