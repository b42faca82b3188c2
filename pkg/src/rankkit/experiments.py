"""Desk-scale experiment pipelines shared by the CLI, scripts and the
acceptance suite.

Every function draws its randomness from named streams of an integer seed,
so a pipeline rerun with the same arguments reproduces its numbers exactly.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .calibration import oe_ratio
from .datagen import (
    TrainingExample,
    WorldConfig,
    contribution_probability,
    generate,
    generate_replay_log,
    make_world,
    parse_entity_ids,
    truth_scorer,
)
from .embeddings import EmbeddingConfig
from .errors import ConfigError
from .metrics import auc, replay_contribution_rate
from .model import Batch, ModelConfig, MultiTaskModel
from .tensor import make_rng, sigmoid
from .training import (
    IncrementalConfig,
    OptimizerConfig,
    Snapshot,
    apply_incremental_init,
    fisher_diag,
    make_penalty,
    train,
)
from . import bandit as bn

log = logging.getLogger(__name__)


def fit(model_cfg: ModelConfig, examples, opt: OptimizerConfig, seed: int, steps: int | None = None):
    model = MultiTaskModel(copy.deepcopy(model_cfg), seed=seed)
    batch = Batch.from_examples(examples, model.config)
    train(model, batch, opt, make_rng(seed, "shuffle"), steps=steps)
    return model


def task_auc(model: MultiTaskModel, batch: Batch, task: str = "click") -> float:
    j = model.config.tasks.index(task)
    p = model.predict_proba(batch)[:, j]
    m = batch.mask[:, j]
    return auc(batch.labels[m, j], p[m])


# --- ablation -------------------------------------------------------------------

VARIANTS = (
    "mlp-baseline",
    "+ids",
    "+isotonic",
    "+large-mlp",
    "+gating",
    "+grouping",
    "+lowrank-dcn",
    "+residual-dcn",
    "+quantization",
)


def baseline_config(model_cfg: ModelConfig) -> ModelConfig:
    """Dense features only, a plain tanh MLP, one shared tower."""
    return replace(
        copy.deepcopy(model_cfg),
        id_features=[],
        interaction="none",
        gating=False,
        isotonic=False,
        calibration_feature=None,
        groups={},
    )


def apply_variant(cfg: ModelConfig, variant: str) -> ModelConfig:
    cfg = copy.deepcopy(cfg)
    if variant == "mlp-baseline":
        return baseline_config(cfg)
    if variant == "+ids":
        cfg.id_features = [f for f in ("member", "item") if f in cfg.feature_schema]
    elif variant == "+isotonic":
        cfg.isotonic = True
        if "device" in cfg.feature_schema:
            cfg.calibration_feature = "device"
    elif variant == "+large-mlp":
        cfg.hidden = [2 * h for h in cfg.hidden]
    elif variant == "+gating":
        cfg.gating = True
    elif variant == "+grouping":
        cfg.groups = {t: ("passive" if t == cfg.tasks[0] else "contribution") for t in cfg.tasks}
    elif variant == "+lowrank-dcn":
        cfg.interaction = "lowrank"
    elif variant == "+residual-dcn":
        cfg.interaction = "residual"
    elif variant == "+quantization":
        pass  # applied after training
    else:
        raise ConfigError(f"unknown ablation variant {variant!r}; choose from {', '.join(VARIANTS)}")
    return cfg


def parse_variants(text) -> list[str]:
    names = [v.strip() for v in text.split(",")] if isinstance(text, str) else list(text)
    names = [v for v in names if v]
    if not names:
        raise ConfigError("at least one ablation variant is required")
    for v in names:
        if v not in VARIANTS:
            raise ConfigError(f"unknown ablation variant {v!r}; choose from {', '.join(VARIANTS)}")
    if len(set(names)) != len(names):
        raise ConfigError("ablation variants must be distinct")
    return names


@dataclass
class AblationRow:
    variant: str
    aucs: list
    params: int
    delta_vs_baseline: list = field(default_factory=list)
    step_delta: list = field(default_factory=list)

    @property
    def mean_auc(self) -> float:
        return float(np.mean(self.aucs))

    @staticmethod
    def _sd(x) -> float:
        return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0

    def as_dict(self) -> dict:
        return {
            "variant": self.variant,
            "mean_auc": self.mean_auc,
            "std_auc": self._sd(self.aucs),
            "delta_vs_baseline": float(np.mean(self.delta_vs_baseline)),
            "delta_vs_baseline_std": self._sd(self.delta_vs_baseline),
            "step_delta": float(np.mean(self.step_delta)),
            "step_delta_std": self._sd(self.step_delta),
            "params": self.params,
            "per_seed_auc": [float(a) for a in self.aucs],
        }

    def step_significant(self, sigmas: float = 2.0) -> bool:
        """Mean per-seed gain over the previous row exceeds ``sigmas`` per-seed
        standard deviations of that gain."""
        return float(np.mean(self.step_delta)) > sigmas * self._sd(self.step_delta)


def run_ablation(
    variants,
    model_cfg: ModelConfig | None = None,
    world_cfg: WorldConfig | None = None,
    opt: OptimizerConfig | None = None,
    seeds=(0, 1, 2, 3, 4),
    world_seed: int = 1,
    n_train: int = 60_000,
    n_test: int = 20_000,
    task: str = "click",
    train_examples=None,
    test_examples=None,
) -> list[AblationRow]:
    """Train each variant, stacked cumulatively in the listed order, on every
    seed. One world is shared; data and init vary per seed unless explicit
    train/test examples are given."""
    variants = parse_variants(variants)
    model_cfg = model_cfg or ModelConfig()
    opt = opt or OptimizerConfig(warmup_fraction=0.1)
    world = make_world(world_cfg or WorldConfig(), seed=world_seed) if train_examples is None else None
    cfgs, quant = [], []
    cur = baseline_config(model_cfg)
    q = False
    for v in variants:
        cur = apply_variant(cur, v)
        q = q or v == "+quantization"
        cur.validate()
        cfgs.append(cur)
        quant.append(q)
    rows = [AblationRow(v, [], 0) for v in variants]
    for s in seeds:
        if train_examples is None:
            tr = generate(world, n_train, 0, make_rng(s, "train"))
            te = generate(world, n_test, 0, make_rng(s, "test"))
        else:
            tr, te = train_examples, test_examples
        for i, cfg in enumerate(cfgs):
            model = fit(cfg, tr, opt, s)
            if quant[i]:
                model.quantize_embeddings()
            a = task_auc(model, Batch.from_examples(te, model.config), task)
            rows[i].aucs.append(a)
            rows[i].params = model.summary()["total_params"]
            log.info("ablation seed=%s variant=%s auc=%.5f", s, variants[i], a)
    for i, r in enumerate(rows):
        r.delta_vs_baseline = [a - b for a, b in zip(r.aucs, rows[0].aucs)]
        r.step_delta = [a - b for a, b in zip(r.aucs, rows[i - 1].aucs)] if i else [0.0] * len(r.aucs)
    return rows


def ablation_table_markdown(rows: list[AblationRow]) -> str:
    lines = [
        "| variant | mean AUC | sd | delta vs baseline | sd | step delta | sd | params |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        d = r.as_dict()
        lines.append(
            f"| {d['variant']} | {d['mean_auc']:.5f} | {d['std_auc']:.5f} | {d['delta_vs_baseline']:+.5f} | "
            f"{d['delta_vs_baseline_std']:.5f} | {d['step_delta']:+.5f} | {d['step_delta_std']:.5f} | {d['params']} |"
        )
    return "\n".join(lines) + "\n"


ABLATION_CSV_FIELDS = [
    "variant", "mean_auc", "std_auc", "delta_vs_baseline", "delta_vs_baseline_std",
    "step_delta", "step_delta_std", "params",
]


# --- isotonic calibration study ----------------------------------------------------


@dataclass
class OEResult:
    initial: float
    final: float
    initial_auc: float
    final_auc: float


def miscalibration_data(seed: int, n: int, dim: int = 8, base_rate: float = 0.25, stream: str = "train"):
    """Dense-only examples whose true click logit is linear in the features.

    Returns (examples, true_w, true_b).
    """
    wrng = make_rng(seed, "miscal-world")
    w = wrng.normal(0, 1.0 / np.sqrt(dim), dim)
    # intercept placing the positive rate near ``base_rate``
    probe = wrng.normal(0, 1, (20000, dim)) @ w
    lo, hi = -20.0, 20.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if sigmoid(probe + mid).mean() < base_rate else (lo, mid)
    b = 0.5 * (lo + hi)
    rng = make_rng(seed, f"miscal-{stream}")
    x = rng.normal(0, 1, (n, dim))
    y = (rng.random(n) < sigmoid(x @ w + b)).astype(int)
    ex = [TrainingExample(list(map(float, x[i])), {}, {"click": int(y[i])}, 0, f"m{i}", 1) for i in range(n)]
    return ex, w, b


def isotonic_oe_study(
    seed: int,
    n_train: int = 50_000,
    n_test: int = 200_000,
    dim: int = 8,
    steps: int = 1500,
    lr: float = 0.01,
) -> OEResult:
    """A linear click model starts at twice the true logit, i.e. the truth is
    sigmoid(logit / 2); it is then trained jointly with an isotonic head."""
    tr, w, b = miscalibration_data(seed, n_train, dim, stream="train")
    te, _, _ = miscalibration_data(seed, n_test, dim, stream="test")
    cfg = ModelConfig(
        dense_dim=dim, id_features=[], feature_schema=[], tasks=["click"], hidden=[], isotonic=True
    )
    model = MultiTaskModel(cfg, seed=seed)
    out = model.towers["shared"].out
    out.W.value[0] = 2.0 * w
    out.c.value[0] = 2.0 * b
    bte = Batch.from_examples(te, cfg)
    p0 = model.predict_proba(bte)[:, 0]
    oe0, a0 = oe_ratio(bte.labels[:, 0], p0), auc(bte.labels[:, 0], p0)
    opt = OptimizerConfig(peak_learning_rate=lr, total_steps=steps, warmup_fraction=0.05, decay="linear")
    train(model, Batch.from_examples(tr, cfg), opt, make_rng(seed, "shuffle"))
    p1 = model.predict_proba(bte)[:, 0]
    return OEResult(oe0, oe_ratio(bte.labels[:, 0], p1), a0, auc(bte.labels[:, 0], p1))


# --- compression studies ------------------------------------------------------------


@dataclass
class CompressionResult:
    seed: int
    qr_auc: float
    full_auc: float
    quantized_auc: float
    qr_rows: int
    full_rows: int

    @property
    def compression(self) -> float:
        return self.full_rows / self.qr_rows

    @property
    def qr_relative_loss(self) -> float:
        return (self.full_auc - self.qr_auc) / self.full_auc

    @property
    def quantized_relative_change(self) -> float:
        return abs(self.quantized_auc - self.qr_auc) / self.qr_auc


def compression_study(
    seed: int,
    world_cfg: WorldConfig | None = None,
    world_seed: int = 1,
    n_train: int = 60_000,
    n_test: int = 20_000,
    full_rows: int = 1 << 16,
    quotient: int = 512,
    remainder: int = 128,
    interaction: str = "residual",
    opt: OptimizerConfig | None = None,
) -> CompressionResult:
    """QR tables vs an uncompressed hashed table over the same index space
    (n mod 2^16), then int8 post-training quantization of the QR model."""
    world = make_world(world_cfg or WorldConfig(), seed=world_seed)
    tr = generate(world, n_train, 0, make_rng(seed, "train"))
    te = generate(world, n_test, 0, make_rng(seed, "test"))
    opt = opt or OptimizerConfig(warmup_fraction=0.1)
    qr_cfg = ModelConfig(
        interaction=interaction, embedding=EmbeddingConfig(kind="qr", quotient_size=quotient, remainder_size=remainder)
    )
    full_cfg = ModelConfig(interaction=interaction, embedding=EmbeddingConfig(kind="hashed", rows=full_rows))
    qr = fit(qr_cfg, tr, opt, seed)
    bte = Batch.from_examples(te, qr.config)
    qr_auc = task_auc(qr, bte)
    full_auc = task_auc(fit(full_cfg, tr, opt, seed), bte)
    qr.quantize_embeddings()
    return CompressionResult(seed, qr_auc, full_auc, task_auc(qr, bte), quotient + remainder, full_rows)


# --- incremental training ---------------------------------------------------------------


@dataclass
class IncrementalResult:
    seed: int
    cold_auc: float
    retrain_auc: float
    incremental_aucs: list
    cold_steps: int
    increment_steps: int

    @property
    def mean_incremental_auc(self) -> float:
        return float(np.mean(self.incremental_aucs))

    @property
    def passed(self) -> bool:
        """Incremental models, averaged, match the cold-start baseline on the
        fixed test set while each increment uses at most a quarter of the
        cold-start steps."""
        return self.mean_incremental_auc >= self.cold_auc and self.increment_steps <= 0.25 * self.cold_steps


def incremental_protocol(
    seed: int,
    model_cfg: ModelConfig | None = None,
    world_cfg: WorldConfig | None = None,
    opt: OptimizerConfig | None = None,
    inc: IncrementalConfig | None = None,
    world_seed: int = 1,
    cold_rows: int = 30_000,
    rows_per_window: int = 10_000,
    increments: int = 6,
    n_test: int = 20_000,
    fisher_examples: int = 2000,
    on_checkpoint=None,
) -> IncrementalResult:
    """One cold window followed by ``increments`` daily windows on a drifting world.

    * cold: trained from scratch on window 0 for ``opt.total_steps`` steps;
      this is the baseline
    * incremental: starts from the cold model; each window gets
      ``step_fraction * total_steps`` steps with the Fisher penalty and
      cold-weight initialisation
    * retrain (diagnostic only): trained from scratch on all windows pooled

    Every model is scored on one fixed held-out sample drawn from the window
    after the last increment. ``on_checkpoint(index, model, kind)`` sees the
    cold model and each incremental model.
    """
    world_cfg = world_cfg or WorldConfig(drift_scale=0.5)
    if world_cfg.max_windows < increments + 2:
        world_cfg = replace(world_cfg, max_windows=increments + 2)
    world = make_world(world_cfg, seed=world_seed)
    model_cfg = model_cfg or ModelConfig()
    opt = opt or OptimizerConfig(warmup_fraction=0.1)
    inc = inc or IncrementalConfig()
    inc.validate()
    windows = [generate(world, cold_rows, 0, make_rng(seed, "train-w0"))]
    for w in range(1, increments + 1):
        windows.append(generate(world, rows_per_window, w, make_rng(seed, f"train-w{w}")))
    te = generate(world, n_test, increments + 1, make_rng(seed, "test"))
    bte = Batch.from_examples(te, model_cfg)

    cold = fit(model_cfg, windows[0], opt, seed)
    cold_auc = task_auc(cold, bte)
    retrain_auc = task_auc(fit(model_cfg, [e for w in windows for e in w], opt, seed), bte)

    def snapshot(model, data, kind):
        fisher_diag(model, Batch.from_examples(data, model.config), min(fisher_examples, inc.fisher_max_examples))
        return Snapshot.from_params(model.parameters(), kind)

    cold_snap = snapshot(cold, windows[0], "cold")
    if on_checkpoint:
        on_checkpoint(0, cold, "cold")
    prior_snap = cold_snap
    inc_steps = max(1, int(inc.step_fraction * opt.total_steps))
    model = cold
    aucs = []
    for w in range(1, increments + 1):
        model = MultiTaskModel(copy.deepcopy(model_cfg), seed=seed)
        apply_incremental_init(model.parameters(), cold_snap, prior_snap, inc.cold_weight)
        data = Batch.from_examples(windows[w], model.config)
        step_opt = replace(opt, total_steps=inc_steps)
        train(model, data, step_opt, make_rng(seed, f"shuffle-w{w}"), penalty=make_penalty(cold_snap, prior_snap, inc))
        aucs.append(task_auc(model, bte))
        prior_snap = snapshot(model, windows[w], "incremental")
        if on_checkpoint:
            on_checkpoint(w, model, "incremental")
    return IncrementalResult(seed, cold_auc, retrain_auc, aucs, opt.total_steps, inc_steps)


# --- replay -------------------------------------------------------------------------------


@dataclass
class ReplayStudy:
    seed: int
    truth_rate: float
    random_rate: float
    truth_matched: int
    random_matched: int


def random_scorer(rng: np.random.Generator):
    def score(examples):
        return rng.random(len(examples))

    return score


def contribution_scorer(world):
    """Ground truth P(any contribution) for each candidate."""

    def score(examples):
        rows = np.array([parse_entity_ids(e) for e in examples])
        window = np.array([e.ts // world.config.window_seconds for e in examples])
        dense = np.array([e.dense for e in examples])
        p = world.probabilities(dense, rows[:, 0], rows[:, 1], rows[:, 2], window)
        return contribution_probability(world, p)

    return score


def replay_study(
    seed: int,
    sessions: int = 5000,
    top_n: int = 5,
    candidates: int = 8,
    world_cfg: WorldConfig | None = None,
    world_seed: int = 1,
) -> ReplayStudy:
    """Logs served by the click-truth model with its top ``top_n`` shuffled;
    compares the ground-truth contribution scorer with a random scorer."""
    world = make_world(world_cfg or WorldConfig(), seed=world_seed)
    log_ = generate_replay_log(
        world, truth_scorer(world, world.tasks[0]), sessions, top_n, make_rng(seed, "replay"), candidates
    )
    t = replay_contribution_rate(log_, contribution_scorer(world))
    r = replay_contribution_rate(log_, random_scorer(make_rng(seed, "random-scorer")))
    return ReplayStudy(seed, t.rate, r.rate, t.matched, r.matched)


# --- bandit -------------------------------------------------------------------------------


def regret_curves(
    seeds, rounds: int = 2000, means=(0.9, 0.1), noise_sd: float = 1.0, explore_pulls: int = 10,
    prior_scale: float = 1.0, noise_variance: float = 1.0, update_every: int = 1,
    policies=("thompson", "greedy", "random"),
) -> dict[str, np.ndarray]:
    """policy -> (len(seeds), rounds) cumulative regret on the Gaussian arm bandit."""
    out = {}
    for pol in policies:
        out[pol] = np.stack(
            [
                bn.gaussian_two_arm_regret(
                    make_rng(s, f"bandit-{pol}"), rounds, means, noise_sd, pol, explore_pulls, prior_scale,
                    noise_variance, update_every,
                )
                for s in seeds
            ]
        )
    return out


def contextual_regret(
    model: MultiTaskModel,
    world,
    seed: int,
    rounds: int = 500,
    candidates: int = 8,
    policy: str = "thompson",
    task: str = "click",
    prior_scale: float = 1.0,
    noise_variance: float = 1.0,
    update_every: int = 50,
    explore_pulls: int = 10,
) -> np.ndarray:
    """Select one of ``candidates`` items per round from the model's
    penultimate representation; reward ~ Bernoulli(true task probability)."""
    rng = make_rng(seed, f"ctx-bandit-{policy}")
    c = world.config
    j = world.tasks.index(task)
    dim = model.towers[model.config.group_of(task)].repr_dim
    post = bn.Posterior(dim, prior_scale, noise_variance)
    buf = bn.ReplayBuffer()
    pend_z, pend_y = [], []
    total, regret = 0.0, np.zeros(rounds)
    for t in range(rounds):
        member = int(rng.choice(c.n_members, p=world.member_p))
        device = int(rng.integers(0, c.n_devices))
        items = rng.choice(c.n_items, size=candidates, p=world.item_p)
        dense = rng.normal(0, 1, (candidates, c.dense_dim))
        p = world.probabilities(dense, [member] * candidates, items, [device] * candidates, [0] * candidates)[:, j]
        exs = [
            TrainingExample(
                list(map(float, dense[i])),
                {"member": [f"member:{member}"], "item": [f"item:{int(items[i])}"], "device": [f"device:{device}"]},
                {}, 0, f"b{t}", 1,
            )
            for i in range(candidates)
        ]
        Z = model.representation(Batch.from_examples(exs, model.config), task)
        if policy == "thompson":
            k = bn.select_item(post, Z, rng)
        elif policy == "greedy":
            k = int(rng.integers(0, candidates)) if t < explore_pulls else bn.greedy_item(post, Z)
        elif policy == "random":
            k = int(rng.integers(0, candidates))
        else:
            raise ConfigError(f"unknown policy {policy!r}")
        y = float(rng.random() < p[k])
        pend_z.append(Z[k])
        pend_y.append(y)
        buf.add(Z[k], y)
        if len(pend_z) >= update_every:
            post = bn.posterior_update(post, pend_z, pend_y)
            pend_z, pend_y = [], []
        total += p.max() - p[k]
        regret[t] = total
    return regret
