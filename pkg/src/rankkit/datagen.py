"""Synthetic multi-task CTR world: sparse ids, an explicit pairwise cross
term, per-window item drift, and randomized replay-session logs.

Ground-truth logit of task t for one impression:

    base_t + a_t * (w . dense + cross(dense) + s_lat * <member, item>
                    + member_bias + item_bias + device_bias + drift(window, item))

optionally passed through a per-device monotone distortion so that
calibration features carry signal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import InputError
from .tensor import make_rng, sigmoid


@dataclass
class TrainingExample:
    dense: list[float]
    ids: dict[str, list[str]]
    labels: dict[str, int | None]
    ts: int = 0
    session: str = ""
    pos: int = 1

    def __post_init__(self):
        if not all(np.isfinite(self.dense)):
            raise InputError("dense features must be finite")
        if self.labels and all(v is None for v in self.labels.values()):
            raise InputError("example needs at least one label")

    def to_json(self) -> dict:
        return {
            "dense": [float(x) for x in self.dense],
            "ids": {k: list(v) for k, v in self.ids.items()},
            "labels": {k: v for k, v in self.labels.items() if v is not None},
            "ts": int(self.ts),
            "session": self.session,
            "pos": int(self.pos),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TrainingExample":
        expected = {"dense", "ids", "labels", "ts", "session", "pos"}
        if set(obj) != expected:
            raise InputError(f"example fields must be exactly {sorted(expected)}, got {sorted(obj)}")
        return cls(
            dense=[float(x) for x in obj["dense"]],
            ids={k: [str(s) for s in v] for k, v in obj["ids"].items()},
            labels={k: int(v) for k, v in obj["labels"].items()},
            ts=int(obj["ts"]),
            session=str(obj["session"]),
            pos=int(obj["pos"]),
        )


def write_jsonl(path, examples: Iterable[TrainingExample]):
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> list[TrainingExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TrainingExample.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    return out


@dataclass
class WorldConfig:
    n_members: int = 1000
    n_items: int = 1000
    n_devices: int = 4
    dense_dim: int = 6
    latent_dim: int = 4
    zipf_s: float = 1.2
    tasks: tuple = ("click", "like", "comment")
    positive_rates: tuple = (0.10, 0.04, 0.01)
    task_scales: tuple = (1.0, 0.9, 0.8)
    dense_scale: float = 0.3
    cross_strength: float = 1.0
    latent_scale: float = 1.5
    member_bias_scale: float = 0.7
    item_bias_scale: float = 0.7
    device_bias_scale: float = 0.3
    device_distortion: float = 1.0
    drift_scale: float = 0.0
    drift_fraction: float = 0.3
    max_windows: int = 8
    session_size: int = 5
    window_seconds: int = 86400
    zero: bool = False


@dataclass
class WorldModel:
    config: WorldConfig
    dense_w: np.ndarray
    cross_pairs: np.ndarray
    cross_coef: np.ndarray
    member_latent: np.ndarray
    item_latent: np.ndarray
    member_bias: np.ndarray
    item_bias: np.ndarray
    device_bias: np.ndarray
    device_slope: np.ndarray
    item_drift: np.ndarray
    base: np.ndarray
    member_p: np.ndarray = field(repr=False, default=None)
    item_p: np.ndarray = field(repr=False, default=None)

    @property
    def tasks(self) -> list[str]:
        return list(self.config.tasks)

    def add_drift(self, window: int, item: int, amount: float):
        """Shift one item's bias from ``window`` onwards."""
        self.item_drift[window:, item] += amount

    def shared_logit(self, dense, member, item, device, window) -> np.ndarray:
        c = self.config
        dense = np.atleast_2d(dense)
        z = dense @ self.dense_w
        if len(self.cross_pairs):
            z = z + c.cross_strength * np.sum(
                self.cross_coef * dense[:, self.cross_pairs[:, 0]] * dense[:, self.cross_pairs[:, 1]], axis=1
            )
        z = z + c.latent_scale * np.sum(self.member_latent[member] * self.item_latent[item], axis=1)
        z = z + self.member_bias[member] + self.item_bias[item] + self.device_bias[device]
        window = np.clip(np.asarray(window), 0, c.max_windows - 1)
        return z + self.item_drift[window, item]

    def task_logits(self, dense, member, item, device, window) -> np.ndarray:
        """(n, T) ground-truth logits."""
        c = self.config
        s = self.shared_logit(dense, member, item, device, window)
        scales = np.asarray(c.task_scales[: len(c.tasks)])
        z = s[:, None] * scales[None, :]
        if c.device_distortion:
            z = z * self.device_slope[device][:, None]
        return z + self.base[None, :]

    def probabilities(self, dense, member, item, device, window) -> np.ndarray:
        return sigmoid(self.task_logits(dense, member, item, device, window))

    def example_probability(self, ex: TrainingExample, task: str | None = None) -> float | np.ndarray:
        member, item, device = parse_entity_ids(ex)
        window = ex.ts // self.config.window_seconds
        p = self.probabilities(np.asarray(ex.dense)[None, :], [member], [item], [device], [window])[0]
        return p if task is None else float(p[self.tasks.index(task)])


def parse_entity_ids(ex: TrainingExample) -> tuple[int, int, int]:
    def one(name):
        return int(ex.ids[name][0].split(":", 1)[1])

    return one("member"), one("item"), one("device")


def _zipf_p(n: int, s: float) -> np.ndarray:
    p = 1.0 / np.arange(1, n + 1) ** s
    return p / p.sum()


def make_world(config: WorldConfig | None = None, seed: int = 0) -> WorldModel:
    c = config or WorldConfig()
    rng = make_rng(seed, "world")
    T = len(c.tasks)
    D, L = c.dense_dim, c.latent_dim
    dense_w = rng.normal(0, c.dense_scale, D)
    pairs = np.array([(i, j) for i in range(D) for j in range(i + 1, D)], dtype=np.int64)
    if len(pairs):
        pick = rng.choice(len(pairs), size=min(len(pairs), max(1, D // 2)), replace=False)
        pairs = pairs[np.sort(pick)]
    cross_coef = rng.choice([-1.0, 1.0], size=len(pairs)) * rng.uniform(0.5, 1.0, len(pairs))
    member_latent = rng.normal(0, 1.0 / np.sqrt(np.sqrt(L)), (c.n_members, L))
    item_latent = rng.normal(0, 1.0 / np.sqrt(np.sqrt(L)), (c.n_items, L))
    member_bias = rng.normal(0, c.member_bias_scale, c.n_members)
    item_bias = rng.normal(0, c.item_bias_scale, c.n_items)
    device_bias = rng.normal(0, c.device_bias_scale, c.n_devices)
    device_slope = np.exp(rng.uniform(-np.log(2.0), np.log(2.0), c.n_devices)) if c.device_distortion else np.ones(
        c.n_devices
    )
    if c.device_distortion:
        device_slope = 1.0 + c.device_distortion * (device_slope - 1.0)
    steps = np.zeros((c.max_windows, c.n_items))
    if c.drift_scale:
        for w in range(1, c.max_windows):
            mask = rng.random(c.n_items) < c.drift_fraction
            steps[w] = mask * rng.normal(0, c.drift_scale, c.n_items)
    item_drift = np.cumsum(steps, axis=0)
    world = WorldModel(
        config=c,
        dense_w=dense_w,
        cross_pairs=pairs,
        cross_coef=cross_coef,
        member_latent=member_latent,
        item_latent=item_latent,
        member_bias=member_bias,
        item_bias=item_bias,
        device_bias=device_bias,
        device_slope=device_slope,
        item_drift=item_drift,
        base=np.zeros(T),
        member_p=_zipf_p(c.n_members, c.zipf_s),
        item_p=_zipf_p(c.n_items, c.zipf_s),
    )
    if c.zero:
        for arr in (world.dense_w, world.cross_coef, world.member_latent, world.item_latent,
                    world.member_bias, world.item_bias, world.device_bias, world.item_drift):
            arr[...] = 0.0
        world.device_slope[...] = 1.0
        return world
    # intercepts hitting the target positive rates on window 0
    cal = _sample_raw(world, 20000, 0, make_rng(seed, "world-calibration"))
    shared = world.shared_logit(cal["dense"], cal["member"], cal["item"], cal["device"], cal["window"])
    slope = world.device_slope[cal["device"]] if c.device_distortion else 1.0
    for t in range(T):
        zt = shared * c.task_scales[t] * slope
        lo, hi = -30.0, 30.0
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if sigmoid(zt + mid).mean() < c.positive_rates[t]:
                lo = mid
            else:
                hi = mid
        world.base[t] = 0.5 * (lo + hi)
    return world


def _sample_raw(world: WorldModel, n: int, window: int, rng: np.random.Generator) -> dict:
    c = world.config
    n_sessions = -(-n // c.session_size)
    members = rng.choice(c.n_members, size=n_sessions, p=world.member_p)
    devices = rng.integers(0, c.n_devices, size=n_sessions)
    sess = np.repeat(np.arange(n_sessions), c.session_size)[:n]
    return {
        "dense": rng.normal(0, 1, (n, c.dense_dim)),
        "member": members[sess],
        "item": rng.choice(c.n_items, size=n, p=world.item_p),
        "device": devices[sess],
        "window": np.full(n, window),
        "session": sess,
        "pos": np.tile(np.arange(1, c.session_size + 1), n_sessions)[:n],
    }


def make_example(world: WorldModel, dense, member, item, device, window, labels, session, pos, offset=0):
    return TrainingExample(
        dense=[float(x) for x in dense],
        ids={"member": [f"member:{member}"], "item": [f"item:{item}"], "device": [f"device:{device}"]},
        labels=labels,
        ts=int(window) * world.config.window_seconds + int(offset),
        session=session,
        pos=int(pos),
    )


def generate(world: WorldModel, n: int, window: int, rng: np.random.Generator) -> list[TrainingExample]:
    """Draw ``n`` labelled impressions from ``window``; labels ~ Bernoulli(truth)."""
    if n < 1:
        raise InputError("n must be >= 1")
    raw = _sample_raw(world, n, window, rng)
    p = world.probabilities(raw["dense"], raw["member"], raw["item"], raw["device"], raw["window"])
    y = (rng.random(p.shape) < p).astype(int)
    offsets = rng.integers(0, world.config.window_seconds, size=int(raw["session"].max()) + 1)
    tasks = world.tasks
    out = []
    for i in range(n):
        s = int(raw["session"][i])
        out.append(
            make_example(
                world, raw["dense"][i], raw["member"][i], raw["item"][i], raw["device"][i], window,
                {t: int(y[i, j]) for j, t in enumerate(tasks)}, f"w{window}-s{s}", raw["pos"][i], offsets[s],
            )
        )
    return out


@dataclass
class ReplaySession:
    session_id: str
    served_ranking: list[str]
    contributions: set
    candidate_features: dict[str, TrainingExample]

    def __post_init__(self):
        if not self.served_ranking:
            raise InputError("served_ranking must be non-empty")
        if len(set(self.served_ranking)) != len(self.served_ranking):
            raise InputError("served_ranking ids must be unique")

    def to_json(self) -> dict:
        return {
            "session": self.session_id,
            "served": list(self.served_ranking),
            "contributions": sorted(self.contributions),
            "candidates": {k: v.to_json() for k, v in self.candidate_features.items()},
        }

    @classmethod
    def from_json(cls, obj) -> "ReplaySession":
        return cls(
            session_id=obj["session"],
            served_ranking=list(obj["served"]),
            contributions=set(obj["contributions"]),
            candidate_features={k: TrainingExample.from_json(v) for k, v in obj["candidates"].items()},
        )


def write_replay_jsonl(path, sessions: Iterable[ReplaySession]):
    with open(path, "w", encoding="utf-8") as fh:
        for s in sessions:
            fh.write(json.dumps(s.to_json(), sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def read_replay_jsonl(path) -> list[ReplaySession]:
    with open(path, encoding="utf-8") as fh:
        return [ReplaySession.from_json(json.loads(line)) for line in fh if line.strip()]


Scorer = Callable[[list[TrainingExample]], np.ndarray]


def truth_scorer(world: WorldModel, task: str = "click") -> Scorer:
    j = world.tasks.index(task)

    def score(examples):
        return np.array([world.example_probability(ex)[j] for ex in examples])

    return score


def contribution_probability(world: WorldModel, p: np.ndarray) -> np.ndarray:
    """P(any contribution action) from per-task probabilities (n, T); every
    task but the first (click) counts as a contribution."""
    return 1.0 - np.prod(1.0 - p[:, 1:], axis=1)


def generate_replay_log(
    world: WorldModel,
    model_under_randomization: Scorer,
    sessions: int,
    top_n: int,
    rng: np.random.Generator,
    candidates: int = 8,
    window: int = 0,
) -> list[ReplaySession]:
    """Rank each session's candidates with the serving model, shuffle its
    top ``top_n`` uniformly, and draw contributions from ground truth at the
    served positions (examination probability 1/position)."""
    if top_n < 2:
        raise InputError("top_n must be >= 2")
    c = world.config
    candidates = max(candidates, top_n)
    out = []
    for s in range(sessions):
        member = int(rng.choice(c.n_members, p=world.member_p))
        device = int(rng.integers(0, c.n_devices))
        items = []
        while len(items) < candidates:
            it = int(rng.choice(c.n_items, p=world.item_p))
            if it not in items:
                items.append(it)
        dense = rng.normal(0, 1, (candidates, c.dense_dim))
        sid = f"r{window}-s{s}"
        exs = {
            f"item:{it}": make_example(world, dense[i], member, it, device, window, {t: 0 for t in world.tasks}, sid, 1)
            for i, it in enumerate(items)
        }
        keys = list(exs)
        scores = np.asarray(model_under_randomization([exs[k] for k in keys]), dtype=np.float64)
        order = sorted(range(len(keys)), key=lambda i: (-scores[i], i))
        top = order[:top_n]
        top = [top[i] for i in rng.permutation(len(top))]
        served = [keys[i] for i in top + order[top_n:]]
        p = world.probabilities(
            dense, [member] * candidates, items, [device] * candidates, [window] * candidates
        )
        pc = contribution_probability(world, p)
        contributions = set()
        for pos, key in enumerate(served, 1):
            i = keys.index(key)
            exs[key].pos = pos
            if rng.random() < pc[i] / pos:
                contributions.add(key)
        out.append(ReplaySession(sid, served, contributions, exs))
    return out

