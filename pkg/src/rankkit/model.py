"""Multi-task ranking model: embeddings -> optional cross block -> grouped
towers -> optional per-task isotonic calibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .calibration import IsotonicLayer
from .datagen import TrainingExample
from .embeddings import EmbeddingConfig, IdBag, build_embedding, split_hash
from .errors import ConfigError, DimensionError, SchemaError
from .layers import MLPTower, Module, ResidualDCNBlock
from .tensor import make_rng, sigmoid

log = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    dense_dim: int = 6
    id_features: list = field(default_factory=lambda: ["member", "item"])
    # every id feature the data may carry; the model embeds only ``id_features``
    feature_schema: list = field(default_factory=lambda: ["member", "item", "device"])
    tasks: list = field(default_factory=lambda: ["click", "like", "comment"])
    groups: dict = field(default_factory=dict)  # task -> group; empty means one shared tower
    task_weights: dict = field(default_factory=dict)  # task -> weight; default 1
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    interaction: str = "none"  # none | lowrank | residual
    rank: int = 4
    cross_layers: int = 2
    temperature: float = 1.0
    hidden: list = field(default_factory=lambda: [32, 16])
    gating: bool = False
    activation: str = "tanh"
    isotonic: bool = False
    iso_step: float = 0.1
    iso_buckets: int = 200
    iso_y_min: float = -10.0
    calibration_feature: str | None = None
    calibration_vocab: int = 16

    def validate(self):
        if self.dense_dim < 0:
            raise ConfigError("dense_dim must be non-negative")
        if not self.tasks:
            raise ConfigError("at least one task is required")
        if self.interaction not in ("none", "lowrank", "residual"):
            raise ConfigError(f"unknown interaction {self.interaction!r}")
        unknown = set(self.groups) - set(self.tasks)
        if unknown:
            raise ConfigError(f"groups reference unknown tasks {sorted(unknown)}")
        if any(w < 0 for w in self.task_weights.values()):
            raise ConfigError("task weights must be non-negative")
        if self.id_features:
            self.embedding.validate()
        if self.input_dim == 0:
            raise ConfigError("model has no inputs")
        extra = (set(self.id_features) | ({self.calibration_feature} - {None})) - set(self.feature_schema)
        if extra:
            raise ConfigError(f"features {sorted(extra)} are not in feature_schema")

    @property
    def input_dim(self) -> int:
        return self.dense_dim + len(self.id_features) * self.embedding.dim

    def group_of(self, task: str) -> str:
        return self.groups.get(task, "shared")

    def group_tasks(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for t in self.tasks:
            out.setdefault(self.group_of(t), []).append(t)
        return out

    def weight(self, task: str) -> float:
        return float(self.task_weights.get(task, 1.0))


class Batch:
    """Column-oriented encoding of a list of examples (ids pre-hashed)."""

    def __init__(self, dense, bags: dict[str, IdBag], labels, mask, tasks):
        self.dense = np.asarray(dense, dtype=np.float64)
        self.bags = bags
        self.labels = np.asarray(labels, dtype=np.float64)
        self.mask = np.asarray(mask, dtype=bool)
        self.tasks = list(tasks)

    def __len__(self):
        return self.dense.shape[0]

    @classmethod
    def from_examples(cls, examples: list[TrainingExample], cfg: ModelConfig) -> "Batch":
        feats = list(cfg.id_features)
        if cfg.calibration_feature and cfg.calibration_feature not in feats:
            feats.append(cfg.calibration_feature)
        known = set(cfg.feature_schema)
        dense = np.zeros((len(examples), cfg.dense_dim))
        labels = np.zeros((len(examples), len(cfg.tasks)))
        mask = np.zeros((len(examples), len(cfg.tasks)), dtype=bool)
        lists = {f: [] for f in feats}
        for i, ex in enumerate(examples):
            if len(ex.dense) != cfg.dense_dim:
                raise SchemaError(f"example has {len(ex.dense)} dense features, model expects {cfg.dense_dim}")
            dense[i] = ex.dense
            for name in ex.ids:
                if name not in known:
                    raise SchemaError(f"unknown id feature {name!r}")
            for f in feats:
                lists[f].append(ex.ids.get(f, []))
            for j, t in enumerate(cfg.tasks):
                v = ex.labels.get(t)
                if v is not None:
                    labels[i, j] = v
                    mask[i, j] = True
        bags = {f: IdBag.from_lists(lists[f]) for f in feats}
        return cls(dense, bags, labels, mask, cfg.tasks)

    def take(self, rows) -> "Batch":
        rows = np.asarray(rows, dtype=np.int64)
        return Batch(
            self.dense[rows],
            {k: b.take(rows) for k, b in self.bags.items()},
            self.labels[rows],
            self.mask[rows],
            self.tasks,
        )


class MultiTaskModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, rng: np.random.Generator | None = None):
        config.validate()
        self.config = config
        rng = rng if rng is not None else make_rng(seed, "init")
        self.embeddings = {f: build_embedding(config.embedding, rng, name=f"emb.{f}") for f in config.id_features}
        d = config.input_dim
        self.interaction = None
        if config.interaction != "none":
            self.interaction = ResidualDCNBlock(
                d,
                min(config.rank, d),
                config.cross_layers,
                attention=config.interaction == "residual",
                rng=rng,
                temperature=config.temperature,
                name="dcn",
            )
        self.groups = config.group_tasks()
        self.towers = {
            g: MLPTower(d, list(config.hidden), len(ts), config.gating, config.activation, rng, name=f"tower.{g}")
            for g, ts in self.groups.items()
        }
        self.isotonic = {}
        if config.isotonic:
            vocab = config.calibration_vocab if config.calibration_feature else 0
            for t in config.tasks:
                self.isotonic[t] = IsotonicLayer(config.iso_step, config.iso_buckets, config.iso_y_min, vocab, f"iso.{t}")
        self._cache = None

    def parameters(self):
        out = []
        for f in self.config.id_features:
            out += self.embeddings[f].parameters()
        if self.interaction is not None:
            out += self.interaction.parameters()
        for g in self.groups:
            out += self.towers[g].parameters()
        for t in self.config.tasks:
            if t in self.isotonic:
                out += self.isotonic[t].parameters()
        return out

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def all_tensors(self) -> list:
        """Every float parameter, including frozen (quantized-away) tables."""
        out = []
        for f in self.config.id_features:
            out += self.embeddings[f].tables
        return out + [p for p in self.parameters() if not p.name.startswith("emb.")]

    def summary(self) -> dict:
        s = {
            "embeddings": {f: e.param_count() for f, e in self.embeddings.items()},
            "interaction": self.interaction.summary() if self.interaction is not None else None,
            "towers": {g: t.param_count() for g, t in self.towers.items()},
            "isotonic": {t: l.param_count() for t, l in self.isotonic.items()},
        }
        s["total_params"] = sum(p.size for p in self.all_tensors())
        return s

    def _calib_index(self, batch: Batch):
        f = self.config.calibration_feature
        if not f:
            return None
        bag = batch.bags[f]
        idx = np.zeros(len(batch), dtype=np.int64)
        lo, _ = split_hash(bag.hashes)
        # first id of each bag wins; empty bags use row 0
        idx[bag.segments[::-1]] = (lo % self.config.calibration_vocab)[::-1]
        return idx

    def forward(self, batch: Batch, return_raw: bool = False):
        """(B, T) logits in task order."""
        cfg = self.config
        if batch.dense.shape[1] != cfg.dense_dim:
            raise SchemaError("dense width does not match model")
        parts = [batch.dense]
        for f in cfg.id_features:
            if f not in batch.bags:
                raise SchemaError(f"batch lacks id feature {f!r}")
            parts.append(self.embeddings[f].forward(batch.bags[f]))
        x = np.concatenate(parts, axis=1)
        h = self.interaction.forward(x) if self.interaction is not None else x
        raw = np.zeros((len(batch), len(cfg.tasks)))
        for g, ts in self.groups.items():
            out = self.towers[g].forward(h)
            for j, t in enumerate(ts):
                raw[:, cfg.tasks.index(t)] = out[:, j]
        logits = raw
        calib = None
        if self.isotonic:
            calib = self._calib_index(batch)
            logits = raw.copy()
            for j, t in enumerate(cfg.tasks):
                logits[:, j] = self.isotonic[t].forward(raw[:, j], calib)
        self._cache = (x, h)
        return (logits, raw) if return_raw else logits

    def backward(self, dlogits):
        cfg = self.config
        draw = np.array(dlogits, dtype=np.float64)
        if self.isotonic:
            for j, t in enumerate(cfg.tasks):
                draw[:, j] = self.isotonic[t].backward(draw[:, j])
        x, h = self._cache
        dh = np.zeros_like(h)
        for g, ts in self.groups.items():
            cols = [cfg.tasks.index(t) for t in ts]
            dh += self.towers[g].backward(draw[:, cols])
        dx = self.interaction.backward(dh) if self.interaction is not None else dh
        off = cfg.dense_dim
        for f in cfg.id_features:
            e = self.embeddings[f]
            e.backward(dx[:, off : off + e.dim])
            off += e.dim
        return dx

    def representation(self, batch: Batch, task: str) -> np.ndarray:
        """Penultimate activations (input to the output layer) of the tower serving ``task``."""
        self.forward(batch)
        return self.towers[self.config.group_of(task)].last_hidden.copy()

    def predict_proba(self, batch: Batch, chunk: int = 4096) -> np.ndarray:
        out = []
        for s in range(0, len(batch), chunk):
            out.append(sigmoid(self.forward(batch.take(np.arange(s, min(s + chunk, len(batch)))))))
        return np.concatenate(out, axis=0) if out else np.zeros((0, len(self.config.tasks)))

    def quantize_embeddings(self):
        for e in self.embeddings.values():
            e.quantize()

    @property
    def is_quantized(self) -> bool:
        return any(e.quantized for e in self.embeddings.values())


def bce_with_logits(z, y):
    return np.logaddexp(0.0, z) - y * z


def loss_and_grad(logits, labels, mask, weights) -> tuple[float, np.ndarray]:
    """Sum over tasks of weight * mean BCE over unmasked rows, and d loss / d logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != labels.shape:
        raise DimensionError("logits and labels shapes differ")
    total = 0.0
    grad = np.zeros_like(logits)
    for j, w in enumerate(weights):
        m = mask[:, j]
        n = int(m.sum())
        if n == 0:
            log.warning("task column %d has no labels in this batch; contributes 0", j)
            continue
        z, y = logits[m, j], labels[m, j]
        total += w * float(bce_with_logits(z, y).sum()) / n
        grad[m, j] = w * (sigmoid(z) - y) / n
    return total, grad


def task_weight_vector(model: MultiTaskModel) -> list[float]:
    return [model.config.weight(t) for t in model.config.tasks]


def multitask_loss(model: MultiTaskModel, batch: Batch) -> float:
    logits = model.forward(batch)
    return loss_and_grad(logits, batch.labels, batch.mask, task_weight_vector(model))[0]


def multitask_forward(model: MultiTaskModel, example: TrainingExample) -> dict[str, float]:
    logits = model.forward(Batch.from_examples([example], model.config))[0]
    return {t: float(logits[j]) for j, t in enumerate(model.config.tasks)}
