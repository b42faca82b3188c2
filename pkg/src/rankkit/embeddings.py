"""Vocabulary-free sparse-ID embeddings and row-wise 8-bit table quantization.

IDs are hashed with MurmurHash3 (x64, 128-bit variant, seed 0) and the low
64 bits of the digest are split into quotient/remainder indices into two
small tables whose rows are summed. Tables can be replaced post-training by
middle-max int8 quantized copies.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, InputError
from .tensor import Parameter

_M64 = 0xFFFFFFFFFFFFFFFF
_C1 = 0x87C37B91114253D5
_C2 = 0x4CF5AD432745937F


def _rotl64(x: int, r: int) -> int:
    return ((x << r) | (x >> (64 - r))) & _M64


def _fmix64(k: int) -> int:
    k ^= k >> 33
    k = (k * 0xFF51AFD7ED558CCD) & _M64
    k ^= k >> 33
    k = (k * 0xC4CEB9FE1A85EC53) & _M64
    k ^= k >> 33
    return k


def murmurhash3_x64_128(data: bytes, seed: int = 0) -> tuple[int, int]:
    """MurmurHash3_x64_128. Returns (h1, h2); the digest bytes are h1 then
    h2, each little-endian."""
    length = len(data)
    h1 = h2 = seed & 0xFFFFFFFF
    nblocks = length // 16
    for i in range(nblocks):
        k1 = int.from_bytes(data[16 * i : 16 * i + 8], "little")
        k2 = int.from_bytes(data[16 * i + 8 : 16 * i + 16], "little")

        k1 = (k1 * _C1) & _M64
        k1 = _rotl64(k1, 31)
        k1 = (k1 * _C2) & _M64
        h1 ^= k1
        h1 = _rotl64(h1, 27)
        h1 = (h1 + h2) & _M64
        h1 = (h1 * 5 + 0x52DCE729) & _M64

        k2 = (k2 * _C2) & _M64
        k2 = _rotl64(k2, 33)
        k2 = (k2 * _C1) & _M64
        h2 ^= k2
        h2 = _rotl64(h2, 31)
        h2 = (h2 + h1) & _M64
        h2 = (h2 * 5 + 0x38495AB5) & _M64

    tail = data[16 * nblocks :]
    rem = len(tail)
    if rem > 8:
        k2 = int.from_bytes(tail[8:], "little")
        k2 = (k2 * _C2) & _M64
        k2 = _rotl64(k2, 33)
        k2 = (k2 * _C1) & _M64
        h2 ^= k2
    if rem > 0:
        k1 = int.from_bytes(tail[:8], "little")
        k1 = (k1 * _C1) & _M64
        k1 = _rotl64(k1, 31)
        k1 = (k1 * _C2) & _M64
        h1 ^= k1

    h1 ^= length
    h2 ^= length
    h1 = (h1 + h2) & _M64
    h2 = (h2 + h1) & _M64
    h1 = _fmix64(h1)
    h2 = _fmix64(h2)
    h1 = (h1 + h2) & _M64
    h2 = (h2 + h1) & _M64
    return h1, h2


@functools.lru_cache(maxsize=1 << 20)
def hash_id(id_text: str) -> int:
    """Unsigned 64-bit hash of an ID: the first 8 digest bytes (little-endian)
    of MurmurHash3_x64_128 over its UTF-8 encoding, seed 0."""
    return murmurhash3_x64_128(id_text.encode("utf-8"), 0)[0]


def hash_ids(ids) -> np.ndarray:
    return np.fromiter((hash_id(s) for s in ids), dtype=np.uint64, count=len(ids))


def split_hash(h) -> tuple[np.ndarray, np.ndarray]:
    """Reinterpret 64-bit hashes as (low, high) unsigned 32-bit halves."""
    h = np.asarray(h, dtype=np.uint64)
    return (h & np.uint64(0xFFFFFFFF)).astype(np.int64), (h >> np.uint64(32)).astype(np.int64)


def qr_indices(n, quotient_size: int, remainder_size: int) -> tuple[np.ndarray, np.ndarray]:
    """(quotient, remainder) row indices for non-negative integer ids ``n``.

    The quotient is reduced mod ``quotient_size`` because hashed ids span
    the full 32-bit range.
    """
    n = np.asarray(n, dtype=np.int64)
    return (n // remainder_size) % quotient_size, n % remainder_size


@dataclass
class EmbeddingConfig:
    kind: str = "qr"  # "qr" or "hashed" (one row per hash bucket, uncompressed baseline)
    dim: int = 8
    quotient_size: int = 1024
    remainder_size: int = 128
    rows: int = 1 << 16
    split_mode: str = "single32"
    aggregation: str = "sum"
    init_scale: float = 0.05

    def validate(self):
        if self.aggregation != "sum":
            raise ConfigError(
                f"aggregation={self.aggregation!r} rejected: only 'sum' is supported "
                "(multiplicative QR aggregation has convergence problems with near-zero initialisation)"
            )
        if self.kind not in ("qr", "hashed"):
            raise ConfigError(f"unknown embedding kind {self.kind!r}")
        if self.split_mode not in ("single32", "dual32"):
            raise ConfigError(f"unknown split_mode {self.split_mode!r}")
        for name in ("dim", "quotient_size", "remainder_size", "rows"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"embedding {name} must be positive")


class IdBag:
    """Hashed ids of one feature for a batch: flat hashes plus the example
    (segment) each one belongs to. Bags are sum-pooled."""

    __slots__ = ("hashes", "segments", "size")

    def __init__(self, hashes, segments, size: int):
        self.hashes = np.asarray(hashes, dtype=np.uint64)
        self.segments = np.asarray(segments, dtype=np.int64)
        self.size = int(size)

    @classmethod
    def from_lists(cls, id_lists) -> "IdBag":
        flat, seg = [], []
        for i, ids in enumerate(id_lists):
            flat.extend(ids)
            seg.extend([i] * len(ids))
        return cls(hash_ids(flat), seg, len(id_lists))

    def take(self, rows) -> "IdBag":
        """Sub-bag for the examples at ``rows`` (re-numbered 0..len(rows)-1)."""
        rows = np.asarray(rows, dtype=np.int64)
        remap = np.full(self.size, -1, dtype=np.int64)
        remap[rows] = np.arange(len(rows))
        keep = remap[self.segments] >= 0
        order = np.argsort(remap[self.segments[keep]], kind="stable")
        return IdBag(self.hashes[keep][order], remap[self.segments[keep]][order], len(rows))


class QuantizedTable:
    """int8 rows with per-row (middle, scale) so that row_i ~= middle_i + int_i * scale_i."""

    bits = 8

    def __init__(self, payload, middle, scale):
        self.payload = np.asarray(payload, dtype=np.int8)
        self.middle = np.asarray(middle, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        if self.payload.ndim != 2 or self.middle.shape != (self.rows,) or self.scale.shape != (self.rows,):
            raise DimensionError("inconsistent quantized table shapes")

    @property
    def rows(self) -> int:
        return self.payload.shape[0]

    @property
    def dim(self) -> int:
        return self.payload.shape[1]

    def dequantize_rows(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        return self.middle[idx, None] + self.payload[idx].astype(np.float64) * self.scale[idx, None]

    def dequantize(self) -> np.ndarray:
        return self.dequantize_rows(np.arange(self.rows))

    def nbytes(self) -> int:
        return self.payload.nbytes + self.middle.nbytes + self.scale.nbytes


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_table(full) -> QuantizedTable:
    """Middle-max row-wise 8-bit quantization.

    middle = (max * 2^(b-1) + min * (2^(b-1) - 1)) / (2^b - 1),
    scale = (max - min) / (2^b - 1), codes = round((x - middle) / scale).
    Row minima map to -128 and maxima to 127. Constant rows get scale 0.
    """
    full = np.asarray(full, dtype=np.float64)
    if full.ndim != 2:
        raise DimensionError(f"expected a 2-D table, got shape {full.shape}")
    if not np.all(np.isfinite(full)):
        raise InputError("cannot quantize a table with non-finite entries")
    bits = QuantizedTable.bits
    half = 2 ** (bits - 1)
    levels = 2**bits - 1
    mn = full.min(axis=1) if full.shape[1] else np.zeros(full.shape[0])
    mx = full.max(axis=1) if full.shape[1] else np.zeros(full.shape[0])
    middle = (mx * half + mn * (half - 1)) / levels
    scale = (mx - mn) / levels
    const = scale == 0
    middle[const] = mn[const]
    safe = np.where(const, 1.0, scale)
    codes = round_half_away((full - middle[:, None]) / safe[:, None])
    codes[const] = 0
    codes = np.clip(codes, -half, half - 1)
    return QuantizedTable(codes.astype(np.int8), middle, scale)


def dequantize_row(table: QuantizedTable, i: int) -> np.ndarray:
    if not 0 <= i < table.rows:
        raise IndexError(f"row {i} out of range [0, {table.rows})")
    return table.dequantize_rows([i])[0]


def int8_roundtrip_check(x: int) -> bool:
    """cast(cast(x -> int32) -> int8) == x for an int8 value x."""
    v = np.int8(x)
    return bool(np.int32(v).astype(np.int8) == v) and int(np.int32(v)) == int(x)


def int8_roundtrip_selftest() -> bool:
    return all(int8_roundtrip_check(x) for x in range(-128, 128))


class _TableEmbedding:
    """Shared machinery: named float tables (or their quantized copies) and
    sum-pooled lookups."""

    def __init__(self, dim: int):
        self.dim = dim
        self.tables: list[Parameter] = []
        self.quantized: dict[str, QuantizedTable] = {}
        self._cache = None

    def parameters(self):
        return [] if self.quantized else list(self.tables)

    def param_count(self) -> int:
        return sum(t.size for t in self.tables)

    def row_indices(self, hashes) -> list[np.ndarray]:
        """One index array per table, aligned with ``self.tables``."""
        raise NotImplementedError

    def _rows(self, t: int, idx):
        table = self.tables[t]
        if table.name in self.quantized:
            return self.quantized[table.name].dequantize_rows(idx)
        return table.value[idx]

    def lookup_hashes(self, hashes) -> np.ndarray:
        """Embedding per hashed id, shape (len(hashes), dim)."""
        out = np.zeros((len(hashes), self.dim))
        for t, idx in enumerate(self.row_indices(hashes)):
            out += self._rows(t, idx)
        return out

    def forward(self, bag: IdBag) -> np.ndarray:
        idx = self.row_indices(bag.hashes)
        out = np.zeros((bag.size, self.dim))
        per_id = np.zeros((len(bag.hashes), self.dim))
        for t, ix in enumerate(idx):
            per_id += self._rows(t, ix)
        np.add.at(out, bag.segments, per_id)
        self._cache = (bag, idx)
        return out

    def backward(self, g):
        if self.quantized:
            return
        bag, idx = self._cache
        per_id = g[bag.segments]
        for t, ix in enumerate(idx):
            np.add.at(self.tables[t].grad, ix, per_id)

    def quantize(self):
        if self.quantized:
            raise InputError("embedding tables are already quantized")
        self.quantized = {t.name: quantize_table(t.value) for t in self.tables}


class QRHashEmbedding(_TableEmbedding):
    """Quotient-remainder hashed embedding with sum aggregation.

    single32: n = low 32 bits of the hash; emb = Q[(n // R) % Q] + R[n % R].
    dual32: the low and high halves each index an independent (Q, R) pair
    and the four rows are summed.
    """

    def __init__(
        self,
        quotient_size: int,
        remainder_size: int,
        dim: int,
        split_mode: str = "single32",
        aggregation: str = "sum",
        rng: np.random.Generator | None = None,
        init_scale: float = 0.05,
        name: str = "emb",
    ):
        EmbeddingConfig(
            kind="qr", dim=dim, quotient_size=quotient_size, remainder_size=remainder_size,
            split_mode=split_mode, aggregation=aggregation,
        ).validate()
        super().__init__(dim)
        self.quotient_size, self.remainder_size = quotient_size, remainder_size
        self.split_mode = split_mode
        paths = ["lo"] if split_mode == "single32" else ["lo", "hi"]

        def init(rows):
            if rng is None:
                return np.zeros((rows, dim))
            return rng.uniform(-init_scale, init_scale, size=(rows, dim))

        for p in paths:
            self.tables.append(Parameter(f"{name}.{p}.quotient", init(quotient_size)))
            self.tables.append(Parameter(f"{name}.{p}.remainder", init(remainder_size)))

    def row_indices(self, hashes):
        lo, hi = split_hash(hashes)
        out = list(qr_indices(lo, self.quotient_size, self.remainder_size))
        if self.split_mode == "dual32":
            out += list(qr_indices(hi, self.quotient_size, self.remainder_size))
        return out


class HashedEmbedding(_TableEmbedding):
    """One row per hash bucket (low 32 bits mod rows). The uncompressed baseline."""

    def __init__(self, rows: int, dim: int, rng=None, init_scale: float = 0.05, name: str = "emb"):
        super().__init__(dim)
        self.rows = rows
        value = rng.uniform(-init_scale, init_scale, size=(rows, dim)) if rng is not None else np.zeros((rows, dim))
        self.tables.append(Parameter(f"{name}.table", value))

    def row_indices(self, hashes):
        lo, _ = split_hash(hashes)
        return [lo % self.rows]


def build_embedding(cfg: EmbeddingConfig, rng=None, name: str = "emb"):
    cfg.validate()
    if cfg.kind == "qr":
        return QRHashEmbedding(
            cfg.quotient_size, cfg.remainder_size, cfg.dim, cfg.split_mode, cfg.aggregation, rng, cfg.init_scale, name
        )
    return HashedEmbedding(cfg.rows, cfg.dim, rng, cfg.init_scale, name)


def qr_lookup(table: QRHashEmbedding, id_text: str) -> np.ndarray:
    return table.lookup_hashes(np.array([hash_id(id_text)], dtype=np.uint64))[0]


def qr_backward(table: _TableEmbedding, ids: list[str], upstream_grad) -> None:
    """Accumulate ``upstream_grad`` (one row per id) into the touched table rows."""
    g = np.atleast_2d(np.asarray(upstream_grad, dtype=np.float64))
    bag = IdBag.from_lists([[s] for s in ids])
    table.forward(bag)
    table.backward(g)
