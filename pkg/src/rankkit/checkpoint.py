"""Binary checkpoint format.

Layout: magic ``b"LRK1"``, format version (u32 LE), manifest length (u64 LE),
UTF-8 JSON manifest, then a contiguous little-endian payload. The manifest
lists every tensor as {name, shape, dtype in {f64, i8}, byte_offset,
byte_length} with offsets relative to the payload start, plus model
config, snapshot kind, quantization and posterior metadata.

Tensor naming: ``param/<p>``, ``fisher/<p>``, ``quant/<table>/{payload,middle,scale}``,
``posterior/<task>/{precision,moment}``.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .bandit import Posterior
from .config import _build, _to_plain
from .embeddings import QuantizedTable
from .errors import InputError, SchemaError
from .model import ModelConfig, MultiTaskModel

MAGIC = b"LRK1"
FORMAT_VERSION = 1
_DTYPES = {"f64": np.dtype("<f8"), "i8": np.dtype("i1")}


def _dtype_name(arr: np.ndarray) -> str:
    if arr.dtype == np.int8:
        return "i8"
    if arr.dtype == np.float64:
        return "f64"
    raise TypeError(f"unsupported dtype {arr.dtype}")


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict):
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")
        dt = _dtype_name(arr)
        raw = arr.astype(_DTYPES[dt], copy=False).tobytes(order="C")
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": dt, "byte_offset": offset, "byte_length": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(meta)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = entries
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(mbytes)))
        fh.write(mbytes)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    version, mlen = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    start = 16
    manifest = json.loads(blob[start : start + mlen].decode("utf-8"))
    payload = memoryview(blob)[start + mlen :]
    tensors = {}
    for e in manifest["tensors"]:
        dt = _DTYPES[e["dtype"]]
        raw = payload[e["byte_offset"] : e["byte_offset"] + e["byte_length"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="), copy=True)
    return tensors, manifest


def model_tensors(model: MultiTaskModel) -> dict[str, np.ndarray]:
    out = {}
    quantized = {}
    for e in model.embeddings.values():
        quantized.update(e.quantized)
    for p in model.all_tensors():
        if p.name in quantized:
            q = quantized[p.name]
            out[f"quant/{p.name}/payload"] = q.payload
            out[f"quant/{p.name}/middle"] = q.middle
            out[f"quant/{p.name}/scale"] = q.scale
        else:
            out[f"param/{p.name}"] = p.value
        if p.fisher_diag is not None:
            out[f"fisher/{p.name}"] = p.fisher_diag
    return out


def save_model(
    path,
    model: MultiTaskModel,
    kind: str = "cold",
    posteriors: dict[str, Posterior] | None = None,
    meta: dict | None = None,
):
    """Write model weights, Fisher diagonals, quantized tables and posteriors.

    ``kind`` is the snapshot flag: ``cold`` for a cold-start model (w0, H0),
    ``incremental`` for an incrementally trained one (w_t, H_t).
    """
    tensors = model_tensors(model)
    post_meta = {}
    for task, p in (posteriors or {}).items():
        tensors[f"posterior/{task}/precision"] = p.precision
        tensors[f"posterior/{task}/moment"] = p.moment
        post_meta[task] = {
            "dim": p.dim,
            "prior_scale": p.prior_scale,
            "noise_variance": p.noise_variance,
            "observation_count": p.observation_count,
        }
    quantized = sorted(
        name for e in model.embeddings.values() for name in e.quantized
    )
    manifest = {
        "kind": kind,
        "model_config": _to_plain(model.config),
        "quantized": quantized,
        "posteriors": post_meta,
        "meta": meta or {},
    }
    write_checkpoint(path, tensors, manifest)


def load_model(path) -> tuple[MultiTaskModel, dict, dict[str, Posterior]]:
    tensors, manifest = read_checkpoint(path)
    cfg = _build(ModelConfig, manifest["model_config"], "model_config")
    model = MultiTaskModel(cfg, seed=0)
    quantized = set(manifest.get("quantized", []))
    for p in model.all_tensors():
        if p.name in quantized:
            q = QuantizedTable(
                tensors[f"quant/{p.name}/payload"], tensors[f"quant/{p.name}/middle"], tensors[f"quant/{p.name}/scale"]
            )
            if (q.rows, q.dim) != p.shape:
                raise SchemaError(f"quantized table {p.name} has shape {(q.rows, q.dim)}, expected {p.shape}")
            for e in model.embeddings.values():
                if any(t is p for t in e.tables):
                    e.quantized[p.name] = q
            p.value[...] = q.dequantize()
        else:
            key = f"param/{p.name}"
            if key not in tensors:
                raise SchemaError(f"checkpoint lacks tensor {p.name}")
            if tensors[key].shape != p.shape:
                raise SchemaError(f"tensor {p.name} has shape {tensors[key].shape}, expected {p.shape}")
            p.value[...] = tensors[key]
        fk = f"fisher/{p.name}"
        if fk in tensors:
            p.set_fisher(tensors[fk])
    posteriors = {}
    for task, m in manifest.get("posteriors", {}).items():
        posteriors[task] = Posterior(
            m["dim"],
            m["prior_scale"],
            m["noise_variance"],
            tensors[f"posterior/{task}/precision"],
            tensors[f"posterior/{task}/moment"],
            m["observation_count"],
        )
    return model, manifest, posteriors


def check_topology(model: MultiTaskModel, other_config: ModelConfig):
    """Raise SchemaError unless both configs build identically shaped parameters."""
    probe = MultiTaskModel(other_config, seed=0)
    mine = {p.name: p.shape for p in model.all_tensors()}
    theirs = {p.name: p.shape for p in probe.all_tensors()}
    if mine != theirs:
        diff = sorted(set(mine.items()) ^ set(theirs.items()))[:5]
        raise SchemaError(f"checkpoint topology does not match the configured model: {diff}")


def config_equal(a: ModelConfig, b: ModelConfig) -> bool:
    return dataclasses.asdict(a) == dataclasses.asdict(b)
