"""Model container, token files, synthetic models and report writing.

Container layout (all integers little-endian)::

    0   magic      b"DSMOE1\\0\\0" (8 bytes)
    8   u64        manifest length N
    16  manifest   N bytes of UTF-8 JSON (sorted keys)
    ..  zero padding up to the next multiple of 64 = payload start
    ..  tensors    raw IEEE-754 little-endian, row-major, each at
                   payload_start + offset, offsets multiples of 64

Manifest::

    {"format": 1,
     "layers": [{"config": {...}, "lineage": [...],
                 "partition": {...} | null, "reconstruction": {...} | null}],
     "tensors": [{"name": "layers.0.gate", "shape": [r, c],
                  "dtype": "f64", "width": 8, "offset": 0}, ...]}
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import jsonschema
import numpy as np

from .errors import BadMagicError, SchemaError, ShapeError, TruncatedError
from .moe_model import Expert, MoeConfig, MoeLayer, MoeModel
from .prng import SplitMix64
from .reconstruct import ReconstructionMap
from .transform import PartitionSpec

MAGIC = b"DSMOE1\x00\x00"
ALIGN = 64
FORMAT_VERSION = 1
DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
TOKEN_HEADER = struct.Struct("<QQ")

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format", "layers", "tensors"],
    "properties": {
        "format": {"const": FORMAT_VERSION},
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["config", "lineage"],
                "properties": {
                    "config": {
                        "type": "object",
                        "required": ["d_model", "d_ffn", "num_experts", "top_k"],
                        "properties": {
                            k: {"type": "integer", "minimum": 0}
                            for k in ("d_model", "d_ffn", "num_experts", "top_k", "num_shared_experts", "partition")
                        },
                    },
                    "lineage": {"type": "array", "items": {"type": "string"}},
                    "partition": {"type": ["object", "null"]},
                    "reconstruction": {"type": ["object", "null"]},
                },
            },
        },
        "tensors": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "shape", "dtype", "width", "offset"],
                "properties": {
                    "name": {"type": "string"},
                    "shape": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
                    "dtype": {"enum": list(DTYPES)},
                    "width": {"enum": [4, 8]},
                    "offset": {"type": "integer", "minimum": 0},
                },
            },
        },
    },
}


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def _dtype_tag(dtype: np.dtype) -> str:
    for tag, dt in DTYPES.items():
        if np.dtype(dtype).newbyteorder("<") == dt:
            return tag
    raise ShapeError(f"unsupported tensor dtype {dtype}")


def _layer_tensors(i: int, layer: MoeLayer):
    yield f"layers.{i}.gate", layer.gate
    for kind, experts in (("experts", layer.experts), ("shared", layer.shared_experts)):
        for j, ex in enumerate(experts):
            yield f"layers.{i}.{kind}.{j}.w1", ex.w1
            yield f"layers.{i}.{kind}.{j}.w3", ex.w3
            yield f"layers.{i}.{kind}.{j}.w2", ex.w2


def _as_model(obj) -> MoeModel:
    if isinstance(obj, MoeModel):
        return obj
    if isinstance(obj, MoeLayer):
        return MoeModel([obj])
    return MoeModel(list(obj))


def encode_model(model) -> bytes:
    model = _as_model(model)
    tensors, offset = [], 0
    layers_meta = []
    blobs = []
    for i, layer in enumerate(model.layers):
        spec, rmap = model.specs[i], model.recon_maps[i]
        layers_meta.append(
            {
                "config": layer.config.to_dict(),
                "lineage": list(layer.lineage),
                "partition": None if spec is None else spec.to_dict(),
                "reconstruction": None if rmap is None else rmap.to_dict(),
            }
        )
        for name, arr in _layer_tensors(i, layer):
            tag = _dtype_tag(arr.dtype)
            data = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
            tensors.append({"name": name, "shape": list(arr.shape), "dtype": tag, "width": DTYPES[tag].itemsize, "offset": offset})
            blobs.append((offset, data))
            offset = _align(offset + len(data))
    manifest = json.dumps({"format": FORMAT_VERSION, "layers": layers_meta, "tensors": tensors}, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<Q", len(manifest)) + manifest
    payload_start = _align(len(head))
    buf = bytearray(payload_start + (blobs[-1][0] + len(blobs[-1][1]) if blobs else 0))
    buf[: len(head)] = head
    for off, data in blobs:
        buf[payload_start + off : payload_start + off + len(data)] = data
    return bytes(buf)


def _validate_table(tensors: list[dict], payload_len: int) -> None:
    end_prev = 0
    for t in tensors:
        width = DTYPES[t["dtype"]].itemsize
        if t["width"] != width:
            raise SchemaError(f"tensor {t['name']}: width {t['width']} does not match dtype {t['dtype']}")
        if t["offset"] % ALIGN:
            raise SchemaError(f"tensor {t['name']}: offset {t['offset']} is not {ALIGN}-byte aligned")
        if t["offset"] < end_prev:
            raise SchemaError(f"tensor {t['name']}: offset overlaps or precedes the previous tensor")
        end_prev = t["offset"] + math.prod(t["shape"]) * width
        if end_prev > payload_len:
            raise TruncatedError(f"tensor {t['name']} extends past the end of the payload")


def decode_model(data: bytes) -> MoeModel:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic: not a model container")
    if len(data) < 16:
        raise TruncatedError("truncated header")
    (mlen,) = struct.unpack_from("<Q", data, 8)
    if 16 + mlen > len(data):
        raise TruncatedError("truncated manifest")
    try:
        manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except (UnicodeDecodeError, json.JSONDecodeError, jsonschema.ValidationError) as exc:
        raise SchemaError(f"manifest schema violation: {exc}") from exc
    payload_start = _align(16 + mlen)
    payload_len = max(0, len(data) - payload_start)
    _validate_table(manifest["tensors"], payload_len)
    arrays = {}
    for t in manifest["tensors"]:
        dt = DTYPES[t["dtype"]]
        start = payload_start + t["offset"]
        count = math.prod(t["shape"])
        arr = np.frombuffer(data, dtype=dt, count=count, offset=start).reshape(t["shape"])
        arrays[t["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    layers, specs, rmaps = [], [], []
    try:
        for i, meta in enumerate(manifest["layers"]):
            cfg = MoeConfig.from_dict(meta["config"])
            experts = [
                Expert(arrays[f"layers.{i}.experts.{j}.w1"], arrays[f"layers.{i}.experts.{j}.w3"], arrays[f"layers.{i}.experts.{j}.w2"])
                for j in range(cfg.num_stored_experts)
            ]
            shared = [
                Expert(arrays[f"layers.{i}.shared.{j}.w1"], arrays[f"layers.{i}.shared.{j}.w3"], arrays[f"layers.{i}.shared.{j}.w2"])
                for j in range(cfg.num_shared_experts)
            ]
            layers.append(MoeLayer(cfg, arrays[f"layers.{i}.gate"], tuple(experts), tuple(shared), tuple(meta["lineage"])))
            specs.append(None if meta.get("partition") is None else PartitionSpec.from_dict(meta["partition"]))
            rmaps.append(None if meta.get("reconstruction") is None else ReconstructionMap.from_dict(meta["reconstruction"]))
    except KeyError as exc:
        raise SchemaError(f"manifest is missing tensor {exc}") from exc
    except ShapeError as exc:
        raise SchemaError(f"tensor table inconsistent with layer config: {exc}") from exc
    return MoeModel(layers, specs, rmaps)


def write_atomic(path, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model, path) -> None:
    write_atomic(path, encode_model(model))


def load_model(path) -> MoeModel:
    return decode_model(Path(path).read_bytes())


def load_layer(path, index: int = 0) -> MoeLayer:
    return load_model(path).layers[index]


def save_tokens(x: np.ndarray, path) -> None:
    """Raw token matrix: 16-byte header (rows, cols as u64 LE) then LE floats."""
    x = np.asarray(x)
    tag = _dtype_tag(x.dtype)
    write_atomic(path, TOKEN_HEADER.pack(*x.shape) + np.ascontiguousarray(x, dtype=DTYPES[tag]).tobytes())


def load_tokens(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < TOKEN_HEADER.size:
        raise TruncatedError("token file shorter than its header")
    rows, cols = TOKEN_HEADER.unpack_from(data)
    body = len(data) - TOKEN_HEADER.size
    count = rows * cols
    if count == 0:
        return np.zeros((rows, cols))
    if body == count * 8:
        dt = DTYPES["f64"]
    elif body == count * 4:
        dt = DTYPES["f32"]
    else:
        raise TruncatedError(f"token payload of {body} bytes does not fit a {rows}x{cols} matrix")
    return np.frombuffer(data, dtype=dt, offset=TOKEN_HEADER.size).reshape(rows, cols).astype(dt.newbyteorder("="))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def generate_synthetic(
    config: MoeConfig,
    seed: int = 0,
    scale: float = 1.0,
    dtype=np.float64,
    num_layers: int | None = None,
):
    """Seeded Gaussian weights with std ``scale / sqrt(d_model)``.

    Draw order: gate, then W1, W3, W2 per routed expert, then per shared
    expert, all from one SplitMix64 stream (see :mod:`moepart.prng`).
    Returns a :class:`MoeLayer`, or a :class:`MoeModel` of independently
    seeded layers (seed, seed+1, ...) when ``num_layers`` is given.
    """
    if num_layers is not None:
        return MoeModel([generate_synthetic(config, seed + i, scale, dtype) for i in range(num_layers)])
    if config.partition != 1:
        raise ShapeError("synthetic layers are generated unpartitioned")
    rng = SplitMix64(seed)
    std = scale / math.sqrt(config.d_model)
    d, f = config.d_model, config.d_ffn

    def draw(shape):
        return np.ascontiguousarray((rng.normal(shape) * std).astype(dtype))

    gate = draw((d, config.num_experts))

    def expert():
        return Expert(draw((d, f)), draw((d, f)), draw((f, d)))

    experts = tuple(expert() for _ in range(config.num_experts))
    shared = tuple(expert() for _ in range(config.num_shared_experts))
    return MoeLayer(config, gate, experts, shared, (f"synthetic:seed={seed}:scale={scale}",))


def synthetic_tokens(n: int, d_model: int, seed: int, dtype=np.float64) -> np.ndarray:
    """Standard-normal tokens from a SplitMix64 stream."""
    return np.ascontiguousarray(SplitMix64(seed).normal((n, d_model)).astype(dtype))


DEFAULT_CONFIG = MoeConfig(d_model=64, d_ffn=128, num_experts=8, top_k=2)
DEFAULT_LAYERS = 2
