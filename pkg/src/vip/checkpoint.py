"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    magic    8 bytes  b"VIPCKPT1"
    version  u32
    count    u32      number of records
    record:  name_len u32, name bytes (utf-8), dtype_code u8, rank u8,
             dims u64 * rank, raw little-endian values

Records are written sorted by name, so load -> save round-trips are
byte-identical. Model parameters are stored under ``param/``, normalization
buffers under ``buffer/``, optimizer moments under ``optim/``, the variant
spec as JSON bytes under ``meta/spec_json``, plus epoch and RNG state.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"VIPCKPT1"
VERSION = 1

_DTYPE_CODES = {1: "<f4", 2: "<f8", 3: "u1", 4: "<i8", 5: "<u8"}
_CODE_FOR_KIND = {np.dtype(v).str.lstrip("<|="): k for k, v in _DTYPE_CODES.items()}


class CheckpointError(ValueError):
    """Structurally invalid checkpoint file."""


def _dtype_code(arr: np.ndarray) -> int:
    key = np.dtype(arr.dtype).newbyteorder("<").str.lstrip("<|=")
    code = _CODE_FOR_KIND.get(key)
    if code is None:
        raise CheckpointError(f"unsupported array dtype {arr.dtype}")
    return code


def write_records(path, records: dict[str, np.ndarray]):
    """Write named arrays; names are sorted for reproducible bytes."""
    names = sorted(records)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate record names")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(records[name])
            code = _dtype_code(arr)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<BB", code, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.astype(np.dtype(_DTYPE_CODES[code]), copy=False).tobytes())


def read_records(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:8]!r}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 16
    records = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        code, rank = struct.unpack_from("<BB", blob, offset)
        offset += 2
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: unknown dtype code {code} in {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
        offset += 8 * rank
        dt = np.dtype(_DTYPE_CODES[code])
        n_bytes = dt.itemsize * int(np.prod(dims, dtype=np.int64)) if rank else dt.itemsize
        if rank == 0:
            n_bytes = dt.itemsize
        arr = np.frombuffer(blob, dtype=dt, count=n_bytes // dt.itemsize,
                            offset=offset).reshape(dims)
        offset += n_bytes
        if name in records:
            raise CheckpointError(f"{path}: duplicate record {name!r}")
        records[name] = arr.copy()
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return records


@dataclass
class Checkpoint:
    """Deserialized training state."""

    spec_dict: dict
    epoch: int
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: np.ndarray | None = None  # 6 x u64 PCG64 word encoding


def _rng_to_words(rng: np.random.Generator) -> np.ndarray:
    state = rng.bit_generator.state
    inner = state["state"]
    mask = (1 << 64) - 1
    return np.array([inner["state"] & mask, inner["state"] >> 64,
                     inner["inc"] & mask, inner["inc"] >> 64,
                     state["has_uint32"], state["uinteger"]], dtype=np.uint64)


def _rng_from_words(words: np.ndarray) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(words[0]) | (int(words[1]) << 64),
                  "inc": int(words[2]) | (int(words[3]) << 64)},
        "has_uint32": int(words[4]),
        "uinteger": int(words[5]),
    }
    return rng


def save_checkpoint(path, model, epoch, optimizer=None, rng=None):
    records: dict[str, np.ndarray] = {}
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True).encode("utf-8")
    records["meta/spec_json"] = np.frombuffer(spec_json, dtype=np.uint8).copy()
    records["meta/epoch"] = np.array([epoch], dtype=np.int64)
    params = model.named_parameters()
    if len(params) != len(set(params)):
        raise CheckpointError("duplicate parameter names")
    for name, p in params.items():
        records[f"param/{name}"] = p.data
    for name, buf in model.named_buffers().items():
        records[f"buffer/{name}"] = buf
    if optimizer is not None:
        records.update(optimizer.state_arrays())
    if rng is not None:
        records["rng/state"] = _rng_to_words(rng)
    write_records(path, records)


def load_checkpoint(path) -> Checkpoint:
    records = read_records(path)
    try:
        spec_dict = json.loads(bytes(records.pop("meta/spec_json")).decode("utf-8"))
        epoch = int(records.pop("meta/epoch")[0])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing required record {exc}")
    params, buffers, optim = {}, {}, {}
    rng_state = None
    for name, arr in records.items():
        if name.startswith("param/"):
            params[name[len("param/"):]] = arr
        elif name.startswith("buffer/"):
            buffers[name[len("buffer/"):]] = arr
        elif name.startswith("optim/"):
            optim[name] = arr
        elif name == "rng/state":
            rng_state = arr
        else:
            raise CheckpointError(f"{path}: unexpected record {name!r}")
    return Checkpoint(spec_dict, epoch, params, buffers, optim, rng_state)


def restore_model(ckpt: Checkpoint, dtype=np.float32):
    """Build a model skeleton from the stored spec and load all state."""
    from .network import VariantSpec, build

    spec = VariantSpec.from_dict(ckpt.spec_dict)
    model = build(spec, dtype=dtype, init="zeros")
    params = model.named_parameters()
    missing = set(params) - set(ckpt.params)
    extra = set(ckpt.params) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"parameter names disagree (missing {sorted(missing)[:3]}, "
            f"extra {sorted(extra)[:3]})")
    for name, p in params.items():
        arr = ckpt.params[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointError(
                f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = np.ascontiguousarray(arr, dtype=dtype)
    for name, buf in model.named_buffers().items():
        if name in ckpt.buffers:
            buf[...] = ckpt.buffers[name]
    return model


def restore_rng(ckpt: Checkpoint) -> np.random.Generator | None:
    if ckpt.rng_state is None:
        return None
    return _rng_from_words(ckpt.rng_state)
