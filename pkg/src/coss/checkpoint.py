"""Binary model checkpoints: magic "COSSCKPT", bit-exact round trips.

Layout (all integers little-endian):
  8s   magic
  u32  format version (1)
  u32  config JSON length, then UTF-8 JSON (model config, stage id,
       decoder registry, free-form metadata)
  u32  parameter count
  then per parameter: u16 name length, UTF-8 name, u8 dtype tag, u8 rank,
  rank * u32 extents, raw little-endian payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import BadMagicError, BadVersionError, FormatError, TruncatedFileError
from .model import Model, ModelConfig, init_model

MAGIC = b"COSSCKPT"
VERSION = 1

DTYPE_TAGS = {1: "<f4", 2: "<f8", 3: "<i8", 4: "|u1"}
TAG_FOR = {np.dtype(v): k for k, v in DTYPE_TAGS.items()}


def _tag_of(arr):
    tag = TAG_FOR.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype)
    if tag is None:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    return tag


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"file ended inside {what}")
    return buf


def write_record(fh, name, arr):
    arr = np.asarray(arr)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    tag = _tag_of(arr)
    payload = arr.astype(DTYPE_TAGS[tag], copy=False).tobytes()
    name_b = name.encode("utf-8")
    fh.write(struct.pack("<H", len(name_b)))
    fh.write(name_b)
    fh.write(struct.pack("<BB", tag, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(payload)


def read_record(fh):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "record header"))
    name = _read_exact(fh, name_len, "record name").decode("utf-8")
    tag, rank = struct.unpack("<BB", _read_exact(fh, 2, "record header"))
    if tag not in DTYPE_TAGS:
        raise FormatError(f"unknown dtype tag {tag} for {name!r}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "record extents"))
    dt = np.dtype(DTYPE_TAGS[tag])
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = _read_exact(fh, count * dt.itemsize, f"payload of {name!r}")
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return name, arr


def _decoder_registry(model):
    reg = []
    for t in sorted(model.decoders):
        dec = model.decoders[t]
        entry = {"stage": t, "kind": dec.kind}
        if dec.kind == "visual":
            entry["seq_len"] = dec.seq_len
            entry["patch_dim"] = dec.patch_dim
        reg.append(entry)
    return reg


def save_model(path, model, meta=None):
    config = {
        "model": model.cfg.to_dict(),
        "stage_id": model.stage_id,
        "decoders": _decoder_registry(model),
        "meta": meta or {},
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    params = model.params()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            write_record(fh, p.name, p.data)


def _read_header(fh):
    magic = _read_exact(fh, len(MAGIC), "magic")
    if magic != MAGIC:
        raise BadMagicError(f"expected {MAGIC!r}, found {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != VERSION:
        raise BadVersionError(f"unsupported checkpoint version {version}")
    (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
    config = json.loads(_read_exact(fh, blob_len, "config block").decode("utf-8"))
    (n_params,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
    return config, n_params


def load_model(path):
    """Rebuild the model bit-exactly. Returns (model, meta dict)."""
    with open(path, "rb") as fh:
        config, n_params = _read_header(fh)
        records = dict(read_record(fh) for _ in range(n_params))
        if fh.read(1):
            raise FormatError("trailing bytes after final record")
    cfg = ModelConfig.from_dict(config["model"])
    model = init_model(cfg)
    for entry in config["decoders"]:
        model.add_decoder(entry["stage"], "text" if entry["kind"] == "text" else "image2d",
                          entry.get("seq_len"), entry.get("patch_dim"), seed=0)
    model.stage_id = int(config["stage_id"])
    params = {p.name: p for p in model.params()}
    missing = sorted(set(params) - set(records))
    extra = sorted(set(records) - set(params))
    if missing or extra:
        raise FormatError(f"parameter mismatch: missing {missing}, unexpected {extra}")
    for name, arr in records.items():
        p = params[name]
        if tuple(arr.shape) != tuple(p.data.shape):
            raise FormatError(f"shape mismatch for {name!r}: "
                              f"{arr.shape} vs {p.data.shape}")
        p.data = arr
        p.grad = np.zeros_like(arr) if p.requires_grad else p.grad
    return model, config.get("meta", {})


def inspect_checkpoint(path):
    """Summarize a checkpoint without building a model."""
    with open(path, "rb") as fh:
        config, n_params = _read_header(fh)
        entries = []
        total = 0
        for _ in range(n_params):
            name, arr = read_record(fh)
            entries.append({"name": name, "shape": list(arr.shape),
                            "dtype": str(arr.dtype)})
            total += arr.size
    return {
        "version": VERSION,
        "stage_id": config["stage_id"],
        "model": config["model"],
        "decoders": config["decoders"],
        "meta": config.get("meta", {}),
        "parameters": entries,
        "total_parameters": int(total),
    }
