"""Binary checkpoint files.

Layout: ``MACK`` magic, uint16 version, uint32 manifest length, UTF-8 JSON
manifest, then every array's raw little-endian bytes in manifest order. The
manifest lists ``{"name", "shape", "dtype"}`` per array plus free-form metadata.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MACK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path, arrays: dict, meta: dict | None = None, dtype: str = "<f8"):
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=dtype)
        entries.append({"name": name, "shape": list(a.shape), "dtype": dtype})
        blobs.append(a.tobytes())
    manifest = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_arrays(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack("<HI", raw[4:10])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    manifest = json.loads(raw[10:10 + mlen])
    offset = 10 + mlen
    arrays = {}
    for e in manifest["arrays"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = np.frombuffer(raw, dt, count, offset).reshape(e["shape"]).astype(np.float64)
        offset += count * dt.itemsize
    if offset != len(raw):
        raise CheckpointError(f"{path}: payload length does not match manifest")
    return arrays, manifest["meta"]


def module_state(module, with_optimizer: bool = False) -> dict:
    state = {}
    for name, p in module.named_parameters():
        state[name] = p.data
    for name, b in module.named_buffers():
        state["buffer:" + name] = b
    if with_optimizer:
        for name, p in module.named_parameters():
            state["adam.m:" + name] = p.m
            state["adam.v:" + name] = p.v
            state["adam.step:" + name] = np.array([p.step], dtype=np.float64)
    return state


def load_module_state(module, state: dict):
    params = dict(module.named_parameters())
    missing = [n for n in params if n not in state]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in params.items():
        if state[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name}: {state[name].shape} vs {p.data.shape}")
        p.data[...] = state[name]
        if "adam.m:" + name in state:
            p.m[...] = state["adam.m:" + name]
            p.v[...] = state["adam.v:" + name]
            p.step = int(state["adam.step:" + name][0])
    for name, _ in module.named_buffers():
        if "buffer:" + name in state:
            module.set_buffer(name, state["buffer:" + name])
