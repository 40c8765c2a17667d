"""Checkpoint container: JSON manifest + raw little-endian float64 payload.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then the concatenated tensor payloads at the recorded offsets.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore

MAGIC = b"VFCKPT01"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, store: ParamStore, meta: dict | None = None, optimizer_state: bool = True) -> None:
    entries, blobs, offset = [], [], 0

    def put(name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)

    for name, t in store.items():
        put(name, t.data)
    steps = {}
    if optimizer_state:
        for name in store:
            put("adam.m/" + name, store.m[name])
            put("adam.v/" + name, store.v[name])
            steps[name] = store.steps[name]
    manifest = {"format": "vfplan-checkpoint", "version": 1, "tensors": entries,
                "adam_steps": steps, "meta": meta or {}}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path):
    """Return ``(manifest, {name: array})``."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    manifest = json.loads(data[16:16 + n].decode("utf-8"))
    base = 16 + n
    arrays = {}
    for e in manifest["tensors"]:
        start = base + e["offset"]
        buf = data[start:start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(e["shape"])
    return manifest, arrays


def load_checkpoint(path, store: ParamStore | None = None) -> tuple[ParamStore, dict]:
    """Load into ``store`` (shapes must match) or into a fresh store."""
    manifest, arrays = read_checkpoint(path)
    names = [e["name"] for e in manifest["tensors"] if not e["name"].startswith("adam.")]
    if store is None:
        store = ParamStore()
        for name in names:
            store.add(name, arrays[name])
    else:
        missing = set(store.params) - set(names)
        if missing:
            raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
        for name in names:
            if name not in store:
                raise CheckpointError(f"{path}: unexpected parameter {name}")
            if store[name].shape != arrays[name].shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}: "
                                      f"{store[name].shape} vs {arrays[name].shape}")
            store[name].data[...] = arrays[name]
    for name, k in manifest.get("adam_steps", {}).items():
        store.m[name] = arrays["adam.m/" + name].copy()
        store.v[name] = arrays["adam.v/" + name].copy()
        store.steps[name] = int(k)
    store.zero_grad()
    return store, manifest.get("meta", {})
