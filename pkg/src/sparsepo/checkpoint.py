"""Versioned ``.npz`` containers: a JSON header plus named float arrays."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

FORMAT = "sparsepo-checkpoint"
VERSION = 1


def save_arrays(path, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(path.suffix + ".npz") if path.suffix else path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format": FORMAT, "version": VERSION, **meta}
    payload = {"__meta__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, arr in arrays.items():
        if name == "__meta__":
            raise ValueError("array name '__meta__' is reserved")
        payload[name] = np.asarray(arr)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)
    return path


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists() and path.with_suffix(".npz").exists():
        path = path.with_suffix(".npz")
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise ValueError(f"{path}: not a {FORMAT} file (no metadata header)")
        meta = json.loads(bytes(z["__meta__"]).decode())
        arrays = {k: z[k].copy() for k in z.files if k != "__meta__"}
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} file")
    if meta.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return meta, arrays
