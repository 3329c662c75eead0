"""Named-tensor text checkpoints.

Layout::

    crossview-ckpt 1
    <count>
    <name> <dtype> <rank> <extent>...
    <values separated by spaces>
    ...

``dtype`` is ``f64`` (written with 17 significant digits, so values round-trip
exactly), ``i64``, or ``utf8`` (one JSON string literal on the value line,
rank 0).
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Dict, Union

import numpy as np

MAGIC = "crossview-ckpt 1"

Entry = Union[np.ndarray, str]


class CheckpointError(ValueError):
    pass


def _format(arr: np.ndarray) -> str:
    if arr.dtype.kind == "f":
        return " ".join("%.17g" % v for v in arr.ravel())
    return " ".join(str(int(v)) for v in arr.ravel())


def save_checkpoint(path, tensors: Dict[str, Entry]) -> None:
    """Write atomically: a partial file never replaces a complete one."""
    lines = [MAGIC, str(len(tensors))]
    for name in sorted(tensors):
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        value = tensors[name]
        if isinstance(value, str):
            lines.append(f"{name} utf8 0")
            lines.append(json.dumps(value))
            continue
        arr = np.asarray(value)
        if arr.dtype.kind == "f":
            arr, dtype = arr.astype(np.float64), "f64"
        elif arr.dtype.kind in "iub":
            arr, dtype = arr.astype(np.int64), "i64"
        else:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        lines.append(" ".join([name, dtype, str(arr.ndim), *map(str, arr.shape)]))
        lines.append(_format(arr))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def load_checkpoint(path) -> Dict[str, Entry]:
    try:
        lines = Path(path).read_text(encoding="utf-8").split("\n")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not lines or lines[0] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    count = int(lines[1])
    out: Dict[str, Entry] = {}
    pos = 2
    for _ in range(count):
        head = lines[pos].split()
        body = lines[pos + 1]
        pos += 2
        name, dtype, rank = head[0], head[1], int(head[2])
        shape = tuple(int(v) for v in head[3:3 + rank])
        if dtype == "utf8":
            out[name] = json.loads(body)
            continue
        kind = {"f64": np.float64, "i64": np.int64}.get(dtype)
        if kind is None:
            raise CheckpointError(f"unknown dtype {dtype!r} for {name}")
        values = body.split()
        size = int(np.prod(shape)) if shape else 1
        if len(values) != size:
            raise CheckpointError(f"{name}: expected {size} values, found {len(values)}")
        if kind is np.float64:
            arr = np.array([float(v) for v in values], dtype=np.float64)
        else:
            arr = np.array([int(v) for v in values], dtype=np.int64)
        out[name] = arr.reshape(shape)
    return out
