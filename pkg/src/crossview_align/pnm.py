"""Binary PGM (P5) and PPM (P6) files with max value 255."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _to_bytes(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a ``(H, W)`` image with values in ``[0, 1]``."""
    data = _to_bytes(image)
    if data.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write ``(H, W)`` or ``(H, W, 3)``; grayscale is replicated to three channels."""
    data = _to_bytes(image)
    if data.ndim == 3 and data.shape[2] == 1:
        data = data[..., 0]
    if data.ndim == 2:
        data = np.repeat(data[..., None], 3, axis=2)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValueError("PPM needs an (H, W) or (H, W, 3) image")
    h, w, _ = data.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _read_header(raw: bytes):
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos].decode("ascii"))
    return fields, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read P5/P6 into floats in ``[0, 1]``; P6 gives ``(H, W, 3)``."""
    raw = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _read_header(raw)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError("only 8-bit PNM files are supported")
    channels = {"P5": 1, "P6": 3}.get(magic)
    if channels is None:
        raise ValueError(f"unsupported PNM magic {magic!r}")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * channels, offset=offset)
    data = data.reshape((h, w) if channels == 1 else (h, w, 3))
    return data.astype(np.float64) / 255.0
