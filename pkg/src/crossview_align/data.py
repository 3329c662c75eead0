"""Synthetic aerial/ground identity dataset.

Every identity is a procedural figure: a stack of body segments with their own
gray level and texture, a head disc and a side accessory polygon. Figures are
defined in normalized image coordinates ``[-1, 1]^2`` and rendered by inverse
mapping each (supersampled) pixel center, so view transforms are exact.

Ground views get mild jitter. Aerial views are rotated by an angle drawn from
``angle_range`` (degrees, applied in normalized coordinates), squashed
vertically, optionally crossed by an occlusion band, and noised.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .pnm import read_pnm, write_pgm

VIEWS = ("ground", "aerial")
MANIFEST = "manifest.csv"
METADATA = "metadata.csv"


@dataclass
class SyntheticSpec:
    identities: int = 200
    samples_per_view: int = 8
    image_h: int = 64
    image_w: int = 32
    angle_min: float = -90.0
    angle_max: float = 90.0
    squash_min: float = 0.7
    squash_max: float = 1.0
    occlusion_prob: float = 0.3
    occlusion_min: float = 0.1
    occlusion_max: float = 0.25
    noise_sigma: float = 0.03
    ground_jitter_deg: float = 5.0
    train_fraction: float = 0.5
    supersample: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.identities < 2 or self.samples_per_view < 1:
            raise ValueError("need at least 2 identities and 1 sample per view")
        if not (-90.0 <= self.angle_min <= self.angle_max <= 90.0):
            raise ValueError("aerial angle range must lie inside [-90, 90]")
        if not 0.0 < self.squash_min <= self.squash_max <= 1.0:
            raise ValueError("squash range must lie in (0, 1]")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion probability must lie in [0, 1]")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train fraction must lie in (0, 1)")


@dataclass
class Figure:
    bounds: np.ndarray      # segment boundaries along y, length nseg + 1
    widths: np.ndarray      # half widths per segment
    levels: np.ndarray      # gray level per segment
    textures: np.ndarray    # texture kind per segment
    freqs: np.ndarray
    head_r: float
    head_level: float
    leg_gap: float
    accessory: np.ndarray   # polygon vertices
    accessory_level: float


def make_figure(rng: np.random.Generator) -> Figure:
    nseg = 4
    inner = np.sort(rng.uniform(-0.45, 0.35, size=nseg - 1))
    bounds = np.concatenate([[-0.55], inner, [0.9]])
    widths = rng.uniform(0.18, 0.45, size=nseg)
    levels = rng.uniform(0.3, 1.0, size=nseg)
    textures = rng.integers(0, 4, size=nseg)
    freqs = rng.uniform(3.0, 8.0, size=nseg)
    side = rng.choice([-1.0, 1.0])
    cx = side * rng.uniform(0.45, 0.6)
    cy = rng.uniform(-0.3, 0.4)
    n = int(rng.integers(3, 7))
    ang = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    rad = rng.uniform(0.08, 0.2, size=n)
    poly = np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang)], axis=1)
    return Figure(
        bounds, widths, levels, textures, freqs,
        float(rng.uniform(0.12, 0.2)), float(rng.uniform(0.4, 1.0)),
        float(rng.uniform(0.0, 0.08)), poly, float(rng.uniform(0.3, 1.0)),
    )


def _in_polygon(x, y, poly):
    inside = np.zeros(x.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xint)
    return inside


def _texture(kind, freq, x, y):
    if kind == 0:
        return np.ones_like(x)
    if kind == 1:
        return 0.75 + 0.25 * np.sign(np.sin(freq * math.pi * y))
    if kind == 2:
        return 0.75 + 0.25 * np.sign(np.sin(freq * math.pi * x))
    return 0.75 + 0.25 * np.sign(np.sin(freq * math.pi * x) * np.sin(freq * math.pi * y))


def render_figure(fig: Figure, x: np.ndarray, y: np.ndarray, background: float = 0.08) -> np.ndarray:
    """Intensity at canonical coordinates ``(x, y)``."""
    img = np.full(x.shape, background)
    for s in range(len(fig.widths)):
        y0, y1 = fig.bounds[s], fig.bounds[s + 1]
        band = (y >= y0) & (y < y1) & (np.abs(x) <= fig.widths[s])
        if s == len(fig.widths) - 1:
            band &= np.abs(x) >= fig.leg_gap
        img = np.where(band, fig.levels[s] * _texture(fig.textures[s], fig.freqs[s], x, y), img)
    head_cy = fig.bounds[0] - fig.head_r
    head = (x ** 2 + (y - head_cy) ** 2) <= fig.head_r ** 2
    img = np.where(head, fig.head_level, img)
    img = np.where(_in_polygon(x, y, fig.accessory), fig.accessory_level, img)
    return img


def _pixel_grid(h: int, w: int, ss: int):
    xs = -1.0 + (2.0 * np.arange(w * ss) + 1.0) / (w * ss)
    ys = -1.0 + (2.0 * np.arange(h * ss) + 1.0) / (h * ss)
    return np.meshgrid(xs, ys)


def render_view(fig: Figure, spec: SyntheticSpec, view: str, rng: np.random.Generator):
    """Render one view; returns ``(image, metadata)``."""
    h, w, ss = spec.image_h, spec.image_w, spec.supersample
    X, Y = _pixel_grid(h, w, ss)
    meta = {"angle": 0.0, "squash": 1.0, "occluded": 0, "occ_y": 0.0, "occ_h": 0.0}
    if view == "ground":
        angle = rng.uniform(-spec.ground_jitter_deg, spec.ground_jitter_deg)
        squash = 1.0
        shift = rng.uniform(-0.05, 0.05, size=2)
        scale = rng.uniform(0.95, 1.05)
    else:
        angle = rng.uniform(spec.angle_min, spec.angle_max)
        squash = rng.uniform(spec.squash_min, spec.squash_max)
        shift = rng.uniform(-0.03, 0.03, size=2)
        scale = 1.0
    meta["angle"], meta["squash"] = float(angle), float(squash)
    # output = S * R(angle) * canonical + shift, inverted per pixel
    u = (X - shift[0]) / scale
    v = (Y - shift[1]) / (scale * squash)
    t = math.radians(angle)
    c, s = math.cos(t), math.sin(t)
    cx = c * u + s * v
    cy = -s * u + c * v
    img = render_figure(fig, cx, cy)
    img = img.reshape(h, ss, w, ss).mean(axis=(1, 3))
    img = img * rng.uniform(0.9, 1.1)
    if view == "aerial" and rng.random() < spec.occlusion_prob:
        occ_h = rng.uniform(spec.occlusion_min, spec.occlusion_max) * 2.0
        occ_y = rng.uniform(-1.0, 1.0 - occ_h)
        rows = -1.0 + (2.0 * np.arange(h) + 1.0) / h
        band = (rows >= occ_y) & (rows < occ_y + occ_h)
        img[band] = rng.uniform(0.0, 0.3) + 0.05 * rng.standard_normal((int(band.sum()), w))
        meta.update(occluded=1, occ_y=float(occ_y), occ_h=float(occ_h))
    img = img + spec.noise_sigma * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0), meta


def generate_dataset(spec: SyntheticSpec, out_dir) -> Path:
    """Write PGM images plus ``manifest.csv`` and ``metadata.csv``; returns the manifest path."""
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    n_train = int(round(spec.identities * spec.train_fraction))
    manifest_rows: List[Tuple] = []
    meta_rows: List[Tuple] = []
    for ident in range(spec.identities):
        rng = np.random.default_rng([spec.seed, ident])
        fig = make_figure(rng)
        split = "train" if ident < n_train else "test"
        for view in VIEWS:
            for k in range(spec.samples_per_view):
                img, meta = render_view(fig, spec, view, rng)
                rel = f"images/{ident:05d}_{view[0]}{k:02d}.pgm"
                write_pgm(out / rel, img)
                manifest_rows.append((rel, ident, view, split))
                meta_rows.append((rel, f"{meta['angle']:.6f}", f"{meta['squash']:.6f}",
                                  meta["occluded"], f"{meta['occ_y']:.6f}", f"{meta['occ_h']:.6f}"))
    with open(out / MANIFEST, "w", newline="", encoding="ascii") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("path", "identity", "view", "split"))
        wr.writerows(manifest_rows)
    with open(out / METADATA, "w", newline="", encoding="ascii") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(("path", "angle_deg", "squash", "occluded", "occ_y", "occ_h"))
        wr.writerows(meta_rows)
    with open(out / "spec.txt", "w", encoding="ascii") as fh:
        for key, val in asdict(spec).items():
            fh.write(f"data.{key}={val}\n")
    return out / MANIFEST


@dataclass
class Dataset:
    images: np.ndarray     # (N, 1, H, W)
    identities: np.ndarray
    views: np.ndarray      # 0 ground, 1 aerial
    splits: np.ndarray     # "train" / "test"
    paths: List[str]

    def subset(self, split: str) -> "Dataset":
        keep = self.splits == split
        idx = np.flatnonzero(keep)
        return Dataset(self.images[idx], self.identities[idx], self.views[idx],
                       self.splits[idx], [self.paths[i] for i in idx])

    def __len__(self) -> int:
        return len(self.identities)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / MANIFEST if root.is_dir() else root
    base = manifest.parent
    with open(manifest, newline="", encoding="ascii") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty manifest {manifest}")
    images = np.stack([read_pnm(base / r["path"]) for r in rows])[:, None]
    return Dataset(
        images,
        np.array([int(r["identity"]) for r in rows]),
        np.array([VIEWS.index(r["view"]) for r in rows]),
        np.array([r["split"] for r in rows]),
        [r["path"] for r in rows],
    )
