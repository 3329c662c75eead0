"""Forward-pass timing with and without LTPS at identical parameters."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, replace
from typing import Dict, Optional

import numpy as np

from .encoder import Encoder, EncoderConfig

MIN_PASSES = 100


@dataclass
class BenchReport:
    median_with_s: float
    median_without_s: float
    overhead: float          # (with - without) / without
    passes: int
    batch: int
    placement_with: tuple
    placement_without: tuple

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    def __str__(self) -> str:
        return (f"with LTPS {self.placement_with}: {self.median_with_s * 1e3:.3f} ms  "
                f"without {self.placement_without}: {self.median_without_s * 1e3:.3f} ms  "
                f"overhead {100.0 * self.overhead:.2f}%  ({self.passes} passes, batch {self.batch})")


def _median_times(encoders, images: np.ndarray, views: np.ndarray, passes: int, warmup: int = 5):
    """Median forward time per encoder, alternating encoders pass by pass.

    Interleaving keeps slow drifts in machine load from landing on only one
    side of the comparison.
    """
    for _ in range(warmup):
        for enc in encoders:
            enc.forward(images, views, train=False)
    times = np.empty((len(encoders), passes))
    for i in range(passes):
        for j, enc in enumerate(encoders):
            t0 = time.perf_counter()
            enc.forward(images, views, train=False)
            times[j, i] = time.perf_counter() - t0
    return [float(v) for v in np.median(times, axis=1)]


def bench(config: EncoderConfig, params: Optional[Dict[str, np.ndarray]] = None,
          placement_with=None, placement_without=(), passes: int = MIN_PASSES,
          batch: int = 32, seed: int = 0) -> BenchReport:
    """Median wall time of ``forward`` under two placements sharing one parameter dict.

    Identical placements are timed once, so the overhead is exactly zero.
    """
    if passes < MIN_PASSES:
        raise ValueError(f"need at least {MIN_PASSES} passes")
    with_cfg = replace(config, placement=tuple(range(config.depth)) if placement_with is None else tuple(placement_with))
    without_cfg = replace(config, placement=tuple(placement_without))
    enc_with = Encoder(with_cfg, params, seed=seed)
    enc_without = Encoder(without_cfg, enc_with.params)
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(batch, config.in_chans, config.image_h, config.image_w))
    views = rng.integers(0, 2, size=batch)
    if with_cfg.placement == without_cfg.placement:
        (t_with,) = _median_times([enc_with], images, views, passes)
        t_without = t_with
    else:
        t_with, t_without = _median_times([enc_with, enc_without], images, views, passes)
    return BenchReport(t_with, t_without, (t_with - t_without) / t_without, passes, batch,
                       with_cfg.placement, without_cfg.placement)
