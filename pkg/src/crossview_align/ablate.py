"""Ablation sweeps: one CSV row per setting, metrics averaged over seeds."""
from __future__ import annotations

import copy
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .config import RunConfig, apply_overrides
from .data import Dataset
from .metrics import PROTOCOLS, evaluate_all
from .train import train

PROTOCOL_TAGS = {"ALL": "ALL", "G<->G": "GG", "A<->A": "AA", "A<->G": "AG"}
METRIC_NAMES = ("Rank1", "mAP", "mINP")
CSV_COLUMNS = ("setting",) + tuple(
    f"{PROTOCOL_TAGS[p]}_{m}" for p in PROTOCOLS for m in METRIC_NAMES
)

Setting = Tuple[str, Sequence[Tuple[str, str]]]

AXES: Dict[str, List[Setting]] = {
    "control_points": [(str(k), [("encoder.k", str(k))]) for k in (4, 9, 16, 25, 36)],
    "placement": [
        ("First layer", [("encoder.placement", "first_layer")]),
        ("First 4 layers", [("encoder.placement", "first_4")]),
        ("Middle 4 layers", [("encoder.placement", "middle_4")]),
        ("Last 4 layers", [("encoder.placement", "last_4")]),
        ("All layers", [("encoder.placement", "all")]),
    ],
    "dam": [
        ("Inner-Batch", [("dam.variant", "inner_batch")]),
        ("Memory Bank", [("dam.variant", "memory_bank")]),
        ("Classification Matrix", [("dam.variant", "classification_matrix")]),
    ],
    "rotation": [
        ("fixed-angle rotation", [("encoder.ltps_mode", "fixed"), ("encoder.theta_fixed", "0.39269908169872414")]),
        ("LTPS without L_deform", [("encoder.ltps_mode", "learned"), ("loss.alpha", "0")]),
        ("LTPS with L_deform", [("encoder.ltps_mode", "learned")]),
    ],
    "tps_variant": [
        ("original TPS", [("encoder.ltps_mode", "original")]),
        ("LTPS", [("encoder.ltps_mode", "learned")]),
    ],
}
MAIN_AXES = ("control_points", "placement", "dam", "rotation")


@dataclass
class AblationRow:
    setting: str
    values: Dict[str, float]

    def as_csv(self) -> List[str]:
        return [self.setting] + [f"{self.values[c]:.2f}" for c in CSV_COLUMNS[1:]]


def run_setting(base: RunConfig, overrides, seeds: Sequence[int],
                dataset_for: Callable[[int], Dataset]) -> Dict[str, float]:
    sums = {c: [] for c in CSV_COLUMNS[1:]}
    for seed in seeds:
        cfg = apply_overrides(copy.deepcopy(base), list(overrides) + [("seed", str(seed))])
        ds = dataset_for(seed)
        result = train(cfg, ds)
        metrics = evaluate_all(result.state.encoder, ds.subset("test"))
        for p, m in metrics.items():
            tag = PROTOCOL_TAGS[p]
            sums[f"{tag}_Rank1"].append(m.rank1)
            sums[f"{tag}_mAP"].append(m.mAP)
            sums[f"{tag}_mINP"].append(m.mINP)
    return {c: float(np.mean(v)) for c, v in sums.items()}


def ablate(axis: str, base: RunConfig, seeds: Sequence[int], dataset_for: Callable[[int], Dataset],
           out_csv=None, log=None) -> List[AblationRow]:
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(AXES)}")
    rows = []
    for name, overrides in AXES[axis]:
        row = AblationRow(name, run_setting(base, overrides, seeds, dataset_for))
        rows.append(row)
        if log is not None:
            log(axis, row)
    if out_csv is not None:
        write_csv(out_csv, rows)
    return rows


def write_csv(path, rows: Sequence[AblationRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in rows:
            w.writerow(row.as_csv())


def validate_csv(path) -> List[Dict[str, str]]:
    """Check header order and that every metric cell is a number in [0, 100]."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != CSV_COLUMNS:
            raise ValueError(f"bad header {header}")
        rows = []
        for line in reader:
            if len(line) != len(CSV_COLUMNS):
                raise ValueError(f"row has {len(line)} cells, expected {len(CSV_COLUMNS)}")
            for cell in line[1:]:
                v = float(cell)
                if not 0.0 <= v <= 100.0:
                    raise ValueError(f"metric {v} outside [0, 100]")
            rows.append(dict(zip(CSV_COLUMNS, line)))
    return rows
