"""Dynamic alignment: class prototypes modulated by per-sample channel masks.

Masks only exist during training. Retrieval embeddings never pass through
anything in this module.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numeric_core import NumericalError

NORM_EPS = 1e-12
VARIANTS = ("inner_batch", "memory_bank", "classification_matrix")


def _normalize_rows(x: np.ndarray):
    norms = np.sqrt(np.einsum("...d,...d->...", x, x))
    if np.any(norms < NORM_EPS):
        raise NumericalError("cannot normalize a (near) zero vector")
    return x / norms[..., None], norms


def _normalize_backward(y: np.ndarray, norms: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return (dy - y * np.einsum("...d,...d->...", y, dy)[..., None]) / norms[..., None]


@dataclass
class PrototypeTable:
    class_ids: np.ndarray
    prototypes: np.ndarray
    counts: np.ndarray

    def rows_for(self, labels) -> np.ndarray:
        """Row index into ``prototypes`` for each label."""
        labels = np.asarray(labels)
        pos = np.searchsorted(self.class_ids, labels)
        pos = np.clip(pos, 0, len(self.class_ids) - 1)
        if np.any(self.class_ids[pos] != labels):
            missing = sorted(set(labels.tolist()) - set(self.class_ids.tolist()))
            raise KeyError(f"no prototype for classes {missing}")
        return pos


@dataclass
class _ProtoCache:
    unit: np.ndarray
    norms: np.ndarray
    mean_norms: np.ndarray
    rows: np.ndarray


def compute_prototypes(features: np.ndarray, labels, return_cache: bool = False):
    """Per-class mean of l2-normalized features, normalized again.

    Member sums use ``math.fsum`` so the table does not depend on the order
    of samples inside the batch.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ValueError("features must be a non-empty N x D array")
    unit, norms = _normalize_rows(features)
    class_ids = np.unique(labels)
    rows = np.searchsorted(class_ids, labels)
    counts = np.bincount(rows, minlength=len(class_ids))
    means = np.empty((len(class_ids), features.shape[1]))
    for c in range(len(class_ids)):
        members = unit[rows == c]
        means[c] = [math.fsum(col) for col in members.T]
        means[c] /= counts[c]
    protos, mean_norms = _normalize_rows(means)
    table = PrototypeTable(class_ids, protos, counts)
    if return_cache:
        return table, _ProtoCache(unit, norms, mean_norms, rows)
    return table


def compute_prototypes_backward(table: PrototypeTable, cache: _ProtoCache, dprotos: np.ndarray) -> np.ndarray:
    dmeans = _normalize_backward(table.prototypes, cache.mean_norms, dprotos)
    dunit = dmeans[cache.rows] / table.counts[cache.rows][:, None]
    return _normalize_backward(cache.unit, cache.norms, dunit)


@dataclass
class MaskGenerator:
    """Two-layer MLP ``sigmoid(relu(f W1 + b1) W2 + b2)`` with hidden width D // 2."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, dim: int, rng: Optional[np.random.Generator] = None, scale: float = 0.02):
        hidden = dim // 2
        if rng is None:
            return cls(np.zeros((dim, hidden)), np.zeros(hidden), np.zeros((hidden, dim)), np.zeros(dim))
        return cls(
            rng.normal(scale=scale, size=(dim, hidden)),
            np.zeros(hidden),
            rng.normal(scale=scale, size=(hidden, dim)),
            np.zeros(dim),
        )

    @property
    def dim(self) -> int:
        return self.W1.shape[0]


def _sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def generate_mask(f: np.ndarray, gen: MaskGenerator) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    hidden = np.maximum(f @ gen.W1 + gen.b1, 0.0)
    return _sigmoid(hidden @ gen.W2 + gen.b2)


def generate_mask_backward(f: np.ndarray, gen: MaskGenerator, dm: np.ndarray):
    """Returns ``(df, grads)`` where ``grads`` maps W1/b1/W2/b2 to arrays."""
    f = np.asarray(f, dtype=np.float64)
    pre1 = f @ gen.W1 + gen.b1
    hidden = np.maximum(pre1, 0.0)
    m = _sigmoid(hidden @ gen.W2 + gen.b2)
    dz2 = dm * m * (1.0 - m)
    f2 = np.atleast_2d(f)
    h2 = np.atleast_2d(hidden)
    dz2_2 = np.atleast_2d(dz2)
    dhidden = dz2 @ gen.W2.T
    dz1 = dhidden * (pre1 > 0)
    grads = {
        "W2": h2.T @ dz2_2,
        "b2": dz2_2.sum(axis=0),
        "W1": f2.T @ np.atleast_2d(dz1),
        "b1": np.atleast_2d(dz1).sum(axis=0),
    }
    return dz1 @ gen.W1.T, grads


def mask_prototype(p: np.ndarray, m: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if p.shape[-1] != m.shape[-1]:
        raise ValueError("prototype and mask dimensions differ")
    return p * m


@dataclass
class DamConfig:
    variant: str = "inner_batch"
    momentum: float = 0.9

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown DAM variant {self.variant!r}; expected one of {VARIANTS}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")


@dataclass
class MemoryBank:
    """Momentum prototype memory; ``filled[c]`` marks classes seen at least once."""

    vectors: np.ndarray
    filled: np.ndarray

    @classmethod
    def empty(cls, num_classes: int, dim: int) -> "MemoryBank":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes, dtype=bool))

    def update(self, batch: PrototypeTable, momentum: float) -> None:
        """``p <- Norm(mu p + (1 - mu) p_batch)`` for every class in the batch."""
        ids = batch.class_ids
        fresh = ~self.filled[ids]
        mixed = momentum * self.vectors[ids] + (1.0 - momentum) * batch.prototypes
        mixed[fresh] = batch.prototypes[fresh]
        self.vectors[ids] = _normalize_rows(mixed)[0]
        self.filled[ids] = True


def select_prototypes(
    config: DamConfig,
    batch: PrototypeTable,
    bank: Optional[MemoryBank] = None,
    classifier_rows: Optional[np.ndarray] = None,
) -> PrototypeTable:
    """Prototype source for the configured variant, restricted to ``batch.class_ids``.

    The memory bank is updated with the batch before it is read. A class the
    bank has never seen falls back to its batch prototype.
    """
    if config.variant == "inner_batch":
        return batch
    ids = batch.class_ids
    if config.variant == "memory_bank":
        if bank is None:
            raise ValueError("memory_bank variant needs a MemoryBank")
        bank.update(batch, config.momentum)
        return PrototypeTable(ids, bank.vectors[ids].copy(), batch.counts)
    if classifier_rows is None:
        raise ValueError("classification_matrix variant needs classifier rows")
    return PrototypeTable(ids, _normalize_rows(np.asarray(classifier_rows)[ids])[0], batch.counts)


@dataclass
class DamOutput:
    masks: np.ndarray
    masked_prototypes: np.ndarray
    masked_features: np.ndarray
    prototypes: np.ndarray
    table: PrototypeTable = field(repr=False)
    cache: object = field(default=None, repr=False)


def dam_training_step(
    features: np.ndarray,
    labels,
    gen: MaskGenerator,
    config: DamConfig,
    bank: Optional[MemoryBank] = None,
    classifier_rows: Optional[np.ndarray] = None,
) -> DamOutput:
    """Masks ``m_i`` plus ``m_i * p_c`` and ``m_i * f_i`` for every sample."""
    features = np.asarray(features, dtype=np.float64)
    table, cache = compute_prototypes(features, labels, return_cache=True)
    source = select_prototypes(config, table, bank, classifier_rows)
    protos = source.prototypes[source.rows_for(labels)]
    masks = generate_mask(features, gen)
    return DamOutput(masks, masks * protos, masks * features, protos, source, (table, cache))


def dam_backward(
    out: DamOutput,
    features: np.ndarray,
    labels,
    gen: MaskGenerator,
    config: DamConfig,
    dmasks: np.ndarray,
    dprotos: np.ndarray,
    classifier_rows: Optional[np.ndarray] = None,
):
    """Gradients from cotangents on the masks and per-sample prototypes.

    Inner-batch prototypes pass gradient back into the features; classifier
    prototypes pass it into the classifier rows; memory-bank entries are
    treated as constants. Returns ``(dfeatures, gen_grads, dclassifier)``.
    """
    dfeat, gen_grads = generate_mask_backward(features, gen, dmasks)
    labels = np.asarray(labels)
    rows = out.table.rows_for(labels)
    dtable = np.zeros_like(out.table.prototypes)
    np.add.at(dtable, rows, dprotos)
    dclassifier = None
    if config.variant == "inner_batch":
        batch_table, cache = out.cache
        dfeat = dfeat + compute_prototypes_backward(batch_table, cache, dtable)
    elif config.variant == "classification_matrix":
        W = np.asarray(classifier_rows)
        ids = out.table.class_ids
        raw = W[ids]
        norms = np.sqrt(np.einsum("cd,cd->c", raw, raw))
        dclassifier = np.zeros_like(W)
        dclassifier[ids] = _normalize_backward(out.table.prototypes, norms, dtable)
    return dfeat, gen_grads, dclassifier
