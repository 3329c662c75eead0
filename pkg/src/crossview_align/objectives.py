"""Training objectives and their gradients.

Each loss comes as a value function plus a ``*_grad`` twin returning the
gradient with respect to its array inputs.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

ENTROPY_CLAMP = 1e-7
ALIGN_EPS = 1e-12
DIST_FLOOR = 1e-12


class SamplingError(ValueError):
    """Batch composition does not satisfy the triplet precondition."""


@dataclass
class LossConfig:
    lam: float = 0.1
    alpha: float = 0.1
    beta: float = 1.0
    margin: float = 0.3
    smoothing: float = 0.0

    def __post_init__(self):
        if min(self.lam, self.alpha, self.beta) < 0:
            raise ValueError("loss weights must be non-negative")
        if not 0.0 <= self.smoothing < 1.0:
            raise ValueError("label smoothing must lie in [0, 1)")


@dataclass
class LossBreakdown:
    id: float
    triplet: float
    deform: float
    align: float
    entropy: float
    mask: float
    total: float

    def to_json(self, step: int) -> str:
        return json.dumps({"step": step, **asdict(self)})


# --- identity ----------------------------------------------------------------

def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _smoothed_targets(labels, c: int, smoothing: float) -> np.ndarray:
    labels = np.asarray(labels)
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError("labels out of range")
    q = np.full((len(labels), c), smoothing / c)
    q[np.arange(len(labels)), labels] += 1.0 - smoothing
    return q


def id_loss(logits: np.ndarray, labels, smoothing: float = 0.0) -> float:
    """Mean cross-entropy against (optionally smoothed) one-hot targets."""
    logits = np.asarray(logits, dtype=np.float64)
    q = _smoothed_targets(labels, logits.shape[1], smoothing)
    return float(-(q * _log_softmax(logits)).sum() / logits.shape[0])


def id_loss_grad(logits: np.ndarray, labels, smoothing: float = 0.0) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    q = _smoothed_targets(labels, logits.shape[1], smoothing)
    return (np.exp(_log_softmax(logits)) - q) / logits.shape[0]


# --- triplet -------------------------------------------------------------------

def _check_pk(labels) -> np.ndarray:
    labels = np.asarray(labels)
    ids, counts = np.unique(labels, return_counts=True)
    if len(ids) < 2 or counts.min() < 2:
        raise SamplingError("batch-hard triplet needs >= 2 classes with >= 2 samples each")
    return labels


def _hard_mining(features: np.ndarray, labels: np.ndarray):
    diff = features[:, None, :] - features[None, :, :]
    sq = np.einsum("ijd,ijd->ij", diff, diff)
    dist = np.sqrt(np.maximum(sq, DIST_FLOOR))
    same = labels[:, None] == labels[None, :]
    pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    return diff, sq, dist, pos, neg


def triplet_loss(features: np.ndarray, labels, margin: float = 0.3) -> float:
    """Batch-hard triplet loss on Euclidean distances."""
    labels = _check_pk(labels)
    _, _, dist, pos, neg = _hard_mining(np.asarray(features, dtype=np.float64), labels)
    rows = np.arange(len(labels))
    return float(np.maximum(dist[rows, pos] - dist[rows, neg] + margin, 0.0).mean())


def triplet_loss_grad(features: np.ndarray, labels, margin: float = 0.3) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    labels = _check_pk(labels)
    diff, sq, dist, pos, neg = _hard_mining(features, labels)
    n = len(labels)
    rows = np.arange(n)
    active = dist[rows, pos] - dist[rows, neg] + margin > 0
    grad = np.zeros_like(features)
    for j, sign in ((pos, 1.0), (neg, -1.0)):
        live = active & (sq[rows, j] > DIST_FLOOR)
        coef = np.where(live, sign / (n * dist[rows, j]), 0.0)[:, None]
        g = coef * diff[rows, j]
        grad += g
        np.add.at(grad, j, -g)
    return grad


# --- deformation -------------------------------------------------------------------

def deformation_loss(angles) -> float:
    """Mean absolute rotation angle over LTPS layers; 0 for no layers."""
    angles = np.asarray(angles, dtype=np.float64)
    if angles.size == 0:
        return 0.0
    return float(np.abs(angles).sum() / angles.size)


def deformation_loss_grad(angles) -> np.ndarray:
    angles = np.asarray(angles, dtype=np.float64)
    if angles.size == 0:
        return angles.copy()
    return np.sign(angles) / angles.size


# --- mask losses ---------------------------------------------------------------------

def _safe_norm(v: np.ndarray):
    n = np.sqrt(np.einsum("nd,nd->n", v, v) + ALIGN_EPS)
    return v / n[:, None], n


def align_guard_count(masks, features, prototypes, threshold: float = 1e-6) -> int:
    """Number of masked vectors small enough that the epsilon guard dominates."""
    mp = np.asarray(masks) * np.asarray(prototypes)
    mf = np.asarray(masks) * np.asarray(features)
    sq = np.concatenate([np.einsum("nd,nd->n", mp, mp), np.einsum("nd,nd->n", mf, mf)])
    return int(np.count_nonzero(sq < threshold * threshold))


def align_loss(masks: np.ndarray, features: np.ndarray, prototypes: np.ndarray) -> float:
    """Mean squared distance between normalized masked prototype and masked feature."""
    a, _ = _safe_norm(np.asarray(masks) * np.asarray(prototypes))
    b, _ = _safe_norm(np.asarray(masks) * np.asarray(features))
    d = a - b
    return float(np.einsum("nd,nd->", d, d) / d.shape[0])


def align_loss_grad(masks: np.ndarray, features: np.ndarray, prototypes: np.ndarray):
    """Returns ``(dmasks, dfeatures, dprototypes)``."""
    masks = np.asarray(masks, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    n = masks.shape[0]
    mp = masks * prototypes
    mf = masks * features
    a, na = _safe_norm(mp)
    b, nb = _safe_norm(mf)
    da = 2.0 * (a - b) / n
    db = -da
    dmp = (da - a * np.einsum("nd,nd->n", a, da)[:, None]) / na[:, None]
    dmf = (db - b * np.einsum("nd,nd->n", b, db)[:, None]) / nb[:, None]
    return dmp * prototypes + dmf * features, dmf * masks, dmp * masks


def entropy_loss(masks: np.ndarray) -> float:
    """Mean binary entropy of the mask entries (weight applied in ``mask_loss``)."""
    m = np.clip(np.asarray(masks, dtype=np.float64), ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    h = -(m * np.log(m) + (1.0 - m) * np.log1p(-m))
    return float(h.sum() / h.size)


def entropy_loss_grad(masks: np.ndarray) -> np.ndarray:
    raw = np.asarray(masks, dtype=np.float64)
    m = np.clip(raw, ENTROPY_CLAMP, 1.0 - ENTROPY_CLAMP)
    inside = (raw > ENTROPY_CLAMP) & (raw < 1.0 - ENTROPY_CLAMP)
    return np.where(inside, (np.log1p(-m) - np.log(m)) / raw.size, 0.0)


def mask_loss(align: float, entropy: float, lam: float) -> float:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return align + lam * entropy


def total_loss(id: float, triplet: float, deform: float, align: float, entropy: float,
               config: LossConfig) -> LossBreakdown:
    mask = mask_loss(align, entropy, config.lam)
    total = (id + triplet) + config.alpha * deform + config.beta * mask
    return LossBreakdown(id, triplet, deform, align, entropy, mask, total)
