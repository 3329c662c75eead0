"""CMC / mAP / mINP retrieval evaluation under the four view protocols."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

PROTOCOLS = ("ALL", "G<->G", "A<->A", "A<->G")
ALIASES = {"ALL": "ALL", "GG": "G<->G", "AA": "A<->A", "AG": "A<->G", "GA": "A<->G"}
GROUND, AERIAL = 0, 1


def canonical_protocol(name: str) -> str:
    key = name.strip().upper().replace("↔", "<->")
    if key in PROTOCOLS:
        return key
    key = key.replace("<->", "")
    if key in ALIASES:
        return ALIASES[key]
    raise ValueError(f"unknown protocol {name!r}; expected one of {PROTOCOLS}")


@dataclass
class RetrievalMetrics:
    rank1: float
    mAP: float
    mINP: float
    protocol: str
    num_query: int
    num_gallery: int
    cmc: Optional[np.ndarray] = None


def per_query_scores(distmat: np.ndarray, q_ids, g_ids, invalid: Optional[np.ndarray] = None):
    """Per-query ``(hit@1, AP, INP)`` for queries with at least one relevant item.

    ``invalid`` marks query/gallery pairs removed from the ranking (the query
    itself, protocol exclusions). Ties are broken by gallery index.
    """
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    order = np.argsort(distmat, axis=1, kind="stable")
    hits, aps, inps, cmcs = [], [], [], []
    for qi in range(distmat.shape[0]):
        ranked = order[qi]
        if invalid is not None:
            ranked = ranked[~invalid[qi, ranked]]
        match = g_ids[ranked] == q_ids[qi]
        n_rel = int(match.sum())
        if n_rel == 0:
            continue
        pos = np.flatnonzero(match) + 1
        aps.append(float(np.mean(np.arange(1, n_rel + 1) / pos)))
        inps.append(n_rel / float(pos[-1]))
        hits.append(float(match[0]))
        cmcs.append(np.cumsum(match) > 0)
    return np.array(hits), np.array(aps), np.array(inps), cmcs


def _euclidean(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.sqrt(np.maximum(sq, 0.0))


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def compute_metrics(q_emb, g_emb, q_ids, g_ids, invalid=None, protocol: str = "") -> RetrievalMetrics:
    """Rank gallery by Euclidean distance of l2-normalized embeddings; values in percent."""
    dist = _euclidean(_normalize(np.asarray(q_emb, dtype=np.float64)),
                      _normalize(np.asarray(g_emb, dtype=np.float64)))
    hits, aps, inps, cmcs = per_query_scores(dist, q_ids, g_ids, invalid)
    if len(hits) == 0:
        raise ValueError("no query has a relevant gallery item")
    return _summarize(hits, aps, inps, cmcs, protocol, len(q_ids), len(g_ids))


def _summarize(hits, aps, inps, cmcs, protocol, nq, ng) -> RetrievalMetrics:
    width = min(len(c) for c in cmcs)
    cmc = np.mean([c[:width] for c in cmcs], axis=0) * 100.0
    return RetrievalMetrics(100.0 * hits.mean(), 100.0 * aps.mean(), 100.0 * inps.mean(), protocol, nq, ng, cmc)


def protocol_pairs(views: np.ndarray, protocol: str) -> List[Tuple[np.ndarray, np.ndarray]]:
    """(query indices, gallery indices) blocks making up a protocol.

    ``A<->G`` scores aerial queries against the ground gallery and ground
    queries against the aerial gallery. The other protocols rank a pool
    against itself with the query image removed.
    """
    protocol = canonical_protocol(protocol)
    views = np.asarray(views)
    ground = np.flatnonzero(views == GROUND)
    aerial = np.flatnonzero(views == AERIAL)
    if protocol == "ALL":
        pool = np.arange(len(views))
        return [(pool, pool)]
    if protocol == "G<->G":
        return [(ground, ground)]
    if protocol == "A<->A":
        return [(aerial, aerial)]
    return [(aerial, ground), (ground, aerial)]


def evaluate_embeddings(emb: np.ndarray, ids, views, protocol: str) -> RetrievalMetrics:
    protocol = canonical_protocol(protocol)
    emb = _normalize(np.asarray(emb, dtype=np.float64))
    ids = np.asarray(ids)
    all_hits, all_aps, all_inps, all_cmcs = [], [], [], []
    nq = ng = 0
    for qi, gi in protocol_pairs(views, protocol):
        if len(qi) == 0 or len(gi) == 0:
            raise ValueError(f"protocol {protocol} leaves an empty query or gallery set")
        invalid = qi[:, None] == gi[None, :]
        dist = _euclidean(emb[qi], emb[gi])
        h, a, i, c = per_query_scores(dist, ids[qi], ids[gi], invalid)
        all_hits.append(h)
        all_aps.append(a)
        all_inps.append(i)
        all_cmcs.extend(c)
        nq += len(qi)
        ng += len(gi)
    hits = np.concatenate(all_hits)
    if len(hits) == 0:
        raise ValueError(f"protocol {protocol}: no query has a relevant gallery item")
    return _summarize(hits, np.concatenate(all_aps), np.concatenate(all_inps), all_cmcs, protocol, nq, ng)


def evaluate(encoder, dataset, protocol: str, batch_size: int = 128) -> RetrievalMetrics:
    """Embed ``dataset`` without labels or masks, then score one protocol."""
    emb = encoder.embed(dataset.images, dataset.views, batch_size=batch_size)
    return evaluate_embeddings(emb, dataset.identities, dataset.views, protocol)


def evaluate_all(encoder, dataset, batch_size: int = 128) -> dict:
    emb = encoder.embed(dataset.images, dataset.views, batch_size=batch_size)
    return {p: evaluate_embeddings(emb, dataset.identities, dataset.views, p) for p in PROTOCOLS}
