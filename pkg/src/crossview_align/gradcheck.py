"""Finite-difference suite over every hand-written backward pass.

Random draws that land within ``KINK_MARGIN`` of a non-smooth point (hinge,
``|x|``, ReLU, bilinear cell edge, hardest-pair tie) are re-drawn, since
central differences are meaningless across a kink.
"""
from __future__ import annotations

from typing import Callable, List, Sequence

import numpy as np

from . import dam, objectives as obj, tps
from .numeric_core import GradReport, finite_diff_check

KINK_MARGIN = 1e-3
STEP = 1e-5
TOL = 1e-4
MAX_REDRAWS = 200


def _redraw(seed: int, tag: int, make: Callable[[np.random.Generator], tuple], ok: Callable[..., bool]):
    for attempt in range(MAX_REDRAWS):
        rng = np.random.default_rng([seed, tag, attempt])
        sample = make(rng)
        if ok(*sample):
            return sample
    raise RuntimeError(f"no kink-free draw for check {tag} at seed {seed}")


def _check(name, f, x, grad) -> GradReport:
    return finite_diff_check(f, x, grad, step=STEP, tolerance=TOL, op_name=name)


# --- LTPS --------------------------------------------------------------------------

def _ltps_setup(rng, direction):
    b, h, w, d = 2, 4, 3, 3
    F = rng.normal(size=(b, h, w, d))
    src = tps.control_grid(4) + rng.uniform(-0.15, 0.15, size=(4, 2))
    head_w = rng.normal(scale=0.8, size=d)
    head_b = float(rng.normal(scale=0.3))
    R = rng.normal(size=(b, h, w, d))
    return F, src, head_w, head_b, R, direction


def _ltps_out(F, src, hw, hb, direction):
    cps = tps.ControlPointSet(src, tps.control_grid(4))
    return tps.ltps_forward(F, cps, tps.RotationHead(hw, hb), 0.7, direction=direction)


def _ltps_smooth(F, src, hw, hb, R, direction) -> bool:
    _, st = _ltps_out(F, src, hw, hb, direction)
    h, w = F.shape[1:3]
    px = (st.coords[..., 0] + 1.0) * w / 2.0 - 0.5
    py = (st.coords[..., 1] + 1.0) * h / 2.0 - 0.5
    edge = lambda v: np.abs(v - np.rint(v)).min()
    return edge(px) > KINK_MARGIN and edge(py) > KINK_MARGIN


def ltps_checks(seed: int) -> List[GradReport]:
    reports = []
    for tag, direction in enumerate(("backward", "forward")):
        F, src, hw, hb, R, _ = _redraw(seed, 10 + tag, lambda r: _ltps_setup(r, direction), _ltps_smooth)
        _, st = _ltps_out(F, src, hw, hb, direction)
        g = tps.ltps_backward(st, R)
        loss = lambda F_, s_, w_, b_: float(np.sum(_ltps_out(F_, s_, w_, b_, direction)[0] * R))
        name = f"ltps_forward[{direction}]"
        reports.append(_check(name + " dF", lambda x: loss(x, src, hw, hb), F, g.F))
        reports.append(_check(name + " dsource", lambda x: loss(F, x, hw, hb), src, g.source))
        reports.append(_check(name + " dhead.w", lambda x: loss(F, src, x, hb), hw, g.head_weight))
        reports.append(_check(name + " dhead.b", lambda x: loss(F, src, hw, float(x[0])), np.array([hb]),
                              np.array([g.head_bias])))
        cps = tps.ControlPointSet(src, tps.control_grid(4))
        head = tps.RotationHead(hw, hb)
        eta_loss = lambda x: float(np.sum(tps.ltps_forward(F, cps, head, float(x[0]), direction=direction)[0] * R))
        reports.append(_check(name + " deta", eta_loss, np.array([0.7]), np.array([g.eta])))
    return reports


# --- mask generator ------------------------------------------------------------------

def mask_checks(seed: int) -> List[GradReport]:
    d = 6

    def make(rng):
        gen = dam.MaskGenerator.init(d, rng, scale=0.7)
        gen.b1 = rng.normal(scale=0.2, size=gen.b1.shape)
        gen.b2 = rng.normal(scale=0.2, size=gen.b2.shape)
        return rng.normal(size=(5, d)), gen, rng.normal(size=(5, d))

    def ok(f, gen, R):
        return np.abs(f @ gen.W1 + gen.b1).min() > KINK_MARGIN

    f, gen, R = _redraw(seed, 20, make, ok)
    df, grads = dam.generate_mask_backward(f, gen, R)

    def with_param(name):
        def fn(x):
            g2 = dam.MaskGenerator(gen.W1, gen.b1, gen.W2, gen.b2)
            setattr(g2, name, x)
            return float(np.sum(dam.generate_mask(f, g2) * R))
        return fn

    reports = [_check("generate_mask df", lambda x: float(np.sum(dam.generate_mask(x, gen) * R)), f, df)]
    for name in ("W1", "b1", "W2", "b2"):
        reports.append(_check(f"generate_mask d{name}", with_param(name), getattr(gen, name), grads[name]))
    return reports


# --- losses --------------------------------------------------------------------------

def _pk_labels(p=3, k=3):
    return np.repeat(np.arange(p), k)


def _triplet_smooth(feat, labels, margin=0.3) -> bool:
    diff = feat[:, None] - feat[None]
    dist = np.sqrt((diff ** 2).sum(-1))
    same = labels[:, None] == labels[None]
    n = len(labels)
    for i in range(n):
        pos = np.sort(dist[i][same[i] & (np.arange(n) != i)])[::-1]
        neg = np.sort(dist[i][~same[i]])
        if len(pos) > 1 and pos[0] - pos[1] < KINK_MARGIN:
            return False
        if len(neg) > 1 and neg[1] - neg[0] < KINK_MARGIN:
            return False
        if abs(pos[0] - neg[0] + margin) < KINK_MARGIN:
            return False
    return True


def loss_checks(seed: int) -> List[GradReport]:
    reports = []
    labels = _pk_labels()
    n, d, c = len(labels), 5, 4

    rng = np.random.default_rng([seed, 30])
    logits = rng.normal(size=(n, c))
    for s in (0.0, 0.1):
        reports.append(_check(f"id_loss(smoothing={s})", lambda x: obj.id_loss(x, labels, s), logits,
                              obj.id_loss_grad(logits, labels, s)))

    (feat,) = _redraw(seed, 31, lambda r: (r.normal(scale=0.4, size=(n, d)),),
                      lambda x: _triplet_smooth(x, labels))
    reports.append(_check("triplet_loss", lambda x: obj.triplet_loss(x, labels), feat,
                          obj.triplet_loss_grad(feat, labels)))

    (theta,) = _redraw(seed, 32, lambda r: (r.uniform(-1.5, 1.5, size=(4, 3)),),
                       lambda t: np.abs(t).min() > KINK_MARGIN)
    reports.append(_check("deformation_loss", obj.deformation_loss, theta, obj.deformation_loss_grad(theta)))

    rng = np.random.default_rng([seed, 33])
    m = rng.uniform(0.05, 0.95, size=(n, d))
    f = rng.normal(size=(n, d))
    p = rng.normal(size=(n, d))
    dm, df, dp = obj.align_loss_grad(m, f, p)
    reports.append(_check("align_loss dm", lambda x: obj.align_loss(x, f, p), m, dm))
    reports.append(_check("align_loss df", lambda x: obj.align_loss(m, x, p), f, df))
    reports.append(_check("align_loss dp", lambda x: obj.align_loss(m, f, x), p, dp))
    reports.append(_check("entropy_loss", obj.entropy_loss, m, obj.entropy_loss_grad(m)))

    lam = 0.1
    mask_fn = lambda x: obj.mask_loss(obj.align_loss(x, f, p), obj.entropy_loss(x), lam)
    reports.append(_check("mask_loss dm", mask_fn, m, dm + lam * obj.entropy_loss_grad(m)))
    return reports


def run_suite(seeds: Sequence[int] = (0, 1, 2, 3, 4)) -> List[GradReport]:
    reports: List[GradReport] = []
    for seed in seeds:
        for group in (ltps_checks, mask_checks, loss_checks):
            for r in group(seed):
                r.op_name = f"{r.op_name} (seed {seed})"
                reports.append(r)
    return reports
