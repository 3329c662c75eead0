"""Learnable thin-plate-spline warping of patch feature grids.

Feature grids are arrays of shape ``(B, H, W, D)``. Patch ``(i, j)`` sits at
``x = -1 + (2j + 1) / W`` and ``y = -1 + (2i + 1) / H``, so centers never touch
the border of ``[-1, 1]^2``.

The block runs: rotation prediction from the mean-pooled grid, rotation of
the learnable source control points, a TPS solve, evaluation of the warp at
every patch center, bilinear resampling and residual fusion
``F + eta * F_warped``. Every step has a hand-written backward.

By default the spline is fitted so that it maps the fixed target grid onto the
rotated source points, and it is used as a backward sampling map: output patch
``p`` reads the input at ``T(p)``. ``direction="forward"`` instead centers the
kernels on the rotated source points and maps them onto the target grid.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .numeric_core import SingularSystemError, solve_linear

HALF_PI = 0.5 * math.pi
TIKHONOV_EPS = 1e-10
SNAP_TOL = 1e-12
SHIPPED_K = (4, 9, 16, 25, 36)


class DegenerateConfigurationError(SingularSystemError):
    """Raised when control points are duplicated or collinear."""


def control_grid(k: int) -> np.ndarray:
    """Regular ``g x g`` grid on ``[-1, 1]^2`` in row-major order (y outer)."""
    g = int(round(math.sqrt(k)))
    if g * g != k or g < 2:
        raise ValueError(f"control point count must be a perfect square >= 4, got {k}")
    ticks = np.linspace(-1.0, 1.0, g)
    yy, xx = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


@dataclass
class ControlPointSet:
    source: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        self.source = np.array(self.source, dtype=np.float64)
        self.target = np.array(self.target, dtype=np.float64)
        self.target.setflags(write=False)
        if self.source.shape != self.target.shape or self.source.shape[1:] != (2,):
            raise ValueError("source and target must both be K x 2")

    @classmethod
    def regular(cls, k: int = 4) -> "ControlPointSet":
        grid = control_grid(k)
        return cls(grid.copy(), grid)

    @property
    def k(self) -> int:
        return self.source.shape[0]


@dataclass
class RotationHead:
    weight: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        self.bias = float(self.bias)

    @classmethod
    def zeros(cls, dim: int) -> "RotationHead":
        return cls(np.zeros(dim), 0.0)


@dataclass
class TpsSolution:
    """Affine part (``..., 2, 3``), kernel weights (``..., K, 2``) and kernel centers."""

    affine: np.ndarray
    weights: np.ndarray
    basis: np.ndarray
    system: Optional[np.ndarray] = field(default=None, repr=False)
    coeffs: Optional[np.ndarray] = field(default=None, repr=False)
    inverse: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class LtpsLayerState:
    layer: int
    theta: np.ndarray
    eta: float
    enabled: bool = True
    mode: str = "learned"
    direction: str = "backward"
    # retained forward intermediates for the backward pass
    F: Optional[np.ndarray] = field(default=None, repr=False)
    pre_activation: Optional[np.ndarray] = field(default=None, repr=False)
    pooled: Optional[np.ndarray] = field(default=None, repr=False)
    rotated: Optional[np.ndarray] = field(default=None, repr=False)
    solution: Optional[TpsSolution] = field(default=None, repr=False)
    coords: Optional[np.ndarray] = field(default=None, repr=False)
    warped: Optional[np.ndarray] = field(default=None, repr=False)
    source: Optional[np.ndarray] = field(default=None, repr=False)
    target: Optional[np.ndarray] = field(default=None, repr=False)
    head: Optional[RotationHead] = field(default=None, repr=False)


@dataclass
class LtpsGrads:
    F: np.ndarray
    source: np.ndarray
    head_weight: np.ndarray
    head_bias: float
    eta: float


def patch_centers(h: int, w: int) -> np.ndarray:
    """Patch-center coordinates, shape ``(h, w, 2)`` holding ``(x, y)``."""
    xs = -1.0 + (2.0 * np.arange(w) + 1.0) / w
    ys = -1.0 + (2.0 * np.arange(h) + 1.0) / h
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx, yy], axis=-1)


# --- rotation ---------------------------------------------------------------

def predict_rotation(F: np.ndarray, head: RotationHead) -> np.ndarray:
    """Angle per batch item: ``(pi/2) * tanh(w . meanpool(F) + b)``."""
    pooled = F.mean(axis=(1, 2))
    return HALF_PI * np.tanh(pooled @ head.weight + head.bias)


def predict_rotation_backward(F: np.ndarray, head: RotationHead, dtheta: np.ndarray):
    """Returns ``(dF, dweight, dbias)``."""
    b, h, w, d = F.shape
    pooled = F.mean(axis=(1, 2))
    t = np.tanh(pooled @ head.weight + head.bias)
    dz = np.asarray(dtheta, dtype=np.float64) * HALF_PI * (1.0 - t * t)
    dweight = dz @ pooled
    dbias = float(dz.sum())
    dF = np.broadcast_to((dz[:, None] * head.weight[None, :] / (h * w))[:, None, None, :], F.shape).copy()
    return dF, dweight, dbias


def rotation_matrix(theta) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def rotate_points(points: np.ndarray, theta) -> np.ndarray:
    """Rotate rows ``p`` to ``p @ R(theta).T``; a vector ``theta`` adds a batch axis."""
    R = rotation_matrix(np.asarray(theta, dtype=np.float64))
    return points @ np.swapaxes(R, -1, -2)


def rotate_points_backward(points: np.ndarray, theta, rotated: np.ndarray, drot: np.ndarray):
    """Returns ``(dpoints, dtheta)``; ``dpoints`` is summed over any batch axis."""
    theta = np.asarray(theta, dtype=np.float64)
    R = rotation_matrix(theta)
    dpoints = drot @ R
    while dpoints.ndim > points.ndim:
        dpoints = dpoints.sum(axis=0)
    dtheta = (-drot[..., 0] * rotated[..., 1] + drot[..., 1] * rotated[..., 0]).sum(axis=-1)
    return dpoints, dtheta


# --- kernel -----------------------------------------------------------------

def tps_kernel(r):
    """``U(r) = r^2 log r^2`` with ``U(0) = 0``."""
    r2 = np.square(np.asarray(r, dtype=np.float64))
    return _kernel_sq(r2)


def tps_kernel_deriv(r):
    """``dU/dr = 2 r (log r^2 + 1)``, zero at ``r = 0``."""
    r = np.asarray(r, dtype=np.float64)
    r2 = r * r
    pos = r2 > 0
    return np.where(pos, 2.0 * r * (np.log(np.where(pos, r2, 1.0)) + 1.0), 0.0)


def _kernel_sq(s):
    pos = s > 0
    return np.where(pos, s * np.log(np.where(pos, s, 1.0)), 0.0)


def _kernel_sq_grad_coef(s):
    # d U / d p = coef * (p - c) for U evaluated at squared distance s = |p - c|^2
    pos = s > 0
    return np.where(pos, 2.0 * (np.log(np.where(pos, s, 1.0)) + 1.0), 0.0)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...ijk,...ijk->...ij", diff, diff)


# --- solve ------------------------------------------------------------------

def _check_configuration(basis: np.ndarray) -> None:
    pts = basis.reshape(-1, basis.shape[-2], 2)
    scale = max(1.0, float(np.abs(pts).max()))
    d2 = _sqdist(pts, pts)
    k = pts.shape[1]
    d2[:, np.arange(k), np.arange(k)] = np.inf
    if np.any(d2.min(axis=(1, 2)) <= (1e-9 * scale) ** 2):
        raise DegenerateConfigurationError("duplicated control points")
    centered = pts - pts.mean(axis=1, keepdims=True)
    cov = np.einsum("bki,bkj->bij", centered, centered)
    eig = np.linalg.eigvalsh(cov)
    if np.any(eig[:, 0] <= 1e-12 * np.maximum(eig[:, 1], 1e-300)):
        raise DegenerateConfigurationError("collinear control points")


def tps_system(basis: np.ndarray, eps: float = TIKHONOV_EPS) -> np.ndarray:
    """Augmented matrix ``[[Phi + eps I, P], [P^T, 0]]`` for kernel centers ``basis``."""
    k = basis.shape[-2]
    lead = basis.shape[:-2]
    L = np.zeros(lead + (k + 3, k + 3))
    L[..., :k, :k] = _kernel_sq(_sqdist(basis, basis)) + eps * np.eye(k)
    L[..., :k, k:k + 2] = basis
    L[..., :k, k + 2] = 1.0
    L[..., k:, :k] = np.swapaxes(L[..., :k, k:], -1, -2)
    return L


@functools.lru_cache(maxsize=64)
def _shared_system(key: bytes, k: int, eps: float):
    """System matrix and its inverse for a basis shared by a whole batch.

    With backward warping the basis is the fixed target grid, so every layer
    and step reuses the same factorization.
    """
    basis = np.frombuffer(key, dtype=np.float64).reshape(k, 2)
    _check_configuration(basis)
    L = tps_system(basis, eps)
    L_inv = solve_linear(L, np.eye(k + 3))
    L.setflags(write=False)
    L_inv.setflags(write=False)
    return L, L_inv


def solve_tps(basis: np.ndarray, targets: np.ndarray, eps: float = TIKHONOV_EPS) -> TpsSolution:
    """Fit ``T`` with ``T(basis_i) = targets_i`` and the usual side conditions.

    ``basis`` may be ``(K, 2)`` while ``targets`` is ``(B, K, 2)``; the shared
    system is then factorized once for all batch items.
    """
    basis = np.asarray(basis, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    k = basis.shape[-2]
    if k < 3:
        raise DegenerateConfigurationError("need at least 3 control points")
    pad = np.zeros(targets.shape[:-2] + (3, 2))
    rhs = np.concatenate([targets, pad], axis=-2)
    L_inv = None
    if basis.ndim == 2 and rhs.ndim == 3:
        L, L_inv = _shared_system(basis.tobytes(), k, eps)
        Z = L_inv @ rhs
    else:
        _check_configuration(basis)
        L = tps_system(basis, eps)
        Z = solve_linear(L, rhs)
    return TpsSolution(
        affine=np.swapaxes(Z[..., k:, :], -1, -2),
        weights=Z[..., :k, :],
        basis=basis,
        system=L,
        coeffs=Z,
        inverse=L_inv,
    )


def solve_tps_backward(sol: TpsSolution, daffine: np.ndarray, dweights: np.ndarray, need_basis: bool = True):
    """Implicit differentiation through ``L Z = [targets; 0]``.

    Returns ``(dbasis, dtargets)``; ``dbasis`` is None when not requested.
    """
    k = sol.basis.shape[-2]
    dZ = np.concatenate([dweights, np.swapaxes(daffine, -1, -2)], axis=-2)
    L = sol.system
    if sol.inverse is not None:
        lam = np.swapaxes(sol.inverse, -1, -2) @ dZ
    else:
        lam = solve_linear(np.swapaxes(L, -1, -2), dZ)
    dtargets = lam[..., :k, :]
    if not need_basis:
        return None, dtargets
    # dL = -lam Z^T, reduced onto the basis coordinates
    dL = -np.einsum("...im,...jm->...ij", lam, sol.coeffs)
    while dL.ndim > sol.basis.ndim:
        dL = dL.sum(axis=0)
    basis = sol.basis
    dphi = dL[..., :k, :k]
    dP = dL[..., :k, k:] + np.swapaxes(dL[..., k:, :k], -1, -2)
    sym = dphi + np.swapaxes(dphi, -1, -2)
    coef = _kernel_sq_grad_coef(_sqdist(basis, basis)) * sym
    diff = basis[..., :, None, :] - basis[..., None, :, :]
    dbasis = np.einsum("...ij,...ijk->...ik", coef, diff) + dP[..., :2]
    return dbasis, dtargets


# --- warp evaluation ----------------------------------------------------------

def evaluate_warp(sol: TpsSolution, points: np.ndarray) -> np.ndarray:
    """``T(p) = A [p; 1] + sum_i w_i U(|p - c_i|)`` at every row of ``points``."""
    points = np.asarray(points, dtype=np.float64)
    U = _kernel_sq(_sqdist(points, sol.basis))
    lin = points @ np.swapaxes(sol.affine[..., :, :2], -1, -2) + sol.affine[..., None, :, 2]
    return lin + U @ sol.weights


def evaluate_warp_backward(sol: TpsSolution, points: np.ndarray, dout: np.ndarray, need_basis: bool = True):
    """Returns ``(daffine, dweights, dbasis)`` for a cotangent on the warped points."""
    s = _sqdist(points, sol.basis)
    U = _kernel_sq(s)
    dweights = np.swapaxes(U, -1, -2) @ dout
    daffine = np.concatenate(
        [np.swapaxes(dout, -1, -2) @ points, dout.sum(axis=-2)[..., :, None]], axis=-1
    )
    dbasis = None
    if need_basis:
        # dT/dc_i = -coef * (p - c_i) w_i^T
        g = np.einsum("...nm,...km->...nk", dout, sol.weights) * _kernel_sq_grad_coef(s)
        diff = points[..., :, None, :] - sol.basis[..., None, :, :]
        dbasis = -np.einsum("...nk,...nkc->...kc", g, diff)
        while dbasis.ndim > sol.basis.ndim:
            dbasis = dbasis.sum(axis=0)
    return daffine, dweights, dbasis


# --- bilinear sampling --------------------------------------------------------

def _axis_index(c: np.ndarray, n: int):
    u = ((c + 1.0) * n - 1.0) * 0.5
    r = np.round(u)
    u = np.where(np.abs(u - r) < SNAP_TOL, r, u)
    inside = (u > 0.0) & (u < n - 1)
    u = np.clip(u, 0.0, n - 1)
    if n == 1:
        zero = np.zeros(u.shape, dtype=np.intp)
        return zero, zero, np.zeros_like(u), inside
    # non-finite coordinates read cell 0 with a NaN weight, so the NaN propagates
    i0 = np.minimum(np.floor(np.where(np.isfinite(u), u, 0.0)).astype(np.intp), n - 2)
    return i0, i0 + 1, u - i0, inside


def bilinear_sample(F: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample ``F`` (``B, H, W, D``) at ``coords`` (``B, Ho, Wo, 2``) with border clamping."""
    b, h, w, d = F.shape
    x0, x1, fx, _ = _axis_index(coords[..., 0], w)
    y0, y1, fy, _ = _axis_index(coords[..., 1], h)
    if h > 1 and w > 1 and coords.ndim == 4:
        # dense (B, Ho*Wo, H*W) interpolation matrix; the four corners are distinct cells
        ho, wo = coords.shape[1:3]
        n = ho * wo
        S = np.zeros((b, n, h * w))
        bi = np.arange(b)[:, None]
        ri = np.arange(n)[None, :]
        c00 = (y0 * w + x0).reshape(b, n)
        fx2, fy2 = fx.reshape(b, n), fy.reshape(b, n)
        S[bi, ri, c00] = (1.0 - fx2) * (1.0 - fy2)
        S[bi, ri, c00 + 1] = fx2 * (1.0 - fy2)
        S[bi, ri, c00 + w] = (1.0 - fx2) * fy2
        S[bi, ri, c00 + w + 1] = fx2 * fy2
        return (S @ F.reshape(b, h * w, d)).reshape(b, ho, wo, d)
    bi = np.arange(b).reshape((b,) + (1,) * (coords.ndim - 2))
    fx = fx[..., None]
    fy = fy[..., None]
    top = (1.0 - fx) * F[bi, y0, x0] + fx * F[bi, y0, x1]
    bot = (1.0 - fx) * F[bi, y1, x0] + fx * F[bi, y1, x1]
    return (1.0 - fy) * top + fy * bot


def bilinear_sample_backward(F: np.ndarray, coords: np.ndarray, dout: np.ndarray):
    """Returns ``(dF, dcoords)``. Clamped coordinates receive zero gradient."""
    b, h, w, d = F.shape
    x0, x1, fx, in_x = _axis_index(coords[..., 0], w)
    y0, y1, fy, in_y = _axis_index(coords[..., 1], h)
    bi = np.broadcast_to(np.arange(b).reshape((b,) + (1,) * (coords.ndim - 2)), x0.shape)
    fxe = fx[..., None]
    fye = fy[..., None]
    f00, f01 = F[bi, y0, x0], F[bi, y0, x1]
    f10, f11 = F[bi, y1, x0], F[bi, y1, x1]

    dF = np.zeros((b * h * w, d))
    for yy, xx, wt in (
        (y0, x0, (1.0 - fxe) * (1.0 - fye)),
        (y0, x1, fxe * (1.0 - fye)),
        (y1, x0, (1.0 - fxe) * fye),
        (y1, x1, fxe * fye),
    ):
        np.add.at(dF, ((bi * h + yy) * w + xx).reshape(-1), (dout * wt).reshape(-1, d))
    dF = dF.reshape(b, h, w, d)

    du = ((1.0 - fye) * (f01 - f00) + fye * (f11 - f10)) * dout
    dv = ((1.0 - fxe) * (f10 - f00) + fxe * (f11 - f01)) * dout
    dcx = du.sum(axis=-1) * (0.5 * w) * in_x
    dcy = dv.sum(axis=-1) * (0.5 * h) * in_y
    return dF, np.stack([dcx, dcy], axis=-1)


# --- full block ---------------------------------------------------------------

def ltps_forward(
    F: np.ndarray,
    cps: ControlPointSet,
    head: Optional[RotationHead],
    eta: float,
    *,
    mode: str = "learned",
    theta_fixed: float = 0.0,
    direction: str = "backward",
    layer: int = -1,
    keep: bool = True,
):
    """Warp a feature grid and fuse it residually.

    ``mode`` is ``"learned"`` (rotation head), ``"fixed"`` (constant
    ``theta_fixed``) or ``"original"`` (no rotation, frozen source points).
    Returns ``(F_final, state)``; ``keep=False`` drops the intermediates.
    """
    F = np.asarray(F, dtype=np.float64)
    b, h, w, d = F.shape
    if h * w < 4:
        raise ValueError("LTPS needs at least 4 patches")
    if mode == "learned":
        pooled = F.mean(axis=(1, 2))
        pre = pooled @ head.weight + head.bias
        theta = HALF_PI * np.tanh(pre)
    elif mode == "fixed":
        if abs(theta_fixed) > HALF_PI:
            raise ValueError("fixed angle must lie in [-pi/2, pi/2]")
        pooled = pre = None
        theta = np.full(b, float(theta_fixed))
    elif mode == "original":
        pooled = pre = None
        theta = np.zeros(b)
    else:
        raise ValueError(f"unknown LTPS mode {mode!r}")

    state = LtpsLayerState(layer, theta, float(eta), True, mode, direction)
    if keep:
        state.F, state.pooled, state.pre_activation, state.head = F, pooled, pre, head
        state.source, state.target = cps.source.copy(), cps.target
    if eta == 0.0:
        return F, state

    rotated = rotate_points(cps.source, theta)
    if direction == "backward":
        sol = solve_tps(cps.target, rotated)
    elif direction == "forward":
        sol = solve_tps(rotated, np.broadcast_to(cps.target, rotated.shape))
    else:
        raise ValueError(f"unknown warp direction {direction!r}")
    centers = patch_centers(h, w).reshape(-1, 2)
    coords = evaluate_warp(sol, centers).reshape(b, h, w, 2)
    warped = bilinear_sample(F, coords)
    out = F + eta * warped
    if keep:
        state.rotated, state.solution, state.coords, state.warped = rotated, sol, coords, warped
    return out, state


def ltps_backward(state: LtpsLayerState, dout: np.ndarray, dtheta: Optional[np.ndarray] = None) -> LtpsGrads:
    """Chain rule through fusion, sampling, warp evaluation, solve, rotation and pooling."""
    F = state.F
    b, h, w, d = F.shape
    dF = np.array(dout, dtype=np.float64, copy=True)
    dth = np.zeros(b) if dtheta is None else np.array(dtheta, dtype=np.float64).reshape(b)
    dsource = np.zeros_like(state.source)
    deta = 0.0

    if state.eta != 0.0:
        deta = float(np.sum(dout * state.warped))
        dF_s, dcoords = bilinear_sample_backward(F, state.coords, state.eta * dout)
        dF += dF_s
        centers = patch_centers(h, w).reshape(-1, 2)
        dcoords = dcoords.reshape(b, -1, 2)
        sol = state.solution
        forward_dir = state.direction == "forward"
        daff, dwts, dbasis_eval = evaluate_warp_backward(sol, centers, dcoords, need_basis=forward_dir)
        dbasis_solve, dtargets = solve_tps_backward(sol, daff, dwts, need_basis=forward_dir)
        drot = dbasis_eval + dbasis_solve if forward_dir else dtargets
        dsrc, dth_rot = rotate_points_backward(state.source, state.theta, state.rotated, drot)
        if state.mode != "original":
            dsource = dsrc
        if state.mode == "learned":
            dth = dth + dth_rot

    dweight = np.zeros_like(state.head.weight) if state.head is not None else np.zeros(d)
    dbias = 0.0
    if state.mode == "learned":
        t = np.tanh(state.pre_activation)
        dz = dth * HALF_PI * (1.0 - t * t)
        dweight = dz @ state.pooled
        dbias = float(dz.sum())
        dF += (dz[:, None] * state.head.weight[None, :] / (h * w))[:, None, None, :]
    return LtpsGrads(dF, dsource, dweight, dbias, deta)


def original_tps_forward(F, cps: ControlPointSet, eta: float, **kw):
    """Classic TPS: no rotation, source points treated as constants."""
    return ltps_forward(F, cps, None, eta, mode="original", **kw)


def fixed_angle_forward(F, cps: ControlPointSet, theta_fixed: float, eta: float, **kw):
    return ltps_forward(F, cps, None, eta, mode="fixed", theta_fixed=theta_fixed, **kw)


# --- warp demo export -----------------------------------------------------------

def warp_image(image: np.ndarray, cps: ControlPointSet, theta: float, direction: str = "backward"):
    """Warp an ``(H, W)`` or ``(H, W, C)`` image at pixel resolution.

    Returns ``(warped, grid)`` with ``grid`` holding the sampling coordinates.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    h, w, c = img.shape
    rotated = rotate_points(cps.source, np.array([theta]))
    if direction == "backward":
        sol = solve_tps(cps.target, rotated)
    else:
        sol = solve_tps(rotated, np.broadcast_to(cps.target, rotated.shape))
    grid = evaluate_warp(sol, patch_centers(h, w).reshape(-1, 2)).reshape(1, h, w, 2)
    warped = bilinear_sample(img[None], grid)[0]
    if image.ndim == 2:
        warped = warped[..., 0]
    return warped, grid[0]


def export_warp_demo(image: np.ndarray, cps: ControlPointSet, theta: float, out_dir, direction: str = "backward"):
    """Write ``original.ppm``, ``warped.ppm`` and ``grid.csv`` into ``out_dir``."""
    from .pnm import write_ppm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    warped, grid = warp_image(image, cps, theta, direction)
    write_ppm(out / "original.ppm", image)
    write_ppm(out / "warped.ppm", warped)
    with open(out / "grid.csv", "w", encoding="ascii") as fh:
        fh.write("x,y\n")
        for x, y in grid.reshape(-1, 2):
            fh.write(f"{x:.17g},{y:.17g}\n")
    return out
