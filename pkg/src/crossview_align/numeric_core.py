"""Dense float64 helpers shared by every other module.

Arrays are plain ``numpy.ndarray`` objects with dtype float64. This module adds
the pieces numpy does not give us directly: a partial-pivoting solver that
refuses near-singular systems instead of returning garbage, a central
difference gradient checker, and a text dump format for debugging.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

PIVOT_RTOL = 1e-12


class NumericalError(ArithmeticError):
    """Base class for numerical failures (non-finite values, singular systems)."""


class SingularSystemError(NumericalError):
    pass


def as_tensor(x, shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """Convert to a contiguous float64 array, checking finiteness and shape."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if shape is not None and tuple(arr.shape) != tuple(shape):
        raise ValueError(f"expected shape {tuple(shape)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError("tensor contains NaN or Inf")
    return arr


def solve_linear(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``A @ X = B`` by Gaussian elimination with partial pivoting.

    Leading dimensions broadcast as a batch: ``A`` is ``(..., n, n)`` and ``B``
    is ``(..., n, m)`` or ``(..., n)``. Elimination runs column by column over
    the whole batch, so the cost is ``n`` vectorized steps.

    Raises SingularSystemError if any pivot falls below ``1e-12`` times the
    largest absolute entry of its matrix.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ValueError(f"A must be square, got shape {A.shape}")
    n = A.shape[-1]
    vector_rhs = B.ndim == A.ndim - 1
    if vector_rhs:
        B = B[..., None]
    if B.shape[-2] != n:
        raise ValueError(f"B has {B.shape[-2]} rows, expected {n}")

    batch = np.broadcast_shapes(A.shape[:-2], B.shape[:-2])
    M = np.broadcast_to(A, batch + (n, n)).reshape(-1, n, n).copy()
    R = np.broadcast_to(B, batch + B.shape[-2:]).reshape(-1, n, B.shape[-1]).copy()
    nb = M.shape[0]
    rows = np.arange(nb)
    scale = np.abs(M).reshape(nb, -1).max(axis=1)
    threshold = PIVOT_RTOL * np.where(scale > 0, scale, 1.0)

    for k in range(n):
        piv = k + np.argmax(np.abs(M[:, k:, k]), axis=1)
        if np.any(np.abs(M[rows, piv, k]) < threshold):
            raise SingularSystemError(f"pivot below tolerance at column {k}")
        swap = piv != k
        if np.any(swap):
            idx = rows[swap]
            p = piv[swap]
            M[idx, k], M[idx, p] = M[idx, p].copy(), M[idx, k].copy()
            R[idx, k], R[idx, p] = R[idx, p].copy(), R[idx, k].copy()
        if k == n - 1:
            break
        factors = M[:, k + 1:, k] / M[:, k, k][:, None]
        M[:, k + 1:, k:] -= factors[:, :, None] * M[:, k, None, k:]
        R[:, k + 1:] -= factors[:, :, None] * R[:, k, None, :]

    X = np.empty_like(R)
    for k in range(n - 1, -1, -1):
        acc = R[:, k] - np.einsum("bj,bjm->bm", M[:, k, k + 1:], X[:, k + 1:])
        X[:, k] = acc / M[:, k, k][:, None]

    X = X.reshape(batch + (n, R.shape[-1]))
    return X[..., 0] if vector_rhs else X


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    errors: list = field(default_factory=list)
    tolerance: float = 1e-4
    passed: bool = False

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op_name}: max rel err {self.max_rel_error:.3e} (tol {self.tolerance:g})"


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    point,
    analytic,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    op_name: str = "",
    indices: Optional[Sequence[int]] = None,
) -> GradReport:
    """Compare an analytic gradient against central differences.

    ``analytic`` is either the gradient array itself or a callable evaluated
    at ``point``. The relative error per coordinate is
    ``|a - n| / max(1, |a|, |n|)``. ``indices`` restricts the comparison to a
    subset of flat coordinates, which keeps checks on large tensors cheap.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(point, dtype=np.float64, copy=True)
    grad = analytic(x.copy()) if callable(analytic) else analytic
    grad = np.asarray(grad, dtype=np.float64).reshape(-1)
    if grad.size != x.size:
        raise ValueError(f"gradient has {grad.size} entries, point has {x.size}")

    flat = x.reshape(-1)
    coords = range(flat.size) if indices is None else [int(i) for i in indices]
    errors = []
    finite = bool(np.all(np.isfinite(grad)))
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        num = (fp - fm) / (2.0 * step)
        a = grad[i]
        errors.append(abs(a - num) / max(1.0, abs(a), abs(num)))
    max_err = max(errors) if errors else 0.0
    if not finite:
        max_err = float("inf")
    return GradReport(op_name, float(max_err), errors, tolerance, finite and max_err <= tolerance)


def dump_tensor(path, arr: np.ndarray) -> None:
    """Write a tensor as text: a shape line, then one value per line."""
    arr = np.asarray(arr, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(" ".join(str(s) for s in arr.shape) + "\n")
        for v in arr.reshape(-1):
            fh.write(f"{v:.17g}\n")


def load_tensor(path) -> np.ndarray:
    with open(path, encoding="ascii") as fh:
        shape = tuple(int(s) for s in fh.readline().split())
        values = np.array([float(line) for line in fh if line.strip()], dtype=np.float64)
    return values.reshape(shape)
