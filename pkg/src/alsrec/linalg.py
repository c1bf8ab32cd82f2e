"""Dense kernels: Gram matrices, conjugate gradient, and the all-pairs loss."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import InteractionDataset

__all__ = [
    "NumericalError",
    "ShapeError",
    "SpdSystem",
    "gram",
    "cg_solve",
    "cg_solve_rows",
    "loss",
    "GRAM_BLOCK_ROWS",
]

# Row-block size for Gram accumulation.  Results are bit-identical for a fixed
# block size whatever the number of threads.
GRAM_BLOCK_ROWS = 2048


class NumericalError(ArithmeticError):
    pass


class ShapeError(ValueError):
    pass


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{what} contains non-finite entries")


@dataclass(frozen=True)
class SpdSystem:
    """The matrix ``A + shift * I`` with ``A`` symmetric positive semi-definite."""

    A: np.ndarray
    shift: float = 0.0

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ShapeError(f"system matrix must be square, got {A.shape}")
        if self.shift < 0:
            raise ValueError("shift must be non-negative")
        scale = max(1.0, float(np.max(np.abs(A)))) if A.size else 1.0
        if np.max(np.abs(A - A.T), initial=0.0) > 1e-12 * scale:
            raise ValueError("system matrix is not symmetric")
        object.__setattr__(self, "A", A)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def effective(self) -> np.ndarray:
        return self.A + self.shift * np.eye(self.dim)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.A @ x + self.shift * x

    def objective(self, x: np.ndarray, b: np.ndarray) -> float:
        """0.5 x'(A + shift I)x - b'x."""
        return float(0.5 * x @ self.matvec(x) - b @ x)


def gram(F: np.ndarray, *, block_rows: int | None = None, threads: int = 1) -> np.ndarray:
    """Return ``F.T @ F``, exactly symmetric.

    Row blocks of ``block_rows`` are reduced in index order, so the result
    does not depend on ``threads``.
    """
    F = np.asarray(F, dtype=np.float64)
    if F.ndim != 2:
        raise ShapeError(f"expected a 2-d factor matrix, got shape {F.shape}")
    _check_finite(F, "factor matrix")
    n, f = F.shape
    block_rows = block_rows or GRAM_BLOCK_ROWS
    starts = range(0, n, block_rows)

    def partial(s):
        B = F[s : s + block_rows]
        return B.T @ B

    if threads > 1 and n > block_rows:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(partial, starts))
    else:
        parts = [partial(s) for s in starts]

    G = np.zeros((f, f))
    for P in parts:
        G += P
    upper = np.triu(G)
    return upper + np.triu(G, 1).T


def _residual_tol(b_norm):
    return 1e-12 * np.maximum(1.0, b_norm)


def cg_solve(
    system: SpdSystem,
    b: np.ndarray,
    x0: np.ndarray,
    max_steps: int,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Run at most ``max_steps`` conjugate-gradient steps from ``x0``.

    Stops early once the residual norm drops below ``1e-12 * max(1, |b|)``,
    or when the search direction has zero curvature (semi-definite systems).
    ``callback(step, x)`` is called after every completed step.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    b = np.asarray(b, dtype=np.float64)
    x = np.array(x0, dtype=np.float64)
    if b.shape != (system.dim,) or x.shape != (system.dim,):
        raise ShapeError(
            f"system is {system.dim}-dimensional, got b{b.shape} and x0{x.shape}"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        return _cg(system, b, x, max_steps, callback)


def _cg(system, b, x, max_steps, callback):
    tol = _residual_tol(np.linalg.norm(b))
    r = b - system.matvec(x)
    rr = float(r @ r)
    p = r.copy()
    for step in range(1, max_steps + 1):
        if np.sqrt(rr) < tol:
            break
        Ap = system.matvec(p)
        pAp = float(p @ Ap)
        if not np.isfinite(pAp):
            raise NumericalError(f"CG breakdown at step {step}: non-finite curvature")
        if pAp <= 0.0:
            break
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        if not (np.isfinite(alpha) and np.isfinite(rr_new)):
            raise NumericalError(f"CG breakdown at step {step}: non-finite iterate")
        p = r + (rr_new / rr) * p
        rr = rr_new
        if callback is not None:
            callback(step, x.copy())
    return x


def cg_solve_rows(
    system: SpdSystem, B: np.ndarray, X0: np.ndarray, max_steps: int
) -> np.ndarray:
    """Independent CG solves ``system @ x_r = b_r`` for every row of ``B``.

    Same iteration and stopping rules as :func:`cg_solve`, vectorized across
    rows.  Raises :class:`NumericalError` naming the first offending row.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    B = np.asarray(B, dtype=np.float64)
    X = np.array(X0, dtype=np.float64)
    if B.shape != X.shape or B.ndim != 2 or B.shape[1] != system.dim:
        raise ShapeError(f"row blocks must be n x {system.dim}, got {B.shape} and {X.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        return _cg_rows(system.effective(), B, X, max_steps)


def _cg_rows(M, B, X, max_steps):
    tol = _residual_tol(np.linalg.norm(B, axis=1))
    R = B - X @ M
    rr = np.einsum("ij,ij->i", R, R)
    P = R.copy()
    active = np.sqrt(rr) >= tol
    for step in range(1, max_steps + 1):
        if not active.any():
            break
        AP = P @ M
        pAp = np.einsum("ij,ij->i", P, AP)
        bad = active & ~np.isfinite(pAp)
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise NumericalError(f"CG breakdown at step {step} in row {row}: non-finite curvature")
        active &= pAp > 0.0
        alpha = np.where(active, rr / np.where(active, pAp, 1.0), 0.0)
        X += alpha[:, None] * P
        R -= alpha[:, None] * AP
        rr_new = np.einsum("ij,ij->i", R, R)
        bad = active & ~(np.isfinite(alpha) & np.isfinite(rr_new))
        if bad.any():
            row = int(np.flatnonzero(bad)[0])
            raise NumericalError(f"CG breakdown at step {step} in row {row}: non-finite iterate")
        beta = np.where(active, rr_new / np.where(active, rr, 1.0), 0.0)
        P = R + beta[:, None] * P
        rr = rr_new
        active &= np.sqrt(rr) >= tol
    return X


def _check_factor_shapes(d: InteractionDataset, X: np.ndarray, Y: np.ndarray) -> None:
    if X.ndim != 2 or Y.ndim != 2 or X.shape[1] != Y.shape[1]:
        raise ShapeError(f"factor matrices disagree: X{X.shape}, Y{Y.shape}")
    if X.shape[0] != d.n_companies or Y.shape[0] != d.n_investors:
        raise ShapeError(
            f"dataset is {d.n_companies} companies x {d.n_investors} investors, "
            f"got X{X.shape}, Y{Y.shape}"
        )


def loss(
    d: InteractionDataset,
    X: np.ndarray,
    Y: np.ndarray,
    lam: float,
    *,
    gram_x: np.ndarray | None = None,
    gram_y: np.ndarray | None = None,
) -> float:
    """Regularized squared error summed over every company/investor pair.

    Uses ``sum_all (x_c.y_i)^2 = trace(XtX YtY)`` so only the observed pairs
    are visited: ``trace(Gx Gy) + sum_obs(1 - 2 x_c.y_i) + lam(|X|^2 + |Y|^2)``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    _check_factor_shapes(d, X, Y)
    Gx = gram(X) if gram_x is None else gram_x
    Gy = gram(Y) if gram_y is None else gram_y
    all_pairs = float(np.sum(Gx * Gy))
    # sum over observed pairs of x_c.y_i, via the sparse product M' X (I x f)
    observed = float(np.sum(Y * (d.by_investor @ X)))
    reg = float(np.trace(Gx) + np.trace(Gy))
    return all_pairs + d.nnz - 2.0 * observed + lam * reg

