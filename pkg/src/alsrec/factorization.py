"""Alternating least squares with a few conjugate-gradient steps per row."""
from __future__ import annotations

import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Callable, Literal

import numpy as np
import scipy.sparse as sp

from .dataset import InteractionDataset
from .linalg import NumericalError, ShapeError, SpdSystem, cg_solve_rows, gram, loss

__all__ = [
    "TrainConfig",
    "FactorModel",
    "ModelFormatError",
    "init_factors",
    "half_update",
    "train",
    "save_model",
    "load_model",
    "SOLVE_BLOCK_ROWS",
]

_logger = logging.getLogger(__name__)

# Rows per CG batch.  Fixed so that results do not depend on the thread count.
SOLVE_BLOCK_ROWS = 1024

MAGIC = b"ALSREC1\n"


@dataclass(frozen=True)
class TrainConfig:
    factors: int = 10
    iterations: int = 2
    cg_steps: int = 3
    lam: float = 0.0
    seed: int = 0
    threads: int = 1
    convergence_delta: float | None = None

    def __post_init__(self):
        if self.factors < 1:
            raise ValueError(f"factors must be >= 1, got {self.factors}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.cg_steps < 1:
            raise ValueError(f"cg_steps must be >= 1, got {self.cg_steps}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")
        if self.convergence_delta is not None and not self.convergence_delta >= 0:
            raise ValueError("convergence_delta must be non-negative")


@dataclass
class FactorModel:
    """Company factors ``X`` (C x f) and investor factors ``Y`` (I x f)."""

    X: np.ndarray
    Y: np.ndarray
    config: TrainConfig
    loss_trace: list[float] = field(default_factory=list)
    company_ids: tuple[str, ...] = ()
    investor_ids: tuple[str, ...] = ()

    @property
    def n_companies(self) -> int:
        return self.X.shape[0]

    @property
    def n_investors(self) -> int:
        return self.Y.shape[0]

    @property
    def factors(self) -> int:
        return self.X.shape[1]

    @property
    def iterations_run(self) -> int:
        return max(len(self.loss_trace) - 1, 0)


def init_factors(n_companies: int, n_investors: int, cfg: TrainConfig) -> FactorModel:
    """Uniform ``[0, 1/sqrt(f))`` entries, X drawn before Y, both row-major."""
    if n_companies < 1 or n_investors < 1:
        raise ValueError("need at least one company and one investor")
    rng = np.random.default_rng(cfg.seed)
    scale = 1.0 / np.sqrt(cfg.factors)
    X = rng.random((n_companies, cfg.factors)) * scale
    Y = rng.random((n_investors, cfg.factors)) * scale
    return FactorModel(X, Y, cfg)


def _adjacency(d: InteractionDataset, solve_for: str) -> sp.csr_matrix:
    if solve_for == "investors":
        return d.by_investor
    if solve_for == "companies":
        return d.by_company
    raise ValueError(f"solve_for must be 'investors' or 'companies', got {solve_for!r}")


def half_update(
    target: np.ndarray,
    fixed: np.ndarray,
    d: InteractionDataset,
    lam: float,
    cg_steps: int,
    *,
    solve_for: Literal["investors", "companies"] = "investors",
    threads: int = 1,
    fixed_gram: np.ndarray | None = None,
) -> np.ndarray:
    """Re-solve every row of ``target`` with ``fixed`` held constant.

    Row ``r`` approximately solves ``(F'F + lam I) r = F' m_r`` with
    ``cg_steps`` CG steps warm-started at its current value; ``F`` is the
    fixed factor matrix and ``m_r`` the entity's binary interaction vector, so
    the right-hand side is the sum of the fixed rows of its partners.
    """
    adj = _adjacency(d, solve_for)
    target = np.asarray(target, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    if target.shape != (adj.shape[0], fixed.shape[1]) or fixed.shape[0] != adj.shape[1]:
        raise ShapeError(
            f"cannot update {solve_for}: target{target.shape}, fixed{fixed.shape}, "
            f"interactions{adj.shape}"
        )
    G = gram(fixed, threads=threads) if fixed_gram is None else fixed_gram
    system = SpdSystem(G, lam)
    out = np.empty_like(target)

    def solve_block(start: int) -> None:
        stop = min(start + SOLVE_BLOCK_ROWS, target.shape[0])
        rhs = np.asarray(adj[start:stop] @ fixed)
        try:
            out[start:stop] = cg_solve_rows(system, rhs, target[start:stop], cg_steps)
        except NumericalError as exc:
            raise NumericalError(f"{solve_for} block starting at row {start}: {exc}") from exc
        block = out[start:stop]
        if not np.all(np.isfinite(block)):
            row = start + int(np.flatnonzero(~np.all(np.isfinite(block), axis=1))[0])
            raise NumericalError(f"non-finite factors in {solve_for} row {row}")

    starts = range(0, target.shape[0], SOLVE_BLOCK_ROWS)
    if threads > 1 and target.shape[0] > SOLVE_BLOCK_ROWS:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(solve_block, starts))
    else:
        for s in starts:
            solve_block(s)
    return out


def train(
    d: InteractionDataset,
    cfg: TrainConfig,
    callback: Callable[[int, FactorModel], None] | None = None,
) -> FactorModel:
    """Fit ``X`` and ``Y`` to the dataset.

    Each iteration updates the investor factors with the company factors held
    fixed, then the company factors with the investor factors held fixed.  The
    loss is recorded after initialization and after every iteration.  With
    ``cfg.convergence_delta`` set, training stops once no factor entry moves
    by that much in an iteration.
    """
    model = init_factors(d.n_companies, d.n_investors, cfg)
    model.company_ids = d.company_ids
    model.investor_ids = d.investor_ids
    X, Y = model.X, model.Y
    gx = gram(X, threads=cfg.threads)
    model.loss_trace.append(loss(d, X, Y, cfg.lam, gram_x=gx))

    for it in range(1, cfg.iterations + 1):
        try:
            Y_new = half_update(
                Y, X, d, cfg.lam, cfg.cg_steps,
                solve_for="investors", threads=cfg.threads, fixed_gram=gx,
            )
            gy = gram(Y_new, threads=cfg.threads)
            X_new = half_update(
                X, Y_new, d, cfg.lam, cfg.cg_steps,
                solve_for="companies", threads=cfg.threads, fixed_gram=gy,
            )
        except NumericalError as exc:
            raise NumericalError(f"iteration {it}: {exc}") from exc
        gx = gram(X_new, threads=cfg.threads)
        delta = max(np.max(np.abs(X_new - X), initial=0.0), np.max(np.abs(Y_new - Y), initial=0.0))
        X, Y = X_new, Y_new
        model.X, model.Y = X, Y
        model.loss_trace.append(loss(d, X, Y, cfg.lam, gram_x=gx, gram_y=gy))
        _logger.debug("iteration %d: loss %.6g, max change %.3g", it, model.loss_trace[-1], delta)
        if callback is not None:
            callback(it, model)
        if cfg.convergence_delta is not None and delta < cfg.convergence_delta:
            _logger.info("converged after %d iterations (max change %.3g)", it, delta)
            break
    return model


# -- model file ------------------------------------------------------------

class ModelFormatError(ValueError):
    pass


def _write_strings(fh: BinaryIO, strings) -> None:
    for s in strings:
        raw = s.encode("utf-8")
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ModelFormatError("model file is truncated")
    return buf


def save_model(model: FactorModel, path: str | Path) -> None:
    """Write the binary model file.

    Layout: ``ALSREC1\\n``; u64 C, I, f; f64 lambda; u64 seed; X then Y as
    row-major f64; then the company and investor ID tables, each string
    prefixed by its u64 UTF-8 byte length.  All little-endian.
    """
    C, I, f = model.n_companies, model.n_investors, model.factors
    if len(model.company_ids) != C or len(model.investor_ids) != I:
        raise ModelFormatError("model ID tables do not match the factor matrices")
    if model.config.seed < 0:
        raise ModelFormatError("seed must be non-negative to be stored")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQQdQ", C, I, f, model.config.lam, model.config.seed))
        fh.write(np.ascontiguousarray(model.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.Y, dtype="<f8").tobytes())
        _write_strings(fh, model.company_ids)
        _write_strings(fh, model.investor_ids)


def load_model(path: str | Path) -> FactorModel:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ModelFormatError(f"{path}: not a model file (bad magic)")
        C, I, f, lam, seed = struct.unpack("<QQQdQ", _read_exact(fh, 40))
        X = np.frombuffer(_read_exact(fh, 8 * C * f), dtype="<f8").reshape(C, f).astype(np.float64)
        Y = np.frombuffer(_read_exact(fh, 8 * I * f), dtype="<f8").reshape(I, f).astype(np.float64)
        tables = []
        for n in (C, I):
            ids = []
            for _ in range(n):
                (length,) = struct.unpack("<Q", _read_exact(fh, 8))
                ids.append(_read_exact(fh, length).decode("utf-8"))
            tables.append(tuple(ids))
        if fh.read(1):
            raise ModelFormatError(f"{path}: trailing bytes after ID tables")
    cfg = replace(TrainConfig(), factors=f, lam=lam, seed=seed)
    return FactorModel(X, Y, cfg, [], tables[0], tables[1])

