"""Hold-one-out hit@k accuracy and hyperparameter sweeps."""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import InteractionDataset, holdout_split
from .factorization import FactorModel, TrainConfig, train
from .recommend import DEFAULT_TOP_K, top_k_batch

__all__ = [
    "EvalConfig",
    "TrialResult",
    "EvalSummary",
    "SweepResult",
    "EvaluationError",
    "derive_seed",
    "run_trial",
    "evaluate",
    "evaluate_iterations",
    "sweep",
    "write_sweep_csv",
    "write_trials_csv",
    "SWEEP_HEADER",
]

_logger = logging.getLogger(__name__)

SWEEP_HEADER = [
    "factors", "iterations", "lambda", "trials",
    "accuracy_mean", "accuracy_std", "loss_final_mean", "wall_time_s",
]

SPLIT_STREAM = 0
INIT_STREAM = 1


class EvaluationError(RuntimeError):
    pass


def derive_seed(base_seed: int, trial_index: int, stream: int = SPLIT_STREAM) -> int:
    """Stable 64-bit seed for one (base seed, trial, stream) triple."""
    key = f"alsrec:{base_seed}:{trial_index}:{stream}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


@dataclass(frozen=True)
class EvalConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    holdout_fraction: float = 0.10
    top_k: int = DEFAULT_TOP_K
    trials: int = 50
    base_seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if not 0 < self.holdout_fraction <= 1:
            raise ValueError(f"holdout_fraction must be in (0, 1], got {self.holdout_fraction}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.jobs < 1:
            raise ValueError(f"jobs must be >= 1, got {self.jobs}")


@dataclass(frozen=True)
class TrialResult:
    trial_index: int
    hidden_count: int
    correct_count: int
    final_train_loss: float
    wall_time: float
    hidden: tuple[tuple[int, int], ...] = ()
    hits: tuple[bool, ...] = ()

    @property
    def accuracy(self) -> float:
        return self.correct_count / self.hidden_count


@dataclass(frozen=True)
class EvalSummary:
    trials: list[TrialResult]

    @property
    def accuracies(self) -> np.ndarray:
        return np.array([t.accuracy for t in self.trials])

    @property
    def accuracy_mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def accuracy_std(self) -> float:
        """Sample standard deviation; 0 for a single trial."""
        if len(self.trials) < 2:
            return 0.0
        return float(np.std(self.accuracies, ddof=1))

    @property
    def loss_final_mean(self) -> float:
        return float(np.mean([t.final_train_loss for t in self.trials]))

    @property
    def wall_time(self) -> float:
        return float(sum(t.wall_time for t in self.trials))


@dataclass(frozen=True)
class SweepResult:
    factors: int
    iterations: int
    lam: float
    trials: int
    accuracy_mean: float
    accuracy_std: float
    loss_final_mean: float
    wall_time: float
    summary: EvalSummary | None = None

    def row(self, with_time: bool = True) -> list[str]:
        return [
            str(self.factors), str(self.iterations), repr(float(self.lam)), str(self.trials),
            repr(self.accuracy_mean), repr(self.accuracy_std), repr(self.loss_final_mean),
            f"{self.wall_time:.3f}" if with_time else "",
        ]


def _run_trial_checkpoints(
    d: InteractionDataset, cfg: EvalConfig, trial_index: int, checkpoints: Sequence[int]
) -> dict[int, TrialResult]:
    """One holdout split, one training run, scored after each listed iteration count.

    Training is deterministic, so the model after ``n`` iterations of a longer
    run is the model a run of exactly ``n`` iterations would produce.
    """
    t0 = time.perf_counter()
    split = holdout_split(d, cfg.holdout_fraction, derive_seed(cfg.base_seed, trial_index))
    if not split.hidden:
        raise EvaluationError(
            f"holdout fraction {cfg.holdout_fraction} hides no pairs on this dataset"
        )
    investors = [i for i, _ in split.hidden]
    wanted = set(checkpoints)
    results: dict[int, TrialResult] = {}

    def score_model(model: FactorModel) -> TrialResult:
        recs = top_k_batch(model, investors, cfg.top_k, split.train)
        hits = tuple(c in rec.indices for (_, c), rec in zip(split.hidden, recs))
        return TrialResult(
            trial_index=trial_index,
            hidden_count=len(split.hidden),
            correct_count=sum(hits),
            final_train_loss=model.loss_trace[-1],
            wall_time=time.perf_counter() - t0,
            hidden=tuple(split.hidden),
            hits=hits,
        )

    def on_iteration(it: int, model: FactorModel) -> None:
        if it in wanted:
            results[it] = score_model(model)

    tcfg = replace(
        cfg.train,
        iterations=max(checkpoints),
        seed=derive_seed(cfg.base_seed, trial_index, INIT_STREAM),
    )
    model = train(split.train, tcfg, callback=on_iteration)
    # early convergence: longer runs would have stopped at the same model
    for n in wanted - results.keys():
        results[n] = score_model(model)
    return results


def run_trial(d: InteractionDataset, cfg: EvalConfig, trial_index: int) -> TrialResult:
    """Hide, retrain from scratch, and count hidden pairs recovered in the top k."""
    n = cfg.train.iterations
    return _run_trial_checkpoints(d, cfg, trial_index, [n])[n]


def evaluate_iterations(
    d: InteractionDataset, cfg: EvalConfig, iteration_counts: Sequence[int]
) -> dict[int, EvalSummary]:
    """:func:`evaluate` at several iteration counts, sharing one training run per trial."""
    counts = sorted(set(iteration_counts))
    if not counts or counts[0] < 1:
        raise ValueError("iteration counts must be >= 1")

    def one(t: int) -> dict[int, TrialResult]:
        try:
            return _run_trial_checkpoints(d, cfg, t, counts)
        except Exception as exc:
            raise EvaluationError(f"trial {t} failed: {exc}") from exc

    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            per_trial = list(pool.map(one, range(cfg.trials)))
    else:
        per_trial = [one(t) for t in range(cfg.trials)]
    return {n: EvalSummary([r[n] for r in per_trial]) for n in counts}


def evaluate(d: InteractionDataset, cfg: EvalConfig) -> EvalSummary:
    """Average hit@k accuracy over ``cfg.trials`` independent trials."""
    n = cfg.train.iterations
    return evaluate_iterations(d, cfg, [n])[n]


def sweep(
    d: InteractionDataset,
    factors: Sequence[int],
    iterations: Sequence[int],
    lambdas: Sequence[float],
    cfg: EvalConfig,
) -> list[SweepResult]:
    """Evaluate every grid point, factors outermost and lambda innermost.

    All points share ``cfg.base_seed`` so trial ``t`` hides the same pairs at
    every point.
    """
    if not (len(factors) and len(iterations) and len(lambdas)):
        raise ValueError("every grid axis needs at least one value")
    summaries: dict[tuple[int, float], dict[int, EvalSummary]] = {}
    for f, lam in itertools.product(factors, lambdas):
        if (f, lam) in summaries:
            continue
        point = replace(cfg, train=replace(cfg.train, factors=f, lam=lam))
        try:
            summaries[f, lam] = evaluate_iterations(d, point, iterations)
        except Exception as exc:
            raise EvaluationError(f"grid point factors={f} lambda={lam}: {exc}") from exc

    out = []
    for f, n_iter, lam in itertools.product(factors, iterations, lambdas):
        summary = summaries[f, lam][n_iter]
        _logger.info(
            "factors=%d iterations=%d lambda=%g: accuracy %.4f +- %.4f",
            f, n_iter, lam, summary.accuracy_mean, summary.accuracy_std,
        )
        out.append(SweepResult(
            f, n_iter, lam, len(summary.trials), summary.accuracy_mean, summary.accuracy_std,
            summary.loss_final_mean, summary.wall_time, summary,
        ))
    return out


def write_sweep_csv(results: Sequence[SweepResult], fh: io.TextIOBase, with_time: bool = False) -> None:
    """Plot-ready sweep table.

    ``wall_time_s`` is left empty unless ``with_time`` is set, which keeps
    reruns byte-identical.
    """
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(SWEEP_HEADER)
    for r in results:
        w.writerow(r.row(with_time))


def write_trials_csv(results: Sequence[SweepResult], fh: io.TextIOBase) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["factors", "iterations", "lambda", "trial", "hidden", "correct", "accuracy", "loss_final"])
    for r in results:
        if r.summary is None:
            continue
        for t in r.summary.trials:
            w.writerow([
                r.factors, r.iterations, repr(float(r.lam)), t.trial_index, t.hidden_count,
                t.correct_count, repr(t.accuracy), repr(t.final_train_loss),
            ])

