"""Investor/company recommendation by alternating least squares with CG row solves."""
from .dataset import (
    HoldoutSplit,
    InteractionDataset,
    InteractionRecord,
    holdout_split,
    ingest,
    read_csv,
    transpose,
    write_csv,
)
from .evaluation import EvalConfig, EvalSummary, SweepResult, TrialResult, evaluate, run_trial, sweep
from .factorization import FactorModel, TrainConfig, half_update, init_factors, load_model, save_model, train
from .linalg import NumericalError, SpdSystem, cg_solve, gram, loss
from .recommend import RecommendationList, score, top_k, top_k_batch, top_k_transposed

__version__ = "0.1.0"
