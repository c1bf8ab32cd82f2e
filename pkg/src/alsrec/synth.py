"""Planted block-model interaction data for desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .dataset import InteractionDataset, InteractionRecord, ingest

__all__ = ["block_labels", "planted_blocks", "planted_block_records", "expected_pair_count"]


def block_labels(n: int, blocks: int) -> np.ndarray:
    """Contiguous, near-equal block assignment of ``n`` entities."""
    return np.repeat(np.arange(blocks), [len(a) for a in np.array_split(np.arange(n), blocks)])


def _probabilities(investors, companies, blocks, density, noise):
    if blocks < 1 or blocks > min(investors, companies):
        raise ValueError(f"blocks must be in [1, min(investors, companies)], got {blocks}")
    for name, p in (("density", density), ("noise", noise)):
        if not 0 <= p <= 1:
            raise ValueError(f"{name} must be a probability, got {p}")
    same = block_labels(investors, blocks)[:, None] == block_labels(companies, blocks)[None, :]
    return np.where(same, density, noise)


def planted_block_records(
    investors: int, companies: int, blocks: int, density: float, noise: float, seed: int
) -> list[InteractionRecord]:
    """Each within-block pair is present with probability ``density``, each
    cross-block pair with probability ``noise``.  Records are investor-major."""
    probs = _probabilities(investors, companies, blocks, density, noise)
    rng = np.random.default_rng(seed)
    present = rng.random(probs.shape) < probs
    width_i, width_c = len(str(investors - 1)), len(str(companies - 1))
    return [
        InteractionRecord(f"inv{i:0{width_i}d}", f"co{c:0{width_c}d}")
        for i, c in zip(*np.nonzero(present))
    ]


def planted_blocks(
    investors: int, companies: int, blocks: int, density: float, noise: float, seed: int
) -> InteractionDataset:
    return ingest(planted_block_records(investors, companies, blocks, density, noise, seed))


def expected_pair_count(
    investors: int, companies: int, blocks: int, density: float, noise: float
) -> tuple[float, float]:
    """Mean and standard deviation of the number of generated pairs."""
    probs = _probabilities(investors, companies, blocks, density, noise)
    return float(probs.sum()), float(np.sqrt(np.sum(probs * (1 - probs))))
