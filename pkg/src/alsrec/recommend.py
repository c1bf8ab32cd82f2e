"""Masked top-k recommendation from a trained factor model."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .dataset import InteractionDataset
from .factorization import FactorModel

__all__ = [
    "DEFAULT_TOP_K",
    "RecommendedItem",
    "RecommendationList",
    "score",
    "select_top_k",
    "top_k",
    "top_k_transposed",
    "top_k_batch",
    "write_jsonl",
    "write_csv",
]

DEFAULT_TOP_K = 10

# Entities scored per matrix product in top_k_batch.
SCORE_BLOCK_ROWS = 256


@dataclass(frozen=True)
class RecommendedItem:
    index: int
    id: str
    score: float
    rank: int


@dataclass(frozen=True)
class RecommendationList:
    entity: int
    entity_id: str
    items: list[RecommendedItem] = field(default_factory=list)

    @property
    def indices(self) -> list[int]:
        return [it.index for it in self.items]

    def to_json(self) -> dict:
        return {
            "entity": self.entity_id,
            "items": [{"id": it.id, "score": it.score, "rank": it.rank} for it in self.items],
        }


def _check_index(k: int, n: int, what: str) -> None:
    if not 0 <= k < n:
        raise IndexError(f"{what} index {k} out of range [0, {n})")


def score(model: FactorModel, company: int, investor: int) -> float:
    """Predicted strength of ``investor`` -> ``company``, i.e. ``x_c . y_i``."""
    _check_index(company, model.n_companies, "company")
    _check_index(investor, model.n_investors, "investor")
    return float(model.X[company] @ model.Y[investor])


def select_top_k(scores: np.ndarray, observed: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` best unobserved items, best first.

    Ties go to the lower index.  Uses a linear-time partition to find the
    k-th best score and only sorts the survivors.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    mask = np.ones(len(scores), dtype=bool)
    mask[observed] = False
    cand = np.flatnonzero(mask)
    cs = scores[cand]
    if k < len(cand):
        threshold = -np.partition(-cs, k - 1)[k - 1]
        above = cand[cs > threshold]
        ties = cand[cs == threshold][: k - len(above)]
        cand = np.concatenate([above, ties])
        cs = scores[cand]
    order = np.lexsort((cand, -cs))
    return cand[order]


def _build_list(entity, entity_id, idx, scores, item_ids) -> RecommendationList:
    items = [
        RecommendedItem(int(j), item_ids[j] if item_ids else str(int(j)), float(scores[j]), r)
        for r, j in enumerate(idx, start=1)
    ]
    return RecommendationList(entity, entity_id, items)


def _check_mask(model: FactorModel, mask: InteractionDataset) -> None:
    if (mask.n_companies, mask.n_investors) != (model.n_companies, model.n_investors):
        raise ValueError(
            f"mask is {mask.n_companies} x {mask.n_investors}, "
            f"model is {model.n_companies} x {model.n_investors}"
        )


def top_k(
    model: FactorModel, investor: int, k: int = DEFAULT_TOP_K, mask: InteractionDataset | None = None
) -> RecommendationList:
    """Best ``k`` companies for ``investor`` among those it has not invested in.

    ``mask`` is the training dataset; its observed pairs are never recommended.
    """
    _check_index(investor, model.n_investors, "investor")
    observed = np.empty(0, dtype=np.int64)
    if mask is not None:
        _check_mask(model, mask)
        observed = mask.companies_of(investor)
    scores = model.X @ model.Y[investor]
    idx = select_top_k(scores, observed, k)
    entity_id = model.investor_ids[investor] if model.investor_ids else str(investor)
    return _build_list(investor, entity_id, idx, scores, model.company_ids)


def top_k_transposed(
    model: FactorModel, company: int, k: int = DEFAULT_TOP_K, mask: InteractionDataset | None = None
) -> RecommendationList:
    """Best ``k`` investors for ``company`` from a model trained on the transposed data.

    In such a model the row entities of ``Y`` are companies and the items
    scored against them are investors; ``mask`` is the transposed training set.
    """
    return top_k(model, company, k, mask)


def top_k_batch(
    model: FactorModel,
    entities: Sequence[int] | None = None,
    k: int = DEFAULT_TOP_K,
    mask: InteractionDataset | None = None,
) -> list[RecommendationList]:
    """:func:`top_k` for many entities, scoring them in blocks."""
    if entities is None:
        entities = range(model.n_investors)
    entities = [int(e) for e in entities]
    for e in entities:
        _check_index(e, model.n_investors, "investor")
    if mask is not None:
        _check_mask(model, mask)
    out = []
    empty = np.empty(0, dtype=np.int64)
    for s in range(0, len(entities), SCORE_BLOCK_ROWS):
        block = entities[s : s + SCORE_BLOCK_ROWS]
        S = model.Y[block] @ model.X.T
        for row, e in zip(S, block):
            observed = mask.companies_of(e) if mask is not None else empty
            idx = select_top_k(row, observed, k)
            entity_id = model.investor_ids[e] if model.investor_ids else str(e)
            out.append(_build_list(e, entity_id, idx, row, model.company_ids))
    return out


def write_jsonl(lists: Iterable[RecommendationList], fh: io.TextIOBase) -> None:
    for rec in lists:
        fh.write(json.dumps(rec.to_json()) + "\n")


def write_csv(lists: Iterable[RecommendationList], fh: io.TextIOBase) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["entity_id", "item_id", "score", "rank"])
    for rec in lists:
        for it in rec.items:
            w.writerow([rec.entity_id, it.id, repr(it.score), it.rank])
