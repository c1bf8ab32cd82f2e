"""Binary investor/company interaction data.

The interaction matrix has one entry per (company, investor) pair that is 1
when the investor put money into the company and 0 otherwise.  Only the ones
are stored, row-indexed by investor with sorted company lists (CSR layout).
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "DatasetError",
    "EmptyDatasetError",
    "ParseError",
    "NoEligibleInvestorsError",
    "InteractionRecord",
    "InteractionDataset",
    "HoldoutSplit",
    "ingest",
    "read_csv",
    "write_csv",
    "transpose",
    "holdout_split",
]


class DatasetError(ValueError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class ParseError(DatasetError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NoEligibleInvestorsError(DatasetError):
    pass


@dataclass(frozen=True)
class InteractionRecord:
    investor_id: str
    company_id: str
    line: int | None = None

    def __post_init__(self):
        if not self.investor_id or not self.company_id:
            raise ParseError(
                f"empty token in record ({self.investor_id!r}, {self.company_id!r})",
                self.line,
            )


class InteractionDataset:
    """Deduplicated binary bipartite interactions with interned string IDs.

    Parameters
    ----------
    company_ids, investor_ids
        ID tables; position in the table is the dense index.
    indptr, indices
        CSR arrays over investors.  ``indices[indptr[i]:indptr[i + 1]]`` are
        the companies investor ``i`` invested in, strictly increasing.

    Instances are treated as immutable; all derived views are cached.
    """

    def __init__(
        self,
        company_ids: Sequence[str],
        investor_ids: Sequence[str],
        indptr: np.ndarray,
        indices: np.ndarray,
        *,
        validate: bool = True,
    ):
        self.company_ids = tuple(company_ids)
        self.investor_ids = tuple(investor_ids)
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.indptr.setflags(write=False)
        self.indices.setflags(write=False)
        if validate:
            self._validate()

    def _validate(self) -> None:
        C, I = self.n_companies, self.n_investors
        if len(set(self.company_ids)) != C or len(set(self.investor_ids)) != I:
            raise DatasetError("ID tables must not contain duplicates")
        if self.indptr.shape != (I + 1,) or self.indptr[0] != 0:
            raise DatasetError("indptr must have length n_investors + 1 and start at 0")
        if np.any(np.diff(self.indptr) < 0) or self.indptr[-1] != len(self.indices):
            raise DatasetError("indptr must be non-decreasing and end at nnz")
        if len(self.indices) and (self.indices.min() < 0 or self.indices.max() >= C):
            raise DatasetError("company index out of range")
        # strictly increasing within each row <=> every step inside a row is positive
        steps = np.diff(self.indices)
        row_start = np.zeros(len(self.indices), dtype=bool)
        row_start[self.indptr[:-1][np.diff(self.indptr) > 0]] = True
        if np.any(steps[~row_start[1:]] <= 0):
            raise DatasetError("per-investor company lists must be strictly increasing")

    @property
    def n_companies(self) -> int:
        return len(self.company_ids)

    @property
    def n_investors(self) -> int:
        return len(self.investor_ids)

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def __len__(self) -> int:
        return self.nnz

    def __repr__(self) -> str:
        return (
            f"InteractionDataset(companies={self.n_companies}, "
            f"investors={self.n_investors}, pairs={self.nnz})"
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InteractionDataset):
            return NotImplemented
        return (
            self.company_ids == other.company_ids
            and self.investor_ids == other.investor_ids
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
        )

    __hash__ = None  # type: ignore[assignment]

    @cached_property
    def company_index(self) -> dict[str, int]:
        return {cid: k for k, cid in enumerate(self.company_ids)}

    @cached_property
    def investor_index(self) -> dict[str, int]:
        return {iid: k for k, iid in enumerate(self.investor_ids)}

    def companies_of(self, investor: int) -> np.ndarray:
        return self.indices[self.indptr[investor] : self.indptr[investor + 1]]

    def investors_of(self, company: int) -> np.ndarray:
        m = self.by_company
        return m.indices[m.indptr[company] : m.indptr[company + 1]]

    @cached_property
    def investor_degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    @cached_property
    def company_degrees(self) -> np.ndarray:
        return np.bincount(self.indices, minlength=self.n_companies)

    @cached_property
    def by_investor(self) -> sp.csr_matrix:
        """I x C binary matrix (rows are investors)."""
        data = np.ones(self.nnz, dtype=np.float64)
        m = sp.csr_matrix(
            (data, self.indices, self.indptr),
            shape=(self.n_investors, self.n_companies),
        )
        m.has_sorted_indices = True
        return m

    @cached_property
    def by_company(self) -> sp.csr_matrix:
        """C x I binary matrix (rows are companies), i.e. M itself."""
        m = self.by_investor.T.tocsr()
        m.sort_indices()
        return m

    def pairs(self) -> Iterator[tuple[int, int]]:
        """Yield ``(company, investor)`` index pairs, investor-major."""
        for i in range(self.n_investors):
            for c in self.companies_of(i):
                yield int(c), i

    def pair_set(self) -> set[tuple[int, int]]:
        return set(self.pairs())

    def pair_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """``(companies, investors)`` arrays of the observed pairs."""
        investors = np.repeat(np.arange(self.n_investors), self.investor_degrees)
        return self.indices.copy(), investors

    def contains(self, company: int, investor: int) -> bool:
        row = self.companies_of(investor)
        k = np.searchsorted(row, company)
        return bool(k < len(row) and row[k] == company)

    def dense(self) -> np.ndarray:
        """Dense C x I matrix; only for small instances."""
        return self.by_company.toarray()

    def records(self) -> Iterator[InteractionRecord]:
        for c, i in self.pairs():
            yield InteractionRecord(self.investor_ids[i], self.company_ids[c])

    def without(self, hidden: Iterable[tuple[int, int]]) -> "InteractionDataset":
        """Copy with the given ``(investor, company)`` pairs removed; ID tables are kept."""
        drop = np.zeros(self.nnz, dtype=bool)
        for i, c in hidden:
            start = self.indptr[i]
            row = self.companies_of(i)
            k = int(np.searchsorted(row, c))
            if k >= len(row) or row[k] != c:
                raise DatasetError(f"pair (investor={i}, company={c}) is not observed")
            drop[start + k] = True
        keep = ~drop
        _, rows = self.pair_arrays()
        kept_deg = np.bincount(rows[keep], minlength=self.n_investors)
        indptr = np.concatenate([[0], np.cumsum(kept_deg)])
        return InteractionDataset(
            self.company_ids, self.investor_ids, indptr, self.indices[keep], validate=False
        )


def ingest(records: Iterable[InteractionRecord | tuple[str, str]]) -> InteractionDataset:
    """Build a dataset from ``(investor_id, company_id)`` records.

    Duplicate pairs collapse to a single interaction.  Indices are assigned in
    first-appearance order.
    """
    company_index: dict[str, int] = {}
    investor_index: dict[str, int] = {}
    rows: list[set[int]] = []
    n_records = 0
    for rec in records:
        if not isinstance(rec, InteractionRecord):
            rec = InteractionRecord(*rec)
        n_records += 1
        i = investor_index.setdefault(rec.investor_id, len(investor_index))
        c = company_index.setdefault(rec.company_id, len(company_index))
        if i == len(rows):
            rows.append(set())
        rows[i].add(c)
    if n_records == 0:
        raise EmptyDatasetError("no interaction records")

    degrees = np.fromiter((len(r) for r in rows), dtype=np.int64, count=len(rows))
    indptr = np.concatenate([[0], np.cumsum(degrees)])
    indices = np.empty(int(indptr[-1]), dtype=np.int64)
    for i, row in enumerate(rows):
        indices[indptr[i] : indptr[i + 1]] = sorted(row)
    return InteractionDataset(
        list(company_index), list(investor_index), indptr, indices, validate=False
    )


def _iter_csv_records(handle: io.TextIOBase) -> Iterator[InteractionRecord]:
    reader = csv.reader(handle)
    try:
        header = next(reader)
    except StopIteration:
        raise EmptyDatasetError("input is empty (missing header)") from None
    header = [h.strip() for h in header]
    if header[:2] != ["investor_id", "company_id"] or len(header) > 3:
        raise ParseError(
            "expected header 'investor_id,company_id[,count]', got " + ",".join(header), 1
        )
    has_count = len(header) == 3
    for row in reader:
        line = reader.line_num
        if not row or all(not f.strip() for f in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", line)
        if has_count:
            try:
                int(row[2])
            except ValueError:
                raise ParseError(f"count {row[2]!r} is not an integer", line) from None
        yield InteractionRecord(row[0].strip(), row[1].strip(), line)


def read_csv(source: str | Path | io.TextIOBase) -> InteractionDataset:
    """Read ``investor_id,company_id[,count]`` CSV; the count column is ignored."""
    if isinstance(source, (str, Path)):
        with open(source, newline="", encoding="utf-8") as fh:
            return ingest(_iter_csv_records(fh))
    return ingest(_iter_csv_records(source))


def _record_order(d: InteractionDataset) -> list[tuple[int, int]]:
    """Pair order under which re-ingesting reproduces the same indices.

    Companies and investors are introduced in index order, each by its pair
    with the lowest-indexed partner; the other pairs follow investor-major.
    Falls back to plain investor-major order for datasets with no such order.
    """
    C, I = d.n_companies, d.n_investors
    first_company = np.array([row[0] if len(row) else C for row in map(d.companies_of, range(I))])
    first_investor = np.array(
        [d.investors_of(c)[0] if d.company_degrees[c] else I for c in range(C)]
    )
    intro: list[tuple[int, int]] = []
    next_c = next_i = 0
    while next_c < C or next_i < I:
        if next_c < C and first_investor[next_c] <= min(next_i, I - 1):
            pair = (next_c, int(first_investor[next_c]))
        elif next_i < I and first_company[next_i] <= min(next_c, C - 1):
            pair = (int(first_company[next_i]), next_i)
        else:
            return list(d.pairs())
        intro.append(pair)
        next_c = max(next_c, pair[0] + 1)
        next_i = max(next_i, pair[1] + 1)
    seen = set(intro)
    return intro + [p for p in d.pairs() if p not in seen]


def write_csv(d: InteractionDataset, dest: str | Path | io.TextIOBase) -> None:
    """Write ``investor_id,company_id`` lines that re-ingest to the same dataset."""

    def _write(fh):
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["investor_id", "company_id"])
        for c, i in _record_order(d):
            w.writerow([d.investor_ids[i], d.company_ids[c]])

    if isinstance(dest, (str, Path)):
        with open(dest, "w", newline="", encoding="utf-8") as fh:
            _write(fh)
    else:
        _write(dest)


def transpose(d: InteractionDataset) -> InteractionDataset:
    """Swap the roles of companies and investors."""
    m = d.by_company
    return InteractionDataset(d.investor_ids, d.company_ids, m.indptr, m.indices, validate=False)


@dataclass(frozen=True)
class HoldoutSplit:
    train: InteractionDataset
    hidden: list[tuple[int, int]]  # (investor, company), sorted by investor


def eligible_investors(d: InteractionDataset, min_degree: int = 2) -> np.ndarray:
    return np.flatnonzero(d.investor_degrees >= min_degree)


def holdout_count(fraction: float, n_eligible: int) -> int:
    # round half up
    return int(math.floor(fraction * n_eligible + 0.5))


def holdout_split(d: InteractionDataset, fraction: float, seed: int) -> HoldoutSplit:
    """Hide one random interaction from a random sample of investors.

    Investors are eligible when they have at least two (deduplicated)
    interactions; ``round(fraction * n_eligible)`` of them are drawn without
    replacement and each loses one interaction chosen uniformly.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    eligible = eligible_investors(d)
    if len(eligible) == 0:
        raise NoEligibleInvestorsError(
            "no investor has two or more interactions; nothing can be held out"
        )
    rng = np.random.default_rng(seed)
    n = holdout_count(fraction, len(eligible))
    chosen = np.sort(rng.choice(eligible, size=n, replace=False))
    hidden = []
    for i in chosen:
        row = d.companies_of(int(i))
        hidden.append((int(i), int(row[rng.integers(len(row))])))
    return HoldoutSplit(d.without(hidden), hidden)
