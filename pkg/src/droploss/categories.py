"""Category frequency statistics and rare/common/frequent binning."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np


class Bin(IntEnum):
    RARE = 0
    COMMON = 1
    FREQUENT = 2

    @property
    def label(self) -> str:
        return self.name.lower()


RARE_MAX = 10
COMMON_MAX = 100


def bin_of(count: int) -> Bin:
    """Bin a category by its occurrence count (0 counts as rare)."""
    if count < 0:
        raise ValueError(f"count must be nonnegative, got {count}")
    if count <= RARE_MAX:
        return Bin.RARE
    if count <= COMMON_MAX:
        return Bin.COMMON
    return Bin.FREQUENT


def tail_indicator(f, lam):
    """1 where ``f < lam`` (strict), else 0. Works on scalars and arrays."""
    out = np.asarray(f) < lam
    if out.ndim == 0:
        return int(out)
    return out.astype(np.int64)


@dataclass(frozen=True)
class CategoryTable:
    counts: np.ndarray
    frequencies: np.ndarray
    bins: np.ndarray
    lam: float
    unit: str = "instances"

    def __post_init__(self):
        for arr in (self.counts, self.frequencies, self.bins):
            arr.setflags(write=False)

    @property
    def num_categories(self) -> int:
        return len(self.counts)

    @property
    def tail(self) -> np.ndarray:
        """Boolean mask of categories with T_lambda(f) = 1."""
        return self.frequencies < self.lam

    def tail_mass(self) -> float:
        """Share of all occurrences that fall in tail categories."""
        return float(self.counts[self.tail].sum() / self.counts.sum())

    def bin_members(self, b: Bin) -> np.ndarray:
        return np.flatnonzero(self.bins == b)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category_id", "count"])
            for j, c in enumerate(self.counts):
                w.writerow([j, int(c)])


def bin_aligned_lambda(frequencies: np.ndarray, bins: np.ndarray) -> float:
    """Threshold strictly between the largest tail and smallest frequent frequency."""
    tail = bins != Bin.FREQUENT
    if not tail.any():
        # nothing in the tail: any lambda at or below the smallest frequency works
        return float(frequencies.min())
    hi_tail = frequencies[tail].max()
    if tail.all():
        return float(np.nextafter(hi_tail, np.inf)) if hi_tail < 1.0 else 1.0 + 1e-12
    lo_freq = frequencies[~tail].min()
    if not hi_tail < lo_freq:
        raise ValueError("tail and frequent frequencies overlap; cannot align lambda")
    return float((hi_tail + lo_freq) / 2.0)


def from_counts(counts, lam: float | None = None, unit: str = "instances") -> CategoryTable:
    """Build a table from per-category counts.

    ``lam=None`` selects the bin-aligned threshold, so the tail indicator picks out
    exactly the rare and common bins. Pass a float for an explicit threshold.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty 1-d sequence")
    if (counts < 0).any():
        raise ValueError("counts must be nonnegative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("counts are all zero; frequencies are undefined")
    freqs = counts / total
    bins = np.array([bin_of(int(c)) for c in counts], dtype=np.int64)
    if lam is None:
        lam = bin_aligned_lambda(freqs, bins)
    elif not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return CategoryTable(counts=counts, frequencies=freqs, bins=bins, lam=float(lam), unit=unit)


def load_counts_csv(path) -> np.ndarray:
    """Read a ``category_id,count`` CSV (header required) into a dense count vector."""
    rows = []
    with open(Path(path), newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:2]] != ["category_id", "count"]:
            raise ValueError(f"{path}: expected header 'category_id,count'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad row {row!r}") from exc
    if not rows:
        raise ValueError(f"{path}: no categories")
    ids = [r[0] for r in rows]
    if sorted(ids) != list(range(len(ids))):
        raise ValueError(f"{path}: category ids must be 0..C-1 without gaps")
    counts = np.zeros(len(ids), dtype=np.int64)
    for j, c in rows:
        counts[j] = c
    return counts
