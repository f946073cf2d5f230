"""Gradient-origin accounting, background score profiles, drop audits, Pareto fronts."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .categories import Bin, CategoryTable

ORIGINS = ("encouraging", "bg_discouraging", "fg_discouraging")


class GradientLedger:
    """Per-category sums of |dLoss/dlogit|, split by where the gradient came from.

    Every (row, category) cell lands in exactly one accumulator: the label cell of a
    foreground row is encouraging, any cell of a background row is discouraging
    from background, and the other cells of a foreground row are discouraging from
    an incorrect foreground.
    """

    def __init__(self, num_categories: int):
        self.sums = np.zeros((3, num_categories))
        self.batches = 0

    @property
    def encouraging(self):
        return self.sums[0]

    @property
    def bg_discouraging(self):
        return self.sums[1]

    @property
    def fg_discouraging(self):
        return self.sums[2]

    def copy(self) -> "GradientLedger":
        out = GradientLedger(self.sums.shape[1])
        out.sums = self.sums.copy()
        out.batches = self.batches
        return out

    def account(self, labels, grad) -> np.ndarray:
        """Add one batch; returns the 3 x C delta that was added."""
        delta = origin_sums(labels, grad)
        self.sums += delta
        self.batches += 1
        return delta

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["category", *ORIGINS])
            for j in range(self.sums.shape[1]):
                w.writerow([j, *(repr(float(v)) for v in self.sums[:, j])])

    @classmethod
    def from_csv(cls, path) -> "GradientLedger":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        out = cls(len(rows))
        for r in rows:
            j = int(r["category"])
            out.sums[:, j] = [float(r[k]) for k in ORIGINS]
        return out


def origin_masks(labels, num_categories: int):
    labels = np.asarray(labels)
    fg = labels >= 0
    enc = np.zeros((len(labels), num_categories), dtype=bool)
    enc[np.flatnonzero(fg), labels[fg]] = True
    bg = np.broadcast_to(~fg[:, None], enc.shape)
    wrong = ~enc & ~bg
    return enc, bg, wrong


def origin_sums(labels, grad) -> np.ndarray:
    """3 x C matrix of |grad| summed per origin (encouraging, background, incorrect fg)."""
    mag = np.abs(np.asarray(grad))
    labels = np.asarray(labels)
    fg = labels >= 0
    c = mag.shape[1]
    mag_fg = mag[fg]
    cols = labels[fg]
    rows = np.arange(len(cols))
    out = np.empty((3, c))
    out[0] = np.bincount(cols, weights=mag_fg[rows, cols], minlength=c)
    out[1] = mag[~fg].sum(axis=0)
    wrong = mag_fg.copy()
    wrong[rows, cols] = 0.0
    out[2] = wrong.sum(axis=0)
    return out


def account_gradients(labels, grad, ledger: GradientLedger) -> GradientLedger:
    ledger.account(labels, grad)
    return ledger


def bg_origin_fraction(ledger: GradientLedger) -> np.ndarray:
    """bg / (bg + incorrect-fg) discouraging share per category; NaN where both are 0."""
    bg, wrong = ledger.bg_discouraging, ledger.fg_discouraging
    total = bg + wrong
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, bg / np.where(total > 0, total, 1.0), np.nan)


def median_by_bin(values: np.ndarray, table: CategoryTable) -> dict[str, float]:
    out = {}
    for b in Bin:
        v = values[table.bins == b]
        v = v[~np.isnan(v)]
        out[b.label] = float(np.median(v)) if v.size else float("nan")
    return out


def mean_by_bin(values: np.ndarray, table: CategoryTable) -> dict[str, float]:
    out = {}
    for b in Bin:
        v = values[table.bins == b]
        out[b.label] = float(v.mean()) if v.size else float("nan")
    return out


def bg_score_profile(params, background_features, softmax: bool = False) -> np.ndarray:
    """Mean foreground score of every category over background samples."""
    from .metrics import scores_of
    from .model import forward

    bg = np.asarray(background_features)
    if len(bg) < 1000:
        raise ValueError(f"need at least 1000 background samples for stable means, got {len(bg)}")
    return scores_of(forward(params, bg), softmax).mean(axis=0)


def frequency_rank(table: CategoryTable) -> np.ndarray:
    """Rank 0 for the most frequent category; ties keep category order."""
    order = np.argsort(-table.counts, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank


def write_grad_origin(path, ledger: GradientLedger, table: CategoryTable) -> None:
    frac = bg_origin_fraction(ledger)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "bin", "bg_fraction"])
        for j in range(table.num_categories):
            # undefined fractions are omitted rather than written as NaN
            value = "" if np.isnan(frac[j]) else repr(float(frac[j]))
            w.writerow([j, Bin(table.bins[j]).label, value])


def write_bg_scores(path, early: np.ndarray, late: np.ndarray, table: CategoryTable) -> None:
    rank = frequency_rank(table)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["category", "freq_rank", "early_mean", "late_mean"])
        for j in np.argsort(rank, kind="stable"):
            w.writerow([int(j), int(rank[j]), repr(float(early[j])), repr(float(late[j]))])


# -- drop-rate audit ---------------------------------------------------------

@dataclass
class DropAudit:
    bin: str
    cells: int
    kept: int
    empirical: float
    expected: float
    flagged: bool

    @property
    def deviation(self) -> float:
        return abs(self.empirical - self.expected)


AUDIT_TOLERANCE = 0.02
AUDIT_MIN_CELLS = 10_000


def drop_rate_audit(trainlog) -> list[DropAudit]:
    """Per-bin realized keep rate of background cells against the Bernoulli rate used.

    The expected rate is the cell-weighted mean of the keep probability each cell
    was drawn with.
    """
    d = trainlog.drops
    if not d["mu_tail"]:
        return []
    out = []
    for name in ("rare", "common", "freq"):
        total = float(np.sum(d[f"{name}_cells"]))
        if total == 0:
            continue
        kept = int(np.sum(d[f"{name}_kept"]))
        emp = kept / total
        exp = float(np.sum(d[f"{name}_expected"]) / total)
        flagged = total >= AUDIT_MIN_CELLS and abs(emp - exp) > AUDIT_TOLERANCE
        out.append(DropAudit(name, int(total), kept, emp, exp, bool(flagged)))
    return out


def tail_keep_by_presence(trainlog) -> tuple[float, float]:
    """Mean realized tail keep rate for batches with and without rare foreground."""
    d = trainlog.drops
    cells = np.asarray(d["rare_cells"]) + np.asarray(d["common_cells"])
    kept = np.asarray(d["rare_kept"]) + np.asarray(d["common_kept"])
    rate = kept / np.maximum(cells, 1)
    has_rare = np.asarray(d["n_rare"]) > 0
    with_rare = float(rate[has_rare].mean()) if has_rare.any() else float("nan")
    without = float(rate[~has_rare].mean()) if (~has_rare).any() else float("nan")
    return with_rare, without


def write_drop_audit(path, audits: list[DropAudit]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "cells", "kept", "empirical", "expected", "deviation", "flagged"])
        for a in audits:
            w.writerow([a.bin, a.cells, a.kept, repr(a.empirical), repr(a.expected),
                        repr(a.deviation), int(a.flagged)])


# -- Pareto ------------------------------------------------------------------

@dataclass
class ParetoPoint:
    family: str
    param: float | None
    tail: float
    head: float
    overall: float
    seed_count: int = 1
    status: str = "ok"
    tail_spread: float = 0.0
    head_spread: float = 0.0

    @property
    def label(self) -> str:
        return self.family if self.param is None else f"{self.family}({self.param:g})"


def dominates(a, b) -> bool:
    """True if ``a`` is at least as good as ``b`` in both objectives and better in one."""
    return a[0] >= b[0] and a[1] >= b[1] and (a[0] > b[0] or a[1] > b[1])


def pareto_front(points):
    """Points not dominated in (tail, head); equal points are all kept.

    Accepts ParetoPoint objects or (tail, head) pairs. Sort by tail descending, then
    sweep keeping the running best head.
    """
    pts = list(points)
    if not pts:
        return []
    xy = np.array([(p.tail, p.head) if isinstance(p, ParetoPoint) else tuple(p) for p in pts], dtype=float)
    order = np.lexsort((-xy[:, 1], -xy[:, 0]))
    keep = np.zeros(len(pts), dtype=bool)
    best_head = -np.inf
    i = 0
    while i < len(order):
        # group exact tail ties; within a group only the top head can survive
        j = i
        while j < len(order) and xy[order[j], 0] == xy[order[i], 0]:
            j += 1
        group = order[i:j]
        top = xy[group[0], 1]
        if top > best_head:
            for k in group:
                if xy[k, 1] == top:
                    keep[k] = True
            best_head = top
        i = j
    return [p for p, k in zip(pts, keep) if k]


def on_front_flags(points) -> list[bool]:
    front = pareto_front(points)
    ids = {id(p) for p in front}
    return [id(p) in ids for p in points]


def write_pareto(path, points: list[ParetoPoint]) -> None:
    ok = [p for p in points if not p.status.startswith("failed")]
    front_ids = {id(p) for p in pareto_front(ok)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["family", "param", "seed_count", "tail", "head", "overall", "on_front", "status"])
        for p in points:
            param = "" if p.param is None else repr(float(p.param))
            w.writerow([p.family, param, p.seed_count, repr(p.tail), repr(p.head), repr(p.overall),
                        int(id(p) in front_ids), p.status])


def pareto_sweep(base_config, family: str, grid, seeds, jobs: int = 1) -> list[ParetoPoint]:
    """Train one model per (grid value, seed) and reduce each grid value to median metrics."""
    from .experiment import sweep_points

    return sweep_points(base_config, family, grid, seeds, jobs=jobs)
