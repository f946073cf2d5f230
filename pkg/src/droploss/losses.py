"""Weighted sigmoid cross-entropy family and a softmax baseline.

Every sigmoid-based loss here is ``mean_rows( -sum_j w_j log p_hat_j )`` and the
rules only differ in how the weight matrix ``w`` is filled:

* bce        all ones
* eql        foreground rows: 0 on tail categories that are not the label
* beql       eql on foreground rows; background rows are down-weighted on tail
             categories while their score is low (log base ``b``)
* droploss   eql on foreground rows; background tail/frequent cells are kept
             with a Bernoulli draw whose rate is the batch occurrence ratio
* fixed_drop like droploss but with a constant keep probability on tail cells

Weights are treated as constants when differentiating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .categories import Bin, CategoryTable

BACKGROUND = -1
EPS = 1e-12

RULES = ("bce", "eql", "beql", "droploss", "fixed_drop", "softmax")


@dataclass
class LogitsBatch:
    logits: np.ndarray
    labels: np.ndarray  # category index, or BACKGROUND

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.logits.ndim != 2:
            raise ValueError("logits must be an N x C matrix")
        if self.labels.shape != (self.logits.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.logits.shape[0]} rows"
            )

    @property
    def fg_flag(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def num_categories(self) -> int:
        return self.logits.shape[1]

    def targets(self, num_categories: int | None = None) -> np.ndarray:
        c = self.num_categories if num_categories is None else num_categories
        y = np.zeros((len(self.labels), c))
        fg = self.fg_flag
        y[np.flatnonzero(fg), self.labels[fg]] = 1.0
        return y


@dataclass(frozen=True)
class MuPair:
    mu_tail: float
    mu_freq: float


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def weighted_bce(batch: LogitsBatch, weights: np.ndarray):
    """Row-mean weighted sigmoid cross-entropy and its gradient w.r.t. logits."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != batch.logits.shape:
        raise ValueError(f"weights shape {w.shape} != logits shape {batch.logits.shape}")
    n = batch.logits.shape[0]
    y = batch.targets()
    p = sigmoid(batch.logits)
    p_hat = np.where(y == 1.0, p, 1.0 - p)
    loss = float(-(w * np.log(np.maximum(p_hat, EPS))).sum() / n)
    grad = w * (p - y) / n
    return loss, grad


def eql_weights(batch: LogitsBatch, table: CategoryTable) -> np.ndarray:
    n, c = batch.logits.shape
    if c != table.num_categories:
        raise ValueError(f"batch has {c} categories, table has {table.num_categories}")
    e = batch.fg_flag.astype(np.float64)[:, None]
    t = table.tail.astype(np.float64)[None, :]
    return 1.0 - e * t * (1.0 - batch.targets())


def beql_weights(batch: LogitsBatch, table: CategoryTable, base: float) -> np.ndarray:
    if not base > 1.0:
        raise ValueError(f"log base must be > 1, got {base}")
    w = eql_weights(batch, table)
    bg = ~batch.fg_flag
    p = np.clip(sigmoid(batch.logits[bg]), EPS, 1.0 - EPS)
    damp = np.minimum(-np.log(p) / np.log(base), 1.0)
    w[bg] = 1.0 - table.tail.astype(np.float64)[None, :] * damp
    return w


def occurrence_counts(labels: np.ndarray, table: CategoryTable) -> tuple[int, int, int]:
    """Foreground occurrences per bin (rare, common, frequent) in a batch."""
    fg = labels[labels >= 0]
    b = table.bins[fg]
    return (int((b == Bin.RARE).sum()), int((b == Bin.COMMON).sum()), int((b == Bin.FREQUENT).sum()))


def droploss_mu(n_rare: int, n_common: int, n_frequent: int, table: CategoryTable | None = None) -> MuPair:
    """Batch keep probabilities for background cells of tail / frequent categories.

    With no foreground in the batch, falls back to the dataset-wide tail share.
    """
    if min(n_rare, n_common, n_frequent) < 0:
        raise ValueError("occurrence counts must be nonnegative")
    n_all = n_rare + n_common + n_frequent
    if n_all > 0:
        return MuPair((n_rare + n_common) / n_all, n_frequent / n_all)
    if table is None:
        raise ValueError("empty foreground needs a CategoryTable for the fallback ratio")
    tail = table.tail_mass()
    return MuPair(tail, 1.0 - tail)


def _bernoulli_background(batch, table, keep_tail, keep_freq, rng) -> np.ndarray:
    w = eql_weights(batch, table)
    bg = np.flatnonzero(~batch.fg_flag)
    keep = np.where(table.tail, keep_tail, keep_freq)
    # draw for every background cell so the stream advances identically across rules
    u = rng.random((len(bg), table.num_categories))
    w[bg] = (u < keep[None, :]).astype(np.float64)
    return w


def droploss_weights(batch: LogitsBatch, table: CategoryTable, mu: MuPair, rng) -> np.ndarray:
    return _bernoulli_background(batch, table, mu.mu_tail, mu.mu_freq, rng)


def fixed_drop_weights(batch: LogitsBatch, table: CategoryTable, keep_prob: float, rng) -> np.ndarray:
    if not 0.0 <= keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in [0, 1], got {keep_prob}")
    return _bernoulli_background(batch, table, keep_prob, 1.0, rng)


def softmax_ce(batch: LogitsBatch, num_categories: int | None = None):
    """Softmax cross-entropy over C foreground classes plus a trailing background class."""
    n, width = batch.logits.shape
    c = width - 1 if num_categories is None else num_categories
    if width != c + 1:
        raise ValueError(f"softmax logits need width C+1={c + 1}, got {width}")
    if (batch.labels >= c).any():
        raise ValueError("label out of range")
    target = np.where(batch.fg_flag, batch.labels, c)
    z = batch.logits - batch.logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logz
    rows = np.arange(n)
    loss = float(-logp[rows, target].sum() / n)
    grad = np.exp(logp)
    grad[rows, target] -= 1.0
    return loss, grad / n


class WeightRule:
    """Loss selection plus hyperparameters; produces per-batch weight matrices.

    ``weights`` returns the matrix and a small dict of batch statistics used by the
    drop-rate audit (empty for deterministic rules).
    """

    def __init__(self, name: str, base: float = 4.0, keep_prob: float = 0.5):
        if name not in RULES:
            raise ValueError(f"unknown loss rule {name!r}; expected one of {RULES}")
        if name == "beql" and not base > 1.0:
            raise ValueError(f"log base must be > 1, got {base}")
        if name == "fixed_drop" and not 0.0 <= keep_prob <= 1.0:
            raise ValueError(f"keep_prob must lie in [0, 1], got {keep_prob}")
        self.name = name
        self.base = float(base)
        self.keep_prob = float(keep_prob)

    @property
    def is_softmax(self) -> bool:
        return self.name == "softmax"

    @property
    def stochastic(self) -> bool:
        return self.name in ("droploss", "fixed_drop")

    def describe(self) -> str:
        if self.name == "beql":
            return f"beql(b={self.base:g})"
        if self.name == "fixed_drop":
            return f"fixed_drop(keep={self.keep_prob:g})"
        return self.name

    def weights(self, batch: LogitsBatch, table: CategoryTable, rng):
        if self.name == "bce":
            return np.ones_like(batch.logits), {}
        if self.name == "eql":
            return eql_weights(batch, table), {}
        if self.name == "beql":
            return beql_weights(batch, table, self.base), {}
        counts = occurrence_counts(batch.labels, table)
        if self.name == "droploss":
            mu = droploss_mu(*counts, table=table)
            w = droploss_weights(batch, table, mu, rng)
        elif self.name == "fixed_drop":
            mu = MuPair(self.keep_prob, 1.0)
            w = fixed_drop_weights(batch, table, self.keep_prob, rng)
        else:
            raise ValueError(f"rule {self.name!r} has no sigmoid weights")
        stats = {
            "n_rare": counts[0],
            "n_common": counts[1],
            "n_frequent": counts[2],
            "mu_tail": mu.mu_tail,
            "mu_freq": mu.mu_freq,
        }
        return w, stats

    def loss_and_grad(self, batch: LogitsBatch, table: CategoryTable, rng):
        """Returns (loss, grad, weights, stats); weights is None for softmax."""
        if self.is_softmax:
            loss, grad = softmax_ce(batch, table.num_categories)
            return loss, grad, None, {}
        w, stats = self.weights(batch, table, rng)
        loss, grad = weighted_bce(batch, w)
        return loss, grad, w, stats
