"""Synthetic long-tailed proposal pools.

Foreground proposals sit around per-category unit-norm prototypes. Background is a
mix of "near-miss" samples (a prototype plus wider noise, the stand-in for a box
that overlaps an object too little) and raw Gaussian noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, fields, replace

import numpy as np

from .categories import COMMON_MAX, RARE_MAX, CategoryTable, from_counts
from .losses import BACKGROUND

PROFILES = ("zipf", "binned")


@dataclass(frozen=True)
class SynthConfig:
    num_categories: int = 60
    zipf_exponent: float = 1.2
    feature_dim: int = 32
    fg_noise_sigma: float = 0.2
    near_miss_sigma: float = 0.4
    near_miss_fraction: float = 0.1
    dataset_size: int = 60_000
    fg_fraction_dataset: float = 0.25
    seed: int = 0
    # "binned" builds exact per-bin counts; "zipf" samples labels from the Zipf law
    profile: str = "binned"
    rfs_threshold: float = 0.0

    def __post_init__(self):
        if self.num_categories < 1 or self.feature_dim < 1:
            raise ValueError("num_categories and feature_dim must be positive")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        if not self.near_miss_sigma > self.fg_noise_sigma:
            raise ValueError("near_miss_sigma must exceed fg_noise_sigma")
        for name in ("near_miss_fraction", "fg_fraction_dataset"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}, got {self.profile!r}")
        if not 0.0 <= self.rfs_threshold <= 1.0:
            raise ValueError("rfs_threshold must lie in [0, 1] (0 disables resampling)")

    @property
    def num_foreground(self) -> int:
        return int(round(self.dataset_size * self.fg_fraction_dataset))

    @property
    def num_background(self) -> int:
        return self.dataset_size - self.num_foreground


@dataclass
class ProposalPool:
    features: np.ndarray
    labels: np.ndarray
    table: CategoryTable
    prototypes: np.ndarray | None = None

    def __post_init__(self):
        self.fg_index = np.flatnonzero(self.labels >= 0)
        self.bg_index = np.flatnonzero(self.labels < 0)

    def __len__(self):
        return len(self.labels)

    @property
    def background_features(self) -> np.ndarray:
        return self.features[self.bg_index]

    def to_csv(self, path) -> None:
        d = self.features.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{i}" for i in range(d)] + ["label"])
            for x, y in zip(self.features, self.labels):
                w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_pool_csv(path, num_categories: int) -> ProposalPool:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: last column must be 'label'")
        rows = [r for r in reader if r]
    data = np.array([[float(v) for v in r[:-1]] for r in rows])
    labels = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    if (labels >= num_categories).any():
        raise ValueError(f"{path}: label exceeds num_categories={num_categories}")
    counts = np.bincount(labels[labels >= 0], minlength=num_categories)
    return ProposalPool(data.reshape(len(rows), len(header) - 1), labels, from_counts(counts))


def zipf_category_distribution(num_categories: int, s: float) -> np.ndarray:
    if num_categories < 1 or s < 0:
        raise ValueError("need num_categories >= 1 and s >= 0")
    ranks = np.arange(1, num_categories + 1, dtype=np.float64)
    p = ranks ** -s
    return p / p.sum()


def _geometric_ladder(hi: float, lo: float, n: int) -> np.ndarray:
    return np.round(np.geomspace(hi, lo, n)).astype(np.int64)


def binned_counts(num_categories: int, num_foreground: int) -> np.ndarray:
    """Descending instance counts with an equal number of categories per bin.

    Rare and common categories get geometric ladders over [1, 10] and [11, 100];
    the frequent ladder runs from 101 up to whatever head count makes the total
    close to ``num_foreground``.
    """
    k = num_categories // 3
    sizes = [num_categories - 2 * k, k, k]  # frequent, common, rare
    rare = _geometric_ladder(RARE_MAX, 1, sizes[2]) if sizes[2] else np.zeros(0, np.int64)
    common = _geometric_ladder(COMMON_MAX, RARE_MAX + 1, sizes[1]) if sizes[1] else np.zeros(0, np.int64)
    budget = num_foreground - rare.sum() - common.sum()
    floor = COMMON_MAX + 1
    if budget < floor * sizes[0]:
        raise ValueError(f"num_foreground={num_foreground} too small for {num_categories} binned categories")
    lo, hi = float(floor), float(max(budget, floor + 1))
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.geomspace(mid, floor, sizes[0]).sum() < budget:
            lo = mid
        else:
            hi = mid
    frequent = _geometric_ladder(lo, floor, sizes[0])
    return np.concatenate([frequent, common, rare])


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    proto, train, evals, rfs = ss.spawn(4)
    return (np.random.default_rng(proto), np.random.default_rng(train),
            np.random.default_rng(evals), np.random.default_rng(rfs))


def make_prototypes(config: SynthConfig) -> np.ndarray:
    rng = _streams(config.seed)[0]
    proto = rng.standard_normal((config.num_categories, config.feature_dim))
    return proto / np.linalg.norm(proto, axis=1, keepdims=True)


def _draw(config, prototypes, labels_fg, num_bg, rng):
    d = config.feature_dim
    fg = prototypes[labels_fg] + config.fg_noise_sigma * rng.standard_normal((len(labels_fg), d))
    near = rng.random(num_bg) < config.near_miss_fraction
    anchor = rng.integers(0, config.num_categories, size=num_bg)
    noise = rng.standard_normal((num_bg, d))
    bg = np.where(near[:, None], prototypes[anchor] + config.near_miss_sigma * noise, noise)
    features = np.vstack([fg, bg])
    labels = np.concatenate([labels_fg, np.full(num_bg, BACKGROUND, dtype=np.int64)])
    perm = rng.permutation(len(labels))
    return features[perm], labels[perm]


def generate_pool(config: SynthConfig, prototypes: np.ndarray | None = None) -> ProposalPool:
    """Training pool; fully determined by ``config.seed``."""
    _, rng, _, _ = _streams(config.seed)
    if prototypes is None:
        prototypes = make_prototypes(config)
    n_fg = config.num_foreground
    if config.profile == "binned":
        counts = binned_counts(config.num_categories, n_fg)
        labels_fg = np.repeat(np.arange(config.num_categories), counts)
    else:
        p = zipf_category_distribution(config.num_categories, config.zipf_exponent)
        labels_fg = rng.choice(config.num_categories, size=n_fg, p=p)
    features, labels = _draw(config, prototypes, labels_fg, config.dataset_size - len(labels_fg), rng)
    table = from_counts(np.bincount(labels_fg, minlength=config.num_categories))
    return ProposalPool(features, labels, table, prototypes)


def generate_eval_pool(config: SynthConfig, size: int, prototypes: np.ndarray | None = None) -> ProposalPool:
    """Held-out pool with a balanced category mix, drawn from its own seed stream.

    The table of the returned pool reflects the eval histogram; callers bin
    categories with the training table.
    """
    _, _, rng, _ = _streams(config.seed)
    if prototypes is None:
        prototypes = make_prototypes(config)
    n_fg = int(round(size * config.fg_fraction_dataset))
    labels_fg = np.arange(n_fg) % config.num_categories
    features, labels = _draw(config, prototypes, labels_fg, size - n_fg, rng)
    table = from_counts(np.bincount(labels_fg, minlength=config.num_categories))
    return ProposalPool(features, labels, table, prototypes)


def sample_batch(pool: ProposalPool, batch_size: int, rng):
    """Draw a 1:3 foreground:background batch; returns (features, labels)."""
    if batch_size <= 0 or batch_size % 4:
        raise ValueError(f"batch_size must be a positive multiple of 4, got {batch_size}")
    n_fg = batch_size // 4
    n_bg = batch_size - n_fg
    if len(pool.fg_index) < n_fg or len(pool.bg_index) < n_bg:
        raise ValueError(
            f"pool has {len(pool.fg_index)} fg / {len(pool.bg_index)} bg, "
            f"batch needs {n_fg} / {n_bg}"
        )
    fg = rng.choice(pool.fg_index, size=n_fg, replace=False)
    bg = rng.choice(pool.bg_index, size=n_bg, replace=False)
    idx = rng.permutation(np.concatenate([fg, bg]))
    return pool.features[idx], pool.labels[idx]


def repeat_factors(table: CategoryTable, threshold: float) -> np.ndarray:
    f = table.frequencies
    with np.errstate(divide="ignore"):
        r = np.sqrt(threshold / f)
    return np.maximum(1.0, np.where(f > 0, r, 1.0))


def repeat_factor_resample(pool: ProposalPool, threshold: float, rng) -> ProposalPool:
    """Replicate foreground proposals of category c about max(1, sqrt(t / f_c)) times."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    r = repeat_factors(pool.table, threshold)[pool.labels[pool.fg_index]]
    whole = np.floor(r).astype(np.int64)
    copies = whole + (rng.random(len(r)) < r - whole)
    idx = np.concatenate([np.repeat(pool.fg_index, copies), pool.bg_index])
    idx.sort(kind="stable")
    labels = pool.labels[idx]
    counts = np.bincount(labels[labels >= 0], minlength=pool.table.num_categories)
    return ProposalPool(pool.features[idx], labels, from_counts(counts), pool.prototypes)


def config_replace(config: SynthConfig, **changes) -> SynthConfig:
    known = {f.name for f in fields(SynthConfig)}
    bad = set(changes) - known
    if bad:
        raise ValueError(f"unknown synth fields {sorted(bad)}")
    return replace(config, **changes)
