"""Small numpy classifier with per-category heads, trained by momentum SGD."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .categories import Bin, CategoryTable
from .diagnostics import GradientLedger
from .losses import LogitsBatch, WeightRule
from .synth import ProposalPool, sample_batch

log = logging.getLogger(__name__)


class NonFiniteLoss(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value!r} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


@dataclass
class ClassifierParams:
    """Linear (``hidden == 0``) or one tanh hidden layer."""

    arrays: dict[str, np.ndarray]

    @property
    def hidden(self) -> int:
        return self.arrays["W1"].shape[1] if "W1" in self.arrays else 0

    @property
    def num_outputs(self) -> int:
        key = "W2" if self.hidden else "W"
        return self.arrays[key].shape[1]

    @property
    def feature_dim(self) -> int:
        key = "W1" if self.hidden else "W"
        return self.arrays[key].shape[0]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams({k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in sorted(self.arrays)])

    def save(self, path) -> None:
        np.savez(path, **self.arrays)

    @classmethod
    def load(cls, path) -> "ClassifierParams":
        with np.load(path) as data:
            return cls({k: data[k].copy() for k in data.files})


def init_params(feature_dim: int, num_outputs: int, hidden: int, rng) -> ClassifierParams:
    def gauss(fan_in, fan_out):
        return rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)

    if hidden:
        return ClassifierParams({
            "W1": gauss(feature_dim, hidden), "b1": np.zeros(hidden),
            "W2": gauss(hidden, num_outputs), "b2": np.zeros(num_outputs),
        })
    return ClassifierParams({"W": gauss(feature_dim, num_outputs), "b": np.zeros(num_outputs)})


def forward(params: ClassifierParams, features: np.ndarray, return_hidden: bool = False):
    """Logits for ``features``; with ``return_hidden`` also the tanh activations (or None)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.feature_dim:
        raise ValueError(f"features shape {x.shape} incompatible with input dim {params.feature_dim}")
    a = params.arrays
    h = None
    if params.hidden:
        h = np.tanh(x @ a["W1"] + a["b1"])
        z = h @ a["W2"] + a["b2"]
    else:
        z = x @ a["W"] + a["b"]
    return (z, h) if return_hidden else z


def backward(params: ClassifierParams, features: np.ndarray, upstream: np.ndarray, hidden=None) -> dict[str, np.ndarray]:
    """Parameter gradients given dLoss/dlogits (any batch averaging is already in ``upstream``).

    ``hidden`` may pass the activations from ``forward`` to skip recomputing them.
    """
    x = np.asarray(features, dtype=np.float64)
    a = params.arrays
    if params.hidden:
        h = np.tanh(x @ a["W1"] + a["b1"]) if hidden is None else hidden
        dpre = (upstream @ a["W2"].T) * (1.0 - h * h)
        return {
            "W1": x.T @ dpre, "b1": dpre.sum(axis=0),
            "W2": h.T @ upstream, "b2": upstream.sum(axis=0),
        }
    return {"W": x.T @ upstream, "b": upstream.sum(axis=0)}


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int = 3000
    base_lr: float = 0.1
    batch_size: int = 512
    decay: float = 0.1
    milestones: tuple[float, ...] = (2 / 3, 8 / 9)
    momentum: float = 0.9
    weight_decay: float = 1e-4
    log_every: int = 100

    def __post_init__(self):
        m = self.milestones
        if any(not 0.0 < x < 1.0 for x in m) or any(b <= a for a, b in zip(m, m[1:])):
            raise ValueError(f"milestones must be strictly increasing in (0, 1), got {m}")
        if self.iterations < 0 or self.batch_size <= 0 or self.log_every <= 0:
            raise ValueError("iterations >= 0, batch_size > 0 and log_every > 0 required")

    def milestone_iterations(self) -> list[int]:
        return [int(round(f * self.iterations)) for f in self.milestones]

    def lr(self, iteration: int) -> float:
        passed = sum(iteration >= m for m in self.milestone_iterations())
        return self.base_lr * self.decay ** passed


def sgd_step(params: ClassifierParams, grads, schedule: TrainSchedule, iteration: int, velocity: dict | None):
    """One momentum step, in place. Returns the updated velocity dict."""
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in params.arrays.items()}
    lr = schedule.lr(iteration)
    for k, p in params.arrays.items():
        v = velocity[k]
        v *= schedule.momentum
        v += grads[k] + schedule.weight_decay * p
        p -= lr * v
    return velocity


DROP_FIELDS = (
    "n_rare", "n_common", "n_frequent", "mu_tail", "mu_freq",
    "rare_cells", "rare_kept", "rare_expected",
    "common_cells", "common_kept", "common_expected",
    "freq_cells", "freq_kept", "freq_expected",
)


@dataclass
class TrainLog:
    rule: str
    seed: int
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    drops: dict[str, list] = field(default_factory=lambda: {k: [] for k in DROP_FIELDS})
    ledger: GradientLedger | None = None
    ledger_snapshots: dict[int, GradientLedger] = field(default_factory=dict)
    checkpoints: dict[int, ClassifierParams] = field(default_factory=dict)

    def drop_array(self, key: str) -> np.ndarray:
        return np.asarray(self.drops[key])

    def rows(self):
        """Per-iteration rows for the CSV dump."""
        has_drops = bool(self.drops["mu_tail"])
        for i, it in enumerate(self.iterations):
            row = {"iteration": it, "loss": self.losses[i], "lr": self.lrs[i]}
            if has_drops:
                d = {k: self.drops[k][i] for k in DROP_FIELDS}
                for b in ("rare", "common", "freq"):
                    cells = d[f"{b}_cells"]
                    row[f"{b}_keep_rate"] = d[f"{b}_kept"] / cells if cells else float("nan")
                row.update(d)
            yield row


def _bin_drop_stats(stats, batch, weights, table):
    """Background cells, kept cells and expected kept cells per bin for one batch."""
    bg = ~batch.fg_flag
    wb = weights[bg]
    n_bg = int(bg.sum())
    keep = np.where(table.tail, stats["mu_tail"], stats["mu_freq"])
    out = {k: stats[k] for k in ("n_rare", "n_common", "n_frequent", "mu_tail", "mu_freq")}
    for name, b in (("rare", Bin.RARE), ("common", Bin.COMMON), ("freq", Bin.FREQUENT)):
        cols = table.bins == b
        out[f"{name}_cells"] = n_bg * int(cols.sum())
        out[f"{name}_kept"] = int(wb[:, cols].sum())
        out[f"{name}_expected"] = float(n_bg * keep[cols].sum())
    return out


def train(
    pool: ProposalPool,
    table: CategoryTable,
    rule: WeightRule,
    schedule: TrainSchedule,
    seed: int,
    hidden: int = 0,
    checkpoint_fractions=(0.1,),
    init: ClassifierParams | None = None,
):
    """Run momentum SGD over 1:3 batches from ``pool``.

    Initialisation, batch sampling and Bernoulli drops use independent streams
    spawned from ``seed``, so two rules trained with the same seed see the same
    initial weights and the same batches.
    """
    init_ss, batch_ss, drop_ss = np.random.SeedSequence(seed).spawn(3)
    batch_rng = np.random.default_rng(batch_ss)
    drop_rng = np.random.default_rng(drop_ss)
    c = table.num_categories
    n_out = c + 1 if rule.is_softmax else c
    if init is None:
        params = init_params(pool.features.shape[1], n_out, hidden, np.random.default_rng(init_ss))
    else:
        params = init.copy()

    ledger = GradientLedger(c)
    trainlog = TrainLog(rule=rule.describe(), seed=seed, ledger=ledger)
    ckpt_at = {max(1, int(round(f * schedule.iterations))) for f in checkpoint_fractions}
    velocity = None
    for it in range(schedule.iterations):
        x, labels = sample_batch(pool, schedule.batch_size, batch_rng)
        z, h = forward(params, x, return_hidden=True)
        batch = LogitsBatch(z, labels)
        loss, grad, weights, stats = rule.loss_and_grad(batch, table, drop_rng)
        if not np.isfinite(loss):
            raise NonFiniteLoss(it, loss)
        ledger.account(labels, grad[:, :c])
        grads = backward(params, x, grad, hidden=h)
        lr = schedule.lr(it)
        velocity = sgd_step(params, grads, schedule, it, velocity)

        trainlog.iterations.append(it)
        trainlog.losses.append(loss)
        trainlog.lrs.append(lr)
        if stats:
            for k, v in _bin_drop_stats(stats, batch, weights, table).items():
                trainlog.drops[k].append(v)
        done = it + 1
        if done % schedule.log_every == 0:
            trainlog.ledger_snapshots[done] = ledger.copy()
            log.debug("%s seed=%d it=%d loss=%.5f lr=%g", rule.describe(), seed, done, loss, lr)
        if done in ckpt_at:
            trainlog.checkpoints[done] = params.copy()
    return params, trainlog
