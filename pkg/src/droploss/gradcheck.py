"""Central finite-difference checks of every loss variant, alone and through the model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .categories import from_counts
from .losses import LogitsBatch, WeightRule, softmax_ce, weighted_bce
from .model import backward, forward, init_params

STEP = 1e-5
LOSS_TOL = 1e-6
MODEL_TOL = 1e-5
FLOOR = 1e-12

VARIANTS = [
    ("bce", {}),
    ("eql", {}),
    ("beql_b2", {"base": 2.0}),
    ("beql_b5", {"base": 5.0}),
    ("beql_b10", {"base": 10.0}),
    ("droploss", {}),
    ("fixed_drop", {"keep_prob": 0.5}),
    ("softmax", {}),
]


@dataclass
class CheckResult:
    variant: str
    level: str  # "loss" or "model"
    worst: float
    cell: tuple
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.worst <= self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray):
    """Max-norm relative error max|a - n| / max(max|a|, max|n|).

    Returns the error and the index of the cell with the largest absolute gap.
    Cellwise ratios are not used: near-zero cells sit below the round-off floor
    of a central difference.
    """
    diff = np.abs(analytic - numeric)
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), FLOOR)
    idx = np.unravel_index(int(np.argmax(diff)), diff.shape)
    return float(diff[idx] / scale), tuple(int(i) for i in idx)


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def _instance(rng, n=8, c=6):
    # two categories per bin so every weight branch is exercised
    table = from_counts([500, 300, 40, 20, 5, 2][:c])
    labels = rng.integers(-1, c, size=n)
    labels[:3] = [-1, 0, c - 1]
    return table, labels


def _rule_of(name, kw):
    base = name.split("_b")[0] if name.startswith("beql") else name
    return WeightRule(base, **kw)


def frozen_loss(rule: WeightRule, table, labels, rng):
    """Loss function of logits with the weight matrix sampled once and then held fixed."""
    state = {}

    def loss_grad(z):
        batch = LogitsBatch(z, labels)
        if rule.is_softmax:
            return softmax_ce(batch, table.num_categories)
        if "w" not in state:
            state["w"], _ = rule.weights(batch, table, rng)
        return weighted_bce(batch, state["w"])

    return loss_grad


def check_variant(name: str, kw: dict, instances: int = 5, seed: int = 0, perturb: float = 0.0):
    rule = _rule_of(name, kw)
    rng = np.random.default_rng(seed)
    results = []
    worst_loss = (0.0, ())
    worst_model = (0.0, ())
    for k in range(instances):
        table, labels = _instance(rng)
        c = table.num_categories
        width = c + 1 if rule.is_softmax else c
        z = rng.normal(0.0, 2.0, size=(len(labels), width))
        f = frozen_loss(rule, table, labels, np.random.default_rng(seed * 1000 + k))
        _, g = f(z)
        if perturb:
            g = g.copy()
            g[0, 0] += perturb
        num = numeric_grad(lambda: f(z)[0], z)
        e = relative_error(g, num)
        if e[0] >= worst_loss[0]:
            worst_loss = (e[0], (k, *e[1]))

        x = rng.normal(size=(len(labels), 5))
        params = init_params(5, width, hidden=4 if k % 2 else 0, rng=rng)
        for arr in params.arrays.values():
            arr += rng.normal(0.0, 0.3, size=arr.shape)
        fm = frozen_loss(rule, table, labels, np.random.default_rng(seed * 1000 + k))
        _, up = fm(forward(params, x))
        grads = backward(params, x, up)
        for key, arr in params.arrays.items():
            ga = grads[key].copy()
            if perturb:
                ga.flat[0] += perturb
            gn = numeric_grad(lambda: fm(forward(params, x))[0], arr)
            e = relative_error(ga, gn)
            if e[0] >= worst_model[0]:
                worst_model = (e[0], (k, key, *e[1]))
    results.append(CheckResult(name, "loss", worst_loss[0], worst_loss[1], LOSS_TOL))
    results.append(CheckResult(name, "model", worst_model[0], worst_model[1], MODEL_TOL))
    return results


def run_all(instances: int = 5, perturb: float = 0.0, perturb_variant: str | None = None):
    out = []
    for name, kw in VARIANTS:
        p = perturb if perturb_variant in (None, name) else 0.0
        out.extend(check_variant(name, kw, instances, perturb=p))
    return out
