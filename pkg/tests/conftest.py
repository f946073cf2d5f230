import numpy as np
import pytest

from droploss.categories import from_counts
from droploss.experiment import ExperimentConfig, EvalConfig, ModelConfig
from droploss.model import TrainSchedule
from droploss.synth import SynthConfig


def central_diff(f, x, h=1e-5):
    """Plain central differences, written independently of droploss.gradcheck."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def max_rel(a, b):
    return np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12)


@pytest.fixture
def table6():
    # frequent, frequent, common, common, rare, rare
    return from_counts([500, 300, 40, 20, 5, 2])


@pytest.fixture
def tiny_config():
    synth = SynthConfig(num_categories=6, feature_dim=8, dataset_size=4000, fg_fraction_dataset=0.25,
                        fg_noise_sigma=0.2, near_miss_sigma=0.4, near_miss_fraction=0.25, seed=3)
    return ExperimentConfig(
        synth=synth,
        schedule=TrainSchedule(iterations=60, batch_size=64, log_every=20),
        model=ModelConfig(hidden=8),
        eval=EvalConfig(size=2000),
        seeds=(0, 1),
    )


# one line per acceptance criterion, printed after the run whatever -s/-q says
CRITERIA: dict[str, tuple[bool, str]] = {}


def record_criterion(key: str, ok: bool, detail: str) -> None:
    CRITERIA[key] = (bool(ok), detail)
    print(f"{key}: {'PASS' if ok else 'FAIL'} {detail}", flush=True)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in CRITERIA:
        ok, detail = CRITERIA[key]
        terminalreporter.write_line(f"{key}: {'PASS' if ok else 'FAIL'}  {detail}")
