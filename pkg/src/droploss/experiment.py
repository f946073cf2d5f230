"""Experiment configuration, single runs, sweeps, and run-directory artifacts."""

from __future__ import annotations

import csv
import functools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from .categories import CategoryTable, from_counts, load_counts_csv
from .losses import WeightRule
from .metrics import EvalReport, evaluate
from .model import DROP_FIELDS, ClassifierParams, TrainLog, TrainSchedule, train
from .synth import SynthConfig, generate_eval_pool, generate_pool, make_prototypes, repeat_factor_resample

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, message: str, lineno: int | None = None, path=None):
        where = f"{path}:{lineno}: " if lineno is not None else (f"{path}: " if path else "")
        super().__init__(f"{where}{message}")
        self.lineno = lineno


@dataclass(frozen=True)
class LossConfig:
    rule: str = "bce"
    base: float = 4.0
    keep_prob: float = 0.5
    # "bin_aligned" or a float threshold on frequency
    lam: str = "bin_aligned"

    def make_rule(self) -> WeightRule:
        return WeightRule(self.rule, base=self.base, keep_prob=self.keep_prob)


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    size: int = 20_000


@dataclass(frozen=True)
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    counts_csv: str = ""

    def with_loss(self, **changes) -> "ExperimentConfig":
        return replace(self, loss=replace(self.loss, **changes))


SECTIONS = {
    "synth": SynthConfig,
    "loss": LossConfig,
    "schedule": TrainSchedule,
    "model": ModelConfig,
    "eval": EvalConfig,
}
# config-file names that differ from attribute names
ALIASES = {("loss", "lambda"): "lam"}
RUN_KEYS = {"run.seeds": "seeds", "run.out": "out", "categories.counts_csv": "counts_csv"}


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw.replace("_", ""))
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    return raw


def parse_config(text: str, path="<config>") -> ExperimentConfig:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    top: dict = {}
    seen: dict[str, int] = {}
    defaults = ExperimentConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, path)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", lineno, path)
        seen[key] = lineno
        try:
            if key in RUN_KEYS:
                attr = RUN_KEYS[key]
                top[attr] = _coerce(raw, getattr(defaults, attr))
                continue
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigError(f"unknown key {key!r}", lineno, path)
            attr = ALIASES.get((section, name), name)
            known = {f.name: f for f in fields(SECTIONS[section])}
            if attr not in known:
                raise ConfigError(f"unknown key {key!r}", lineno, path)
            values[section][attr] = _coerce(raw, getattr(getattr(defaults, section), attr))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", lineno, path) from exc
    try:
        parts = {s: replace(getattr(defaults, s), **v) for s, v in values.items()}
        cfg = ExperimentConfig(**parts, **top)
        validate(cfg)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc), None, path) from exc
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    cfg.loss.make_rule()
    if cfg.loss.lam != "bin_aligned":
        lam = float(cfg.loss.lam)
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"loss.lambda must be 'bin_aligned' or in [0, 1], got {lam}")
    if not 0.0 < cfg.eval.threshold < 1.0:
        raise ValueError("eval.threshold must lie in (0, 1)")
    if cfg.eval.size < 4:
        raise ValueError("eval.size too small")
    if cfg.model.hidden < 0:
        raise ValueError("model.hidden must be >= 0")
    if cfg.schedule.batch_size % 4:
        raise ValueError("schedule.batch_size must be a multiple of 4 (1:3 foreground:background)")
    if not cfg.seeds:
        raise ValueError("run.seeds must list at least one seed")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, path) from exc
    return parse_config(text, path)


def dump_config(cfg: ExperimentConfig) -> str:
    """Inverse of ``parse_config`` (all keys written explicitly)."""
    lines = []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        rev = {v: k[1] for k, v in ALIASES.items() if k[0] == section}
        for f in fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{section}.{rev.get(f.name, f.name)} = {v}")
    lines.append("run.seeds = " + ",".join(str(s) for s in cfg.seeds))
    lines.append(f"run.out = {cfg.out}")
    if cfg.counts_csv:
        lines.append(f"categories.counts_csv = {cfg.counts_csv}")
    return "\n".join(lines) + "\n"


# -- data --------------------------------------------------------------------

@functools.lru_cache(maxsize=8)
def _world(synth: SynthConfig, eval_size: int):
    protos = make_prototypes(synth)
    pool = generate_pool(synth, protos)
    eval_pool = generate_eval_pool(synth, eval_size, protos)
    return pool, eval_pool


def build_data(cfg: ExperimentConfig):
    """Returns (train pool, eval pool, category table used for weights and bins)."""
    pool, eval_pool = _world(cfg.synth, cfg.eval.size)
    if cfg.counts_csv:
        counts = load_counts_csv(cfg.counts_csv)
        if len(counts) != cfg.synth.num_categories:
            raise ConfigError(f"{cfg.counts_csv} has {len(counts)} categories, expected {cfg.synth.num_categories}")
        base = counts
    else:
        base = pool.table.counts
    lam = None if cfg.loss.lam == "bin_aligned" else float(cfg.loss.lam)
    table = from_counts(base, lam)
    if cfg.synth.rfs_threshold > 0:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.synth.seed).spawn(4)[3])
        pool = repeat_factor_resample(pool, cfg.synth.rfs_threshold, rng)
    return pool, eval_pool, table


# -- single run --------------------------------------------------------------

@dataclass
class RunResult:
    params: ClassifierParams
    early: ClassifierParams
    trainlog: TrainLog
    report: EvalReport
    table: CategoryTable
    bg_early: np.ndarray
    bg_late: np.ndarray

    @property
    def grad_fraction(self) -> np.ndarray:
        return diag.bg_origin_fraction(self.trainlog.ledger)


def early_checkpoint(trainlog: TrainLog, initial: ClassifierParams) -> ClassifierParams:
    if trainlog.checkpoints:
        return trainlog.checkpoints[min(trainlog.checkpoints)]
    return initial


def run_one(cfg: ExperimentConfig, seed: int) -> RunResult:
    pool, eval_pool, table = build_data(cfg)
    rule = cfg.loss.make_rule()
    params, trainlog = train(pool, table, rule, cfg.schedule, seed, hidden=cfg.model.hidden)
    early = early_checkpoint(trainlog, params)
    report = evaluate(params, eval_pool.features, eval_pool.labels, table,
                      cfg.eval.threshold, softmax=rule.is_softmax)
    bg = eval_pool.background_features
    return RunResult(
        params=params, early=early, trainlog=trainlog, report=report, table=table,
        bg_early=diag.bg_score_profile(early, bg, rule.is_softmax),
        bg_late=diag.bg_score_profile(params, bg, rule.is_softmax),
    )


TRAINLOG_FIELDS = ["iteration", "loss", "lr", "rare_keep_rate", "common_keep_rate", "freq_keep_rate", *DROP_FIELDS]


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v


def write_trainlog(path, trainlog: TrainLog) -> None:
    rows = list(trainlog.rows())
    names = TRAINLOG_FIELDS if rows and "mu_tail" in rows[0] else TRAINLOG_FIELDS[:3]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in names])


def read_trainlog(path) -> TrainLog:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    tl = TrainLog(rule="", seed=-1)
    for r in rows:
        tl.iterations.append(int(r["iteration"]))
        tl.losses.append(float(r["loss"]))
        tl.lrs.append(float(r["lr"]))
        if "mu_tail" in r:
            for k in DROP_FIELDS:
                num = float(r[k])
                tl.drops[k].append(num if k.startswith("mu") or k.endswith("expected") else int(num))
    return tl


def write_run(out_dir, cfg: ExperimentConfig, seed: int, result: RunResult) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(replace(cfg, seeds=(seed,))))
    write_trainlog(out / "trainlog.csv", result.trainlog)
    result.trainlog.ledger.to_csv(out / "ledger.csv")
    result.params.save(out / "params_final.npz")
    result.early.save(out / "params_early.npz")
    return [out / "config.txt", out / "trainlog.csv", out / "ledger.csv",
            *write_diagnostics(out, result.trainlog, result.trainlog.ledger, result.report,
                               result.bg_early, result.bg_late, result.table)]


def write_diagnostics(out: Path, trainlog, ledger, report, bg_early, bg_late, table) -> list[Path]:
    report.to_csv(out / "eval.csv")
    diag.write_grad_origin(out / "grad_origin.csv", ledger, table)
    diag.write_bg_scores(out / "bg_scores.csv", bg_early, bg_late, table)
    written = [out / "eval.csv", out / "grad_origin.csv", out / "bg_scores.csv"]
    audits = diag.drop_rate_audit(trainlog)
    if audits:
        diag.write_drop_audit(out / "drop_audit.csv", audits)
        written.append(out / "drop_audit.csv")
    return written


def diagnose_run(run_dir, out_dir=None) -> list[Path]:
    """Recompute diagnostics from a finished run directory without touching its train log."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir else run_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config(run_dir / "config.txt")
    _, eval_pool, table = build_data(cfg)
    softmax = cfg.loss.rule == "softmax"
    params = ClassifierParams.load(run_dir / "params_final.npz")
    early = ClassifierParams.load(run_dir / "params_early.npz")
    ledger = diag.GradientLedger.from_csv(run_dir / "ledger.csv")
    trainlog = read_trainlog(run_dir / "trainlog.csv")
    report = evaluate(params, eval_pool.features, eval_pool.labels, table, cfg.eval.threshold, softmax)
    bg = eval_pool.background_features
    return write_diagnostics(out, trainlog, ledger, report,
                             diag.bg_score_profile(early, bg, softmax),
                             diag.bg_score_profile(params, bg, softmax), table)


# -- sweeps ------------------------------------------------------------------

FAMILIES = ("beql", "fixed_drop", "eql", "droploss", "bce", "softmax")
PARAMETERIZED = {"beql": "base", "fixed_drop": "keep_prob"}


@dataclass
class PointMetrics:
    tail: float
    head: float
    overall: float


def _run_point(args) -> PointMetrics | str:
    cfg, seed = args
    try:
        r = run_one(cfg, seed).report
    except Exception as exc:  # a failed point is reported, the sweep goes on
        log.warning("sweep point %s seed %d failed: %s", cfg.loss, seed, exc)
        return f"failed: {type(exc).__name__}: {exc}"
    return PointMetrics(r.tail_metric(), r.head_metric(), r.macro())


def point_configs(base: ExperimentConfig, family: str, grid) -> list[tuple[float | None, ExperimentConfig]]:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; expected one of {FAMILIES}")
    if family in PARAMETERIZED:
        grid = list(grid or [])
        if not grid:
            raise ValueError(f"family {family!r} needs a non-empty grid")
        key = PARAMETERIZED[family]
        return [(float(g), base.with_loss(rule=family, **{key: float(g)})) for g in grid]
    return [(None, base.with_loss(rule=family))]


def sweep_points(base: ExperimentConfig, family: str, grid, seeds, jobs: int = 1) -> list[diag.ParetoPoint]:
    points = point_configs(base, family, grid)
    seeds = list(seeds)
    tasks = [(cfg, s) for _, cfg in points for s in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_point, tasks))
    else:
        results = [_run_point(t) for t in tasks]
    return [aggregate_point(family, param, results[i * len(seeds):(i + 1) * len(seeds)])
            for i, (param, _) in enumerate(points)]


def aggregate_point(family: str, param, chunk) -> diag.ParetoPoint:
    """Median metrics over seeds; spreads are across-seed standard deviations.

    ``chunk`` holds one PointMetrics (or a failure string) per seed.
    """
    good = [r for r in chunk if isinstance(r, PointMetrics)]
    errors = [r for r in chunk if isinstance(r, str)]
    if not good:
        return diag.ParetoPoint(family, param, math.nan, math.nan, math.nan, 0, errors[0])
    tails = np.array([g.tail for g in good])
    heads = np.array([g.head for g in good])
    overall = np.array([g.overall for g in good])
    return diag.ParetoPoint(
        family, param,
        tail=float(np.median(tails)), head=float(np.median(heads)), overall=float(np.median(overall)),
        seed_count=len(good),
        status="ok" if not errors else f"partial: {errors[0]}",
        tail_spread=float(tails.std()), head_spread=float(heads.std()),
    )


def parse_grid(spec: str | None) -> list[float]:
    if not spec:
        return []
    return [float(x) for x in spec.split(",") if x.strip()]


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
