"""Command line entry point: ``droploss {train,sweep,gradcheck,diagnose}``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import diagnostics as diag
from . import gradcheck
from .experiment import (
    FAMILIES,
    PARAMETERIZED,
    ConfigError,
    diagnose_run,
    load_config,
    parse_grid,
    run_one,
    sweep_points,
    write_run,
)
from .model import NonFiniteLoss

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_NONFINITE = 3

log = logging.getLogger("droploss")


def run_train(config_path, seed=None, out=None) -> int:
    try:
        cfg = load_config(config_path)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    seed = cfg.seeds[0] if seed is None else seed
    out_dir = Path(out) if out else Path(cfg.out) / f"{cfg.loss.rule}_seed{seed}"
    t0 = time.perf_counter()
    try:
        result = run_one(cfg, seed)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    files = write_run(out_dir, cfg, seed, result)
    r = result.report
    print(f"{result.trainlog.rule} seed={seed} tail={r.tail_metric():.4f} head={r.head_metric():.4f} "
          f"macro={r.macro():.4f} ({time.perf_counter() - t0:.1f}s)")
    for f in files:
        print(f"  wrote {f}")
    return EXIT_OK


def run_sweep(config_path, family, grid_spec=None, out=None, jobs=1) -> int:
    try:
        cfg = load_config(config_path)
        grid = parse_grid(grid_spec)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if family not in FAMILIES:
        print(f"error: unknown family {family!r}; expected one of {', '.join(FAMILIES)}", file=sys.stderr)
        return EXIT_CONFIG
    if family in PARAMETERIZED and not grid:
        print(f"error: family {family!r} needs a non-empty --grid", file=sys.stderr)
        return EXIT_CONFIG
    points = sweep_points(cfg, family, grid, cfg.seeds, jobs=jobs)
    out_dir = Path(out) if out else Path(cfg.out) / f"sweep_{family}"
    out_dir.mkdir(parents=True, exist_ok=True)
    diag.write_pareto(out_dir / "pareto.csv", points)
    for p in points:
        print(f"{p.label:<24} tail={p.tail:.4f} head={p.head:.4f} overall={p.overall:.4f} [{p.status}]")
    print(f"  wrote {out_dir / 'pareto.csv'}")
    return EXIT_OK


def run_gradcheck(perturb: float = 0.0, instances: int = 5, perturb_variant: str | None = None) -> int:
    names = [name for name, _ in gradcheck.VARIANTS]
    if perturb_variant is not None and perturb_variant not in names:
        print(f"error: unknown variant {perturb_variant!r}; expected one of {', '.join(names)}", file=sys.stderr)
        return EXIT_CONFIG
    t0 = time.perf_counter()
    results = gradcheck.run_all(instances=instances, perturb=perturb, perturb_variant=perturb_variant)
    by_variant: dict[str, dict] = {}
    for r in results:
        by_variant.setdefault(r.variant, {})[r.level] = r
    bad = [r for r in results if not r.ok]
    for name, levels in by_variant.items():
        loss, model = levels["loss"], levels["model"]
        status = "ok" if loss.ok and model.ok else "FAIL"
        print(f"{name:<12} loss={loss.worst:.3e} (tol {loss.tolerance:.0e}) "
              f"model={model.worst:.3e} (tol {model.tolerance:.0e}) {status}")
    print(f"gradcheck finished in {time.perf_counter() - t0:.2f}s")
    for r in bad:
        print(f"error: {r.variant} ({r.level}) relative error {r.worst:.3e} exceeds {r.tolerance:.0e} "
              f"at cell {r.cell}", file=sys.stderr)
    return EXIT_FAIL if bad else EXIT_OK


def run_diagnose(run_dir, out=None) -> int:
    try:
        files = diagnose_run(run_dir, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for f in files:
        print(f"  wrote {f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="droploss", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train, evaluate and write diagnostics for one seed")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")

    s = sub.add_parser("sweep", help="train one loss family over a grid and write pareto.csv")
    s.add_argument("--config", required=True)
    s.add_argument("--family", required=True)
    s.add_argument("--grid", help="comma-separated values, e.g. 2,3,4,5,7,10")
    s.add_argument("--out")
    s.add_argument("--jobs", type=int, default=1)

    g = sub.add_parser("gradcheck", help="finite-difference check of every loss variant")
    g.add_argument("--instances", type=int, default=5)
    # negative-control hooks: add a constant to one analytic gradient cell
    g.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    g.add_argument("--perturb-variant", help=argparse.SUPPRESS)

    d = sub.add_parser("diagnose", help="recompute diagnostics for an existing run directory")
    d.add_argument("run_dir")
    d.add_argument("--out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        return run_train(args.config, args.seed, args.out)
    if args.command == "sweep":
        return run_sweep(args.config, args.family, args.grid, args.out, args.jobs)
    if args.command == "gradcheck":
        return run_gradcheck(args.perturb, args.instances, args.perturb_variant)
    return run_diagnose(args.run_dir, args.out)


if __name__ == "__main__":
    sys.exit(main())
