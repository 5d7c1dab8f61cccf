"""Command-line surface: fit, cart, sate, simulate, emit-mip.

All randomness flows from one --seed; when it is omitted a fresh seed is
drawn and printed so the run can be repeated. A JSON config file may supply
defaults; explicit flags win over the file, the file wins over built-ins.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .cart import CartConfig, fit_cart
from .causal import bootstrap_ci, effects_to_csv, effects_to_json, estimate_sate
from .data import load_csv, standardize
from .fitting import DescentBudget, FittedModel
from .mip import emit_lp
from .select import LambdaGrid, select_lambda, trace_to_csv
from .simlab import PRESETS, experiment_to_csv, run_experiment
from .solver import SolveConfig, solve

CONFIG_SCHEMA_VERSION = 1


def _parse_grid(text: str) -> LambdaGrid:
    presets = {
        "paper": LambdaGrid.paper,
        "case-study": LambdaGrid.case_study,
        "small-sample": LambdaGrid.small_sample,
        "balanced": LambdaGrid.balanced,
    }
    if text in presets:
        return presets[text]()
    parts = text.split(":")
    if len(parts) == 3:
        lo, hi, count = float(parts[0]), float(parts[1]), int(parts[2])
        return LambdaGrid.linspace(lo, hi, count)
    try:
        return LambdaGrid(tuple(float(v) for v in text.split(",")))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"bad grid {text!r}: expected a preset name, lo:hi:count, or a comma list"
        ) from None


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    seed = int(np.random.SeedSequence().entropy % (2**31))
    print(f"seed: {seed}")
    return seed


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Inject file-provided values as defaults: flags > file > built-ins."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    path = Path(known.config)
    if not path.exists():
        parser.error(f"config file not found: {path}")
    obj = json.loads(path.read_text(encoding="utf-8"))
    version = obj.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        parser.error(f"config schema_version must be {CONFIG_SCHEMA_VERSION}, got {version}")
    defaults = {k: v for k, v in obj.items() if k != "schema_version"}
    parser.set_defaults(**defaults)
    # subcommand parsers start from fresh namespaces, so they need the
    # defaults as well
    for sub in getattr(parser, "_command_parsers", {}).values():
        sub.set_defaults(**defaults)
    return argv


def _add_io_args(sub, with_covariates=True):
    sub.add_argument("--input", required=True, help="input CSV path")
    sub.add_argument("--outcome", required=True, help="outcome column name")
    sub.add_argument("--treatment", required=True, help="0/1 treatment column name")
    if with_covariates:
        sub.add_argument(
            "--covariates",
            default=None,
            help="comma-separated covariate columns (default: every other column)",
        )


def _add_solver_args(sub):
    sub.add_argument("--depth", type=int, default=2)
    sub.add_argument("--nmin", type=int, default=1)
    sub.add_argument("--threshold-mode", choices=("auto", "midpoints", "quantile"), default="auto")
    sub.add_argument("--quantile-bins", type=int, default=16)
    sub.add_argument("--top-k-fusion", type=int, default=50)
    sub.add_argument("--time-limit", type=float, default=None)
    sub.add_argument("--max-fusion-searches", type=int, default=None)
    sub.add_argument("--restarts", type=int, default=2, help="fusion descent restarts")


def _load_dataset(args):
    cov = None if args.covariates is None else [c.strip() for c in args.covariates.split(",")]
    return load_csv(args.input, outcome=args.outcome, treatment=args.treatment, covariates=cov)


def _solve_config(args, seed: int, lam: float = 0.0) -> SolveConfig:
    return SolveConfig(
        depth=args.depth,
        n_min=args.nmin,
        lam=lam,
        threshold_mode=args.threshold_mode,
        quantile_bins=args.quantile_bins,
        fusion_budget=DescentBudget(restarts=args.restarts, seed=seed),
        top_k_fusion=args.top_k_fusion,
        time_limit=args.time_limit,
        max_fusion_searches=args.max_fusion_searches,
        seed=seed,
    )


def _write_model(model: FittedModel, path: Path, extra: dict | None = None):
    obj = model.to_json()
    if extra:
        obj.update(extra)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _cmd_fit(args) -> int:
    if args.lam is not None and args.grid is not None:
        print("error: --lambda and --grid conflict; pass one of them", file=sys.stderr)
        return 2
    seed = _resolve_seed(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(args)
    if args.standardize:
        ds, _ = standardize(ds, include_outcome=args.standardize_outcome)
    cfg = _solve_config(args, seed)
    if args.lam is not None:
        report = solve(ds, replace(cfg, lam=float(args.lam)), threads=args.threads)
        model = report.best
        trace = None
    else:
        grid = args.grid if args.grid is not None else LambdaGrid.paper()
        trace = select_lambda(ds, cfg, grid, threads=args.threads)
        model = trace.chosen.model
    effects = bootstrap_ci(
        ds, model, n_boot=args.bootstrap, alpha=args.alpha, seed=seed, threads=args.threads
    )
    _write_model(model, out_dir / "model.json", {"feature_names": list(ds.feature_names)})
    effects_to_csv(effects, out_dir / "effects.csv")
    if trace is not None:
        trace_to_csv(trace, out_dir / "trace.csv")
        chosen = trace.chosen
        print(f"chosen lambda: {chosen.lam} (bic {chosen.bic:.6g}, df {chosen.df})")
    print(f"objective: {model.fit.objective:.6g}  sse: {model.fit.sse:.6g}")
    for e in effects:
        lo, hi = e.ci
        print(f"leaf {e.leaf}: n={e.n} tau={e.tau_hat:.6g} ci=({lo:.6g}, {hi:.6g})")
    print(f"wrote {out_dir / 'model.json'}")
    return 0


def _cmd_cart(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = _load_dataset(args)
    if args.standardize:
        ds, _ = standardize(ds, include_outcome=args.standardize_outcome)
    cfg = CartConfig(
        depth=args.depth,
        n_min=args.nmin,
        threshold_mode=args.threshold_mode,
        quantile_bins=args.quantile_bins,
    )
    model = fit_cart(ds, cfg)
    effects = estimate_sate(ds, model)
    _write_model(model, out_dir / "model.json", {"feature_names": list(ds.feature_names)})
    effects_to_csv(effects, out_dir / "effects.csv")
    print(f"objective: {model.fit.objective:.6g}  sse: {model.fit.sse:.6g}")
    print(f"wrote {out_dir / 'model.json'}")
    return 0


def _cmd_sate(args) -> int:
    seed = _resolve_seed(args)
    ds = _load_dataset(args)
    model = FittedModel.from_json(json.loads(Path(args.model).read_text(encoding="utf-8")))
    if args.bootstrap > 0:
        effects = bootstrap_ci(
            ds, model, n_boot=args.bootstrap, alpha=args.alpha, seed=seed, threads=args.threads
        )
    else:
        effects = estimate_sate(ds, model)
    if args.out:
        effects_to_csv(effects, args.out)
        print(f"wrote {args.out}")
    print(json.dumps(effects_to_json(effects), sort_keys=True, indent=1))
    return 0


def _cmd_simulate(args) -> int:
    seed = _resolve_seed(args)
    if args.preset not in PRESETS:
        print(
            f"error: unknown preset {args.preset!r}; choose from {sorted(PRESETS)}",
            file=sys.stderr,
        )
        return 2
    scenario, grid = PRESETS[args.preset]
    scenario = replace(scenario, seed=seed)
    if args.grid is not None:
        grid = args.grid
    methods = [m.strip() for m in args.methods.split(",")]
    cfg = SolveConfig(
        depth=args.depth,
        n_min=args.nmin,
        fusion_budget=DescentBudget(restarts=args.restarts, seed=seed),
        top_k_fusion=args.top_k_fusion,
        time_limit=args.time_limit,
        max_fusion_searches=args.max_fusion_searches,
        seed=seed,
    )
    result = run_experiment(
        scenario,
        methods=methods,
        reps=args.reps,
        n_train=args.n_train if args.n_train else scenario.n,
        n_test=args.n_test,
        grid=grid,
        cfg=cfg,
        threads=args.threads,
    )
    if args.out:
        experiment_to_csv(result, args.out)
        print(f"wrote {args.out}")
    for method, stats in result.summary.items():
        print(
            f"{method}: recovered {stats['recovered']}/{args.reps}"
            f"  mean sate_mse {stats['mean_sate_mse']:.4g}"
            f"  mean oos_risk {stats['mean_oos_risk']:.4g}"
            f"  errors {stats['errors']}"
        )
    return 0


def _cmd_emit_mip(args) -> int:
    ds = _load_dataset(args)
    cfg = SolveConfig(depth=args.depth, n_min=args.nmin, lam=args.lam or 0.0)
    summary = emit_lp(ds, cfg, args.out, big_m=args.big_m, epsilon=args.epsilon)
    print(f"variables: {summary['n_vars']}  constraints: {summary['n_constraints']}")
    print(f"wrote {summary['path']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="foctree",
        description="Fused optimal causal trees: fit, baselines, effects, benchmarks.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    fit = subs.add_parser("fit", help="fit a fused tree and bootstrap subgroup effects")
    _add_io_args(fit)
    _add_solver_args(fit)
    fit.add_argument("--lambda", dest="lam", type=float, default=None, help="fixed penalty")
    fit.add_argument(
        "--grid",
        "--lambda-grid",
        dest="grid",
        type=_parse_grid,
        default=None,
        help="penalty grid: paper | case-study | small-sample | balanced | lo:hi:count | comma list",
    )
    fit.add_argument("--bootstrap", type=int, default=1000)
    fit.add_argument("--alpha", type=float, default=0.10)
    fit.add_argument("--no-standardize", dest="standardize", action="store_false")
    fit.add_argument(
        "--no-standardize-outcome", dest="standardize_outcome", action="store_false"
    )
    fit.add_argument("--out-dir", default=".")
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--threads", type=int, default=1)
    fit.add_argument("--config", default=None, help="JSON config file of flag defaults")
    fit.set_defaults(func=_cmd_fit, standardize=True, standardize_outcome=True)

    cart = subs.add_parser("cart", help="fit the greedy baseline tree")
    _add_io_args(cart)
    cart.add_argument("--depth", type=int, default=2)
    cart.add_argument("--nmin", type=int, default=1)
    cart.add_argument(
        "--threshold-mode", choices=("auto", "midpoints", "quantile"), default="auto"
    )
    cart.add_argument("--quantile-bins", type=int, default=16)
    cart.add_argument("--no-standardize", dest="standardize", action="store_false")
    cart.add_argument(
        "--no-standardize-outcome", dest="standardize_outcome", action="store_false"
    )
    cart.add_argument("--out-dir", default=".")
    cart.add_argument("--config", default=None)
    cart.set_defaults(func=_cmd_cart, standardize=True, standardize_outcome=True)

    sate = subs.add_parser("sate", help="subgroup effects for a saved model on a CSV")
    _add_io_args(sate)
    sate.add_argument("--model", required=True, help="model.json path")
    sate.add_argument("--bootstrap", type=int, default=1000)
    sate.add_argument("--alpha", type=float, default=0.10)
    sate.add_argument("--out", default=None, help="effects CSV path")
    sate.add_argument("--seed", type=int, default=None)
    sate.add_argument("--threads", type=int, default=1)
    sate.add_argument("--config", default=None)
    sate.set_defaults(func=_cmd_sate)

    sim = subs.add_parser("simulate", help="run a benchmark preset")
    sim.add_argument("--preset", required=True, help=f"one of {sorted(PRESETS)}")
    sim.add_argument("--reps", type=int, default=100)
    sim.add_argument("--methods", default="foct,oct,cart")
    sim.add_argument("--n-train", type=int, default=None)
    sim.add_argument("--n-test", type=int, default=2000)
    sim.add_argument("--grid", type=_parse_grid, default=None, help="override the preset grid")
    sim.add_argument("--depth", type=int, default=2)
    sim.add_argument("--nmin", type=int, default=1)
    sim.add_argument("--top-k-fusion", type=int, default=50)
    sim.add_argument("--restarts", type=int, default=1)
    sim.add_argument("--max-fusion-searches", type=int, default=250)
    sim.add_argument("--time-limit", type=float, default=None)
    sim.add_argument("--out", default=None, help="experiment CSV path")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--config", default=None)
    sim.set_defaults(func=_cmd_simulate)

    emit = subs.add_parser("emit-mip", help="write the LP-format program for a CSV")
    _add_io_args(emit)
    emit.add_argument("--depth", type=int, default=1)
    emit.add_argument("--nmin", type=int, default=1)
    emit.add_argument("--lambda", dest="lam", type=float, default=0.0)
    emit.add_argument("--out", required=True, help="LP file path")
    emit.add_argument("--bigM", dest="big_m", type=float, default=None)
    emit.add_argument("--epsilon", type=float, default=1e-6)
    emit.add_argument("--config", default=None)
    emit.set_defaults(func=_cmd_emit_mip)

    parser._command_parsers = {
        "fit": fit, "cart": cart, "sate": sate, "simulate": sim, "emit-mip": emit
    }
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    argv = _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
