"""Command line front end: decay-rate, optimize, simulate, and sweep.

Every subcommand loads a config (see the config module), runs one
library capability, prints a short human summary, and writes a JSON run
report holding the echoed inputs, seed, tool version, results, and
timing, so a run can be reproduced from its report alone. Exit codes
are scriptable: 0 success, 2 config or usage error, 3 numerical
failure, 4 infeasible design problem.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import __version__
from .bethedging import (
    sweep_dose_response,
    sweep_sojourn_shape,
    transformed_budget,
    write_sweep_csv,
)
from .config import ConfigError, LoadedConfig, load_config
from .montecarlo import estimate_decay, simulate, write_mean_norms_csv, write_switch_log_csv
from .numlin import NumericalError
from .optimizer import (
    BudgetProblem,
    PerformanceProblem,
    certify_budget,
    certify_performance,
    solve_budget,
    solve_performance,
)
from .system import decay_rate

__all__ = ["main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_INFEASIBLE = 4

# estimate_decay needs this many trajectories for a defensible tail fit
_FIT_MIN = 100


def _jsonable(obj):
    """Mirror numpy containers into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        obj = obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def _write_report(args, cfg: LoadedConfig, results: dict, seed, elapsed: float) -> None:
    flags = {
        k: _jsonable(v)
        for k, v in vars(args).items()
        if k not in ("func", "command", "config", "report") and v is not None
    }
    report = {
        "tool": "smjls",
        "version": __version__,
        "command": args.command,
        "config_path": cfg.path,
        "inputs": {"config": cfg.raw, "flags": flags},
        "seed": seed,
        "results": _jsonable(results),
        "timing_seconds": round(elapsed, 6),
    }
    with open(args.report, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _theta(cfg: LoadedConfig, values) -> np.ndarray:
    dim = cfg.system.param_dim
    if values is None:
        values = []
    if len(values) != dim:
        raise ConfigError(
            f"--theta needs {dim} value(s) for this config, got {len(values)}"
        )
    return np.asarray(values, dtype=float)


def _cmd_decay_rate(cfg: LoadedConfig, args) -> tuple[dict, int]:
    theta = _theta(cfg, args.theta)
    rep = decay_rate(cfg.system, theta, tol=args.tol, nodes=cfg.solver.nodes)
    print(f"gamma={rep.gamma:.6f}")
    verdict = "stable" if rep.stable else "unstable"
    note = " (gamma extended below zero, outside the certified regime)" if rep.extension else ""
    print(f"verdict: {verdict}{note}")
    results = {
        "gamma": rep.gamma,
        "stable": rep.stable,
        "extension": rep.extension,
        "iterations": rep.iterations,
        "bracket": list(rep.bracket),
        "theta": theta,
    }
    return results, EXIT_OK


def _print_result(res) -> None:
    print(f"status: {res.status}")
    if res.status == "infeasible":
        return
    print(f"theta_star: {np.array2string(res.theta_star, precision=6)}")
    print(f"rate: {res.achieved_rate:.6f}")
    if np.isfinite(res.achieved_cost):
        print(f"cost: {res.achieved_cost:.6f}")
    tight = [f"{name} (slack {slack:.2e})" for name, slack in res.constraint_activity if slack < 1e-5]
    if tight:
        print("active: " + ", ".join(tight))


def _cmd_optimize(cfg: LoadedConfig, args) -> tuple[dict, int]:
    system = cfg.system
    if args.mode == "budget":
        if args.budget is not None and cfg.params is not None:
            # the flag is the raw dose budget; constraints act on the
            # shifted variables, which also carry the offsets' cost
            budget = args.budget + transformed_budget(cfg.params) - cfg.params.budget
        elif args.budget is not None:
            budget = args.budget
        elif cfg.params is not None:
            budget = transformed_budget(cfg.params)
        else:
            raise ConfigError("--mode budget needs --budget for a system config")
        problem = BudgetProblem(system, budget)
        res = solve_budget(problem, cfg.solver)
    else:
        if args.target_rate is None:
            raise ConfigError("--mode performance needs --target-rate")
        problem = PerformanceProblem(system, args.target_rate)
        res = solve_performance(problem, cfg.solver)

    _print_result(res)
    results = {
        "mode": args.mode,
        "status": res.status,
        "theta_star": res.theta_star,
        "v_star": res.v_star,
        "achieved_rate": res.achieved_rate,
        "achieved_cost": res.achieved_cost,
        "iterations": res.iterations,
        "kkt_residual": res.kkt_residual,
        "constraint_activity": [list(item) for item in res.constraint_activity],
    }
    if args.mode == "budget":
        results["effective_budget"] = problem.budget
    if res.status == "infeasible":
        print("no feasible design exists under these constraints", file=sys.stderr)
        return results, EXIT_INFEASIBLE

    if args.certify:
        rng = np.random.default_rng(args.seed)
        if args.mode == "budget":
            cert = certify_budget(problem, res, samples=args.certify, rng=rng)
        else:
            cert = certify_performance(problem, res, samples=args.certify, rng=rng)
        print(
            f"certificate: {'passed' if cert.passed else 'FAILED'} "
            f"({cert.feasible_count}/{cert.samples} feasible draws, "
            f"best {cert.best_value:.6f} vs {cert.reference:.6f})"
        )
        results["certificate"] = {
            "kind": cert.kind,
            "samples": cert.samples,
            "feasible_count": cert.feasible_count,
            "best_value": cert.best_value,
            "reference": cert.reference,
            "tolerance": cert.tolerance,
            "passed": cert.passed,
        }
    return results, EXIT_OK


def _cmd_simulate(cfg: LoadedConfig, args) -> tuple[dict, int]:
    theta = _theta(cfg, args.theta)
    rng = np.random.default_rng(args.seed)
    paths = [
        simulate(cfg.system, theta, np.ones(cfg.system.n), horizon=args.horizon, rng=rng)
        for _ in range(args.samples)
    ]
    switch_csv = f"{args.out}_switches.csv"
    write_switch_log_csv(switch_csv, paths)
    print(f"wrote {switch_csv} ({args.samples} trajectories)")

    rep = decay_rate(cfg.system, theta, nodes=cfg.solver.nodes)
    print(f"gamma={rep.gamma:.6f} (kernel test)")
    results = {
        "theta": theta,
        "samples": args.samples,
        "horizon": args.horizon,
        "gamma": rep.gamma,
        "stable": rep.stable,
        "switch_csv": switch_csv,
        "gamma_hat": None,
    }
    if args.samples >= _FIT_MIN:
        est = estimate_decay(
            cfg.system,
            theta,
            samples=args.samples,
            horizon=args.horizon,
            rng=args.seed,
        )
        norms_csv = f"{args.out}_mean_norms.csv"
        write_mean_norms_csv(norms_csv, est)
        print(f"wrote {norms_csv}")
        print(f"gamma_hat={est.gamma_hat:.6f} +/- {est.stderr:.6f} (ensemble fit)")
        results.update(
            gamma_hat=est.gamma_hat, stderr=est.stderr, mean_norms_csv=norms_csv
        )
    else:
        print(f"ensemble fit skipped: fewer than {_FIT_MIN} samples")
    return results, EXIT_OK


def _grid(text: str, flag: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"{flag}: expected comma-separated numbers") from exc
    if not values:
        raise ConfigError(f"{flag}: needs at least one value")
    return values


def _cmd_sweep(cfg: LoadedConfig, args) -> tuple[dict, int]:
    if cfg.params is None:
        raise ConfigError("sweep needs a bethedging config")
    if args.experiment == "sojourn-shape":
        result = sweep_sojourn_shape(
            cfg.params,
            scale12_grid=_grid(args.scale_grid, "--scale-grid"),
            shape21_grid=_grid(args.shape_grid, "--shape-grid"),
            opts=cfg.solver,
        )
    else:
        result = sweep_dose_response(
            cfg.params,
            sharpness_grid=_grid(args.sharpness_grid, "--sharpness-grid"),
            budget_grid=_grid(args.budget_grid, "--budget-grid"),
            opts=cfg.solver,
        )
    write_sweep_csv(result, args.out)
    failed = sum(1 for pt in result.points if pt.status != "optimal")
    print(
        f"wrote {args.out}: {len(result.points)} points on {result.axes}, "
        f"{failed} failed"
    )
    if np.isfinite(result.baseline):
        print(f"baseline gamma={result.baseline:.6f}")
    results = {
        "experiment": args.experiment,
        "axes": list(result.axes),
        "points": len(result.points),
        "failed": failed,
        "statuses": [pt.status for pt in result.points],
        "gamma_star": result.gamma_star,
        "baseline": result.baseline,
        "csv": args.out,
        "metadata": dict(result.metadata),
    }
    if failed == len(result.points):
        print("every grid point failed", file=sys.stderr)
        return results, EXIT_NUMERICAL
    return results, EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smjls",
        description="Decay rates and convex dosing design for positive "
        "semi-Markov jump linear systems.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="YAML config path")
        p.add_argument(
            "--report",
            default="smjls_report.json",
            help="JSON run report path (default %(default)s)",
        )

    p = sub.add_parser("decay-rate", help="decay rate of a fixed design by the kernel radius test")
    common(p)
    p.add_argument("--theta", type=float, nargs="*", metavar="VAL", help="design point")
    p.add_argument("--tol", type=float, default=1e-9, help="bisection bracket width")
    p.set_defaults(func=_cmd_decay_rate)

    p = sub.add_parser("optimize", help="solve the budget or performance design problem")
    common(p)
    p.add_argument("--mode", choices=("budget", "performance"), required=True)
    p.add_argument("--budget", type=float, help="spend cap (budget mode)")
    p.add_argument("--target-rate", type=float, help="decay rate to certify (performance mode)")
    p.add_argument(
        "--certify",
        type=int,
        default=0,
        metavar="N",
        help="check the optimum against N random feasible designs",
    )
    p.add_argument("--seed", type=int, default=0, help="certificate sampling seed")
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("simulate", help="sample trajectories and fit the empirical decay rate")
    common(p)
    p.add_argument("--theta", type=float, nargs="*", metavar="VAL", help="design point")
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--horizon", type=float, default=50.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="smjls_sim", help="output CSV prefix")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("sweep", help="optimized decay rate over a parameter grid")
    common(p)
    p.add_argument(
        "--experiment", choices=("sojourn-shape", "dose-response"), required=True
    )
    p.add_argument("--scale-grid", default="6.3,6.4,6.5,6.6,6.7", help="sojourn scales, comma separated")
    p.add_argument("--shape-grid", default="0.6,0.8,1.0,1.25,1.5", help="sojourn shapes, comma separated")
    p.add_argument("--sharpness-grid", default="1,10,100", help="dose-response sharpness values")
    p.add_argument("--budget-grid", default="1.0,1.5,2.0", help="budgets, comma separated")
    p.add_argument("--out", default="sweep.csv", help="grid CSV path")
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        cfg = load_config(args.config)
        results, code = args.func(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        # the library rejected an input value it validates itself
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    _write_report(args, cfg, results, getattr(args, "seed", None), time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
