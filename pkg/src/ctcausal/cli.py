"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 non-convergence,
4 positivity/assumption failure (including raised diagnostic flags), 5 I/O.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from .errors import ConvergenceError, PositivityError, ValidationError
from .moments import HSpec
from .paths import read_ensemble, write_ensemble
from .pipeline import (
    result_lines,
    run_diagnose_nid,
    run_estimation,
    run_replication_sim7,
)
from .simulate import (
    config_from_mapping,
    parse_config_text,
    simulate,
    true_counterfactual_mean,
)
from .structural import PARAM_TYPES, plan_from_spec

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONCONVERGENCE = 3
EXIT_ASSUMPTION = 4
EXIT_IO = 5


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctcausal",
        description="Continuous-time causal estimation from trajectory data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a seeded ensemble as CSV")
    sim.add_argument("--dgp", required=True, choices=["ou", "discrete", "tte", "posint"])
    sim.add_argument("--params", type=Path, help="key=value config file")
    sim.add_argument("--n", type=int)
    sim.add_argument("--steps", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", required=True, type=Path)

    truth = sub.add_parser("truth", help="Monte Carlo counterfactual-mean ground truth")
    truth.add_argument("--dgp", required=True, choices=["ou", "discrete", "tte", "posint"])
    truth.add_argument("--params", type=Path)
    truth.add_argument("--plan", required=True, help="const:<v> or csv:<file>")
    truth.add_argument("--n-mc", type=int, required=True)
    truth.add_argument("--seed", type=int, required=True)
    truth.add_argument("--steps", type=int)

    est = sub.add_parser("estimate", help="fit causal parameters from trajectory CSV")
    est.add_argument("--family", required=True, choices=["ou", "discrete", "tte", "posint"])
    est.add_argument("--traj", required=True, type=Path)
    est.add_argument("--plan", required=True, help="const:<v> or csv:<file>")
    est.add_argument("--method", default="orth", choices=["orth", "weight"])
    est.add_argument("--moments", help="integrand spec, e.g. base,zw:1,ww,yw")
    est.add_argument("--times", help="comma list of evaluation times")
    est.add_argument("--out", type=Path, help="output directory")
    est.add_argument("--joint", action="store_true", help="joint nuisance+causal solve")

    rep = sub.add_parser("replicate", help="replicate a named study")
    rep.add_argument("what", choices=["sim7"])
    rep.add_argument("--seed", type=int, required=True)
    rep.add_argument("--out", type=Path)
    rep.add_argument("--n", type=int, default=2000)
    rep.add_argument("--steps", type=int, default=200)

    diag = sub.add_parser("diagnose", help="assumption diagnostics")
    diag.add_argument("what", choices=["nid"])
    diag.add_argument("--traj", required=True, type=Path)
    diag.add_argument("--gamma", required=True, help="comma list of causal parameters")
    diag.add_argument("--family", default="ou", choices=["ou", "discrete", "tte", "posint"])
    diag.add_argument("--hide-z", action="store_true", help="negative control: hide Z from the drift fit")
    diag.add_argument("--out", type=Path)
    return parser


def _load_raw(params: Path | None) -> dict:
    if params is None:
        return {}
    return parse_config_text(params.read_text(encoding="utf-8"))


def _resolve(raw: dict, args, key: str, flag_value):
    if flag_value is not None:
        return flag_value
    if key in raw:
        return raw[key]
    raise ValidationError(f"--{key} not given and key {key!r} not in config file")


def _cmd_simulate(args) -> int:
    raw = _load_raw(args.params)
    n = _resolve(raw, args, "n", args.n)
    seed = _resolve(raw, args, "seed", args.seed)
    if args.steps is not None:
        raw = dict(raw)
        raw["J" if args.dgp == "discrete" else "steps"] = args.steps
        raw.pop("steps" if args.dgp == "discrete" else None, None)
    config = config_from_mapping(raw, dgp=args.dgp)
    ensemble = simulate(config, n, seed)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        write_ensemble(ensemble, fh)
    print(f"wrote {ensemble.n} subjects x {len(ensemble.grid)} times to {args.out}")
    return EXIT_OK


def _cmd_truth(args) -> int:
    raw = _load_raw(args.params)
    if args.steps is not None:
        raw = dict(raw)
        raw["J" if args.dgp == "discrete" else "steps"] = args.steps
    config = config_from_mapping(raw, dgp=args.dgp)
    plan = plan_from_spec(args.plan, config.grid)
    estimate = true_counterfactual_mean(config, plan, args.n_mc, args.seed)
    print(f"mean={estimate.mean!r}")
    print(f"se={estimate.se!r}")
    print(f"n_mc={estimate.n}")
    return EXIT_OK


def _parse_times(text: str | None):
    if text is None:
        return None
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ValidationError(f"bad --times list {text!r}") from None


def _cmd_estimate(args) -> int:
    with open(args.traj, "r", encoding="utf-8", newline="") as fh:
        ensemble = read_ensemble(fh)
    plan = plan_from_spec(args.plan, ensemble.grid)
    if args.moments is not None:
        HSpec.parse(args.moments)  # fail fast with a parse error
    result = run_estimation(
        family=args.family,
        ensemble=ensemble,
        plan=plan,
        method=args.method,
        moments=args.moments,
        times=_parse_times(args.times),
        joint=args.joint,
        out_dir=args.out,
    )
    for line in result_lines(result):
        print(line)
    print(f"elapsed_s={result.timing_s:.2f}", file=sys.stderr)
    return EXIT_OK


def _cmd_replicate(args) -> int:
    result = run_replication_sim7(seed=args.seed, out_dir=args.out, n=args.n, steps=args.steps)
    for line in result_lines(result):
        print(line)
    print(f"elapsed_s={result.timing_s:.2f}", file=sys.stderr)
    return EXIT_OK


def _cmd_diagnose(args) -> int:
    with open(args.traj, "r", encoding="utf-8", newline="") as fh:
        ensemble = read_ensemble(fh)
    try:
        values = [float(v) for v in args.gamma.split(",") if v.strip()]
    except ValueError:
        raise ValidationError(f"bad --gamma list {args.gamma!r}") from None
    param_type = PARAM_TYPES[args.family]
    gamma = param_type.from_vector(values)
    report = run_diagnose_nid(
        ensemble, gamma, hide_z=args.hide_z, out_path=args.out, family=args.family
    )
    for row in report.rows:
        print(
            f"s={row.s!r} t={row.t!r} regressor={row.regressor} "
            f"stat={row.stat!r} flagged={int(row.flagged)}"
        )
    if report.any_flagged:
        print("information drift flagged", file=sys.stderr)
        return EXIT_ASSUMPTION
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "simulate": _cmd_simulate,
        "truth": _cmd_truth,
        "estimate": _cmd_estimate,
        "replicate": _cmd_replicate,
        "diagnose": _cmd_diagnose,
    }
    started = time.perf_counter()
    try:
        return handlers[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except PositivityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        print(f"total_s={time.perf_counter() - started:.2f}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
