"""Command-line interface.

Subcommands: flow, fixed-points, basin, quasi, rc-search, simulate,
export.  Flag values override config-file values, which override
defaults.  Exit codes: 0 success, 2 configuration error, 3 numerical
error.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import ConfigurationError, GmmflowError, NumericalError
from .quadrature import default_rule, gaussian_stream
from .reduced import (
    FlowConfig,
    ProblemSpec,
    SummaryState,
    integrate,
    trajectory_to_csv,
)
from .fixed_points import analytic_fixed_points, numeric_fixed_point_search, reports_to_csv
from .simulator import SimConfig, run_simulation, summarize, init_state
from . import experiments as ex

DEFAULTS = dict(
    R=2.0, w_star=2.0 / 3.0, d=10, K=2, eta=0.05, batch=1000, seed=0,
    weight_mode="reparam", geometry="sphere", gradient="stochastic",
    steps=20000, format="csv",
)

_WEIGHT_MODES = {"fixed": "fixed", "reparam": "reparametrized", "projected": "projected"}
_GEOMETRIES = {"sphere": "spherical", "euclid": "euclidean"}


def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--R", type=float, default=DEFAULTS["R"], help="target mean norm")
    p.add_argument("--w-star", type=float, default=DEFAULTS["w_star"], help="target weight of the +mode")
    p.add_argument("--d", type=int, default=DEFAULTS["d"], help="ambient dimension")
    p.add_argument("--K", type=int, default=DEFAULTS["K"], help="variational components")
    p.add_argument("--eta", type=float, default=DEFAULTS["eta"], help="learning rate")
    p.add_argument("--batch", type=int, default=DEFAULTS["batch"], help="batch size B")
    p.add_argument("--seed", type=int, default=DEFAULTS["seed"], help="base RNG seed")
    p.add_argument("--weight-mode", choices=sorted(_WEIGHT_MODES), default=DEFAULTS["weight_mode"],
                   help="weight update mode")
    p.add_argument("--geometry", choices=sorted(_GEOMETRIES), default=DEFAULTS["geometry"],
                   help="mean-update geometry")
    p.add_argument("--gradient", choices=["population", "stochastic"], default=DEFAULTS["gradient"],
                   help="gradient estimator")
    p.add_argument("--steps", type=int, default=DEFAULTS["steps"], help="max steps")
    p.add_argument("--out", type=str, default=None, help="output path (stdout if omitted)")
    p.add_argument("--format", choices=["csv", "json", "svg"], default=DEFAULTS["format"],
                   help="output format")
    p.add_argument("--config", type=str, default=None, help="key=value config file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gmmflow",
        description="KL gradient-flow dynamics for Gaussian-mixture variational inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("flow", help="integrate the reduced flow",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_shared(p)
    p.add_argument("--m1", type=float, default=None, help="initial m1 (random if omitted)")
    p.add_argument("--m2", type=float, default=None, help="initial m2")
    p.add_argument("--s", type=float, default=None, help="initial s")
    p.add_argument("--w1", type=float, default=None, help="initial w1 (defaults to w_star)")
    p.add_argument("--integrator", choices=["euler", "rk4"], default="euler", help="integrator")
    p.add_argument("--record-every", type=int, default=1, help="recording stride")

    p = sub.add_parser("fixed-points", help="analytic and interior fixed points",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_shared(p)
    p.add_argument("--w1", type=float, default=None, help="fixed variational weight (defaults to w_star)")
    p.add_argument("--grid", type=int, default=16, help="Newton seed grid per axis")
    p.add_argument("--analytic-only", action="store_true", help="skip the interior search")

    p = sub.add_parser("basin", help="basin-of-attraction map on the s0 slice",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_shared(p)
    p.add_argument("--w1", type=float, default=None, help="fixed variational weight (defaults to w_star)")
    p.add_argument("--grid", type=int, default=64, help="cells per axis")
    p.add_argument("--s0", type=float, default=0.0, help="initial overlap s")

    p = sub.add_parser("quasi", help="quasi-collapse sweep over radii",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_shared(p)
    p.add_argument("--radii", type=str, default="1.0,1.9,2.5", help="comma-separated radii")

    p = sub.add_parser("rc-search", help="bisect the collapse threshold radius",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_shared(p)
    p.add_argument("--family", choices=["gmm", "nf_centered", "nf_shifted", "nf_multimodal"],
                   default="gmm", help="variational family")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds")
    p.add_argument("--bracket", type=str, default="1.0,4.0", help="R_lo,R_hi")
    p.add_argument("--tol", type=float, default=0.01, help="bisection tolerance")
    p.add_argument("--budget", type=int, default=4000, help="nf training budget (nf_* families)")

    p = sub.add_parser("simulate", help="run the high-dimensional simulator",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_shared(p)
    p.add_argument("--record-every", type=int, default=1, help="recording stride")
    p.add_argument("--optimizer", choices=["gd", "adam"], default="gd", help="optimizer")

    p = sub.add_parser("export", help="re-render a stored JSON result",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--in", dest="input", type=str, required=True, help="input JSON path")
    p.add_argument("--out", type=str, required=True, help="output path")
    p.add_argument("--format", choices=["csv", "json", "svg"], default="svg", help="output format")

    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Fold --config key=value pairs in as new defaults (flags still win)."""
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    try:
        path = argv[idx + 1]
    except IndexError:
        raise ConfigurationError("--config requires a path")
    values = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, val = (part.strip() for part in line.split("=", 1))
                values[key.replace("-", "_")] = val
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}")
    # resolve the subcommand's parser: the shared flags live there
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((tok for tok in argv if tok in sub_action.choices), None)
    if command is None:
        raise ConfigurationError("--config requires a subcommand")
    target = sub_action.choices[command]
    known = {a.dest for a in target._actions}
    bad = set(values) - known
    if bad:
        raise ConfigurationError(f"unknown config key(s): {', '.join(sorted(bad))}")
    typed = {}
    for action in target._actions:
        if action.dest in values:
            raw = values[action.dest]
            try:
                typed[action.dest] = action.type(raw) if action.type else raw
            except ValueError:
                raise ConfigurationError(f"config key {action.dest}={raw!r} is not a valid value")
            if action.choices and typed[action.dest] not in action.choices:
                raise ConfigurationError(
                    f"config key {action.dest}={raw!r} not in {sorted(action.choices)}")
    target.set_defaults(**typed)
    return argv


def _spec_from(args) -> ProblemSpec:
    if not args.R > 0:
        raise ConfigurationError(f"--R must be positive, got {args.R}")
    if not 0.0 < args.w_star < 1.0:
        raise ConfigurationError(f"--w-star must lie in (0, 1), got {args.w_star}")
    if args.d < 1:
        raise ConfigurationError(f"--d must be >= 1, got {args.d}")
    if args.K < 2:
        raise ConfigurationError(f"--K must be >= 2, got {args.K}")
    return ProblemSpec(R=args.R, w_star=args.w_star, d=args.d, K=args.K)


def _flow_from(args, weight_mode=None, max_steps=None) -> FlowConfig:
    return FlowConfig(
        eta=args.eta,
        max_steps=max_steps if max_steps is not None else args.steps,
        integrator=getattr(args, "integrator", "euler"),
        weight_mode=weight_mode or _WEIGHT_MODES[args.weight_mode],
        record_every=getattr(args, "record_every", 1),
    )


def _write(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w") as fh:
            fh.write(text)


def _initial_state(args, spec: ProblemSpec) -> SummaryState:
    w1 = args.w1 if args.w1 is not None else spec.w_star
    given = [args.m1, args.m2, args.s]
    if all(v is not None for v in given):
        return SummaryState.from_w1(args.m1, args.m2, args.s, w1)
    if any(v is not None for v in given):
        raise ConfigurationError("give all of --m1 --m2 --s or none")
    rng = gaussian_stream(args.seed, 1)
    raw = rng.standard_normal((2, spec.d))
    mus = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return SummaryState.from_w1(
        float(mus[0, 0]), float(mus[1, 0]), float(mus[0] @ mus[1]), w1
    )


def _cmd_flow(args) -> int:
    spec = _spec_from(args)
    state0 = _initial_state(args, spec)
    record = integrate(state0, spec, _flow_from(args))
    if args.format == "svg":
        ex.export(record, args.out or "flow.svg", "svg")
    else:
        _write(trajectory_to_csv(record), args.out)
    return 0


def _cmd_fixed_points(args) -> int:
    spec = _spec_from(args)
    w1 = args.w1 if args.w1 is not None else spec.w_star
    reports = analytic_fixed_points(spec, w1)
    if not args.analytic_only:
        reports = reports + numeric_fixed_point_search(spec, w1, grid_n=args.grid)
    _write(reports_to_csv(reports), args.out)
    return 0


def _cmd_basin(args) -> int:
    spec = _spec_from(args)
    w1 = args.w1 if args.w1 is not None else spec.w_star
    flow = FlowConfig(eta=args.eta, max_steps=args.steps, weight_mode="fixed",
                      stop_grad_norm=1e-7)
    bmap = ex.basin_map(spec, w1, grid_n=args.grid, s0=args.s0, config=flow)
    if args.format == "svg":
        ex.export(bmap, args.out or "basin.svg", "svg")
    elif args.format == "json":
        ex.export(bmap, args.out or "basin.json", "json")
    else:
        _write(ex._basin_csv(bmap), args.out)
    return 0


def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok]
    except ValueError:
        raise ConfigurationError(f"{flag} expects comma-separated numbers, got {text!r}")


def _cmd_quasi(args) -> int:
    radii = _parse_float_list(args.radii, "--radii")
    spec = _spec_from(args)
    cfg = SimConfig(
        spec=spec, flow=_flow_from(args, weight_mode="reparametrized"),
        batch_size=args.batch, seed=args.seed,
        gradient_mode=args.gradient, geometry=_GEOMETRIES[args.geometry],
        stability_window=0,
    )
    records, fit = ex.quasi_sweep(radii, cfg)
    if args.format == "svg":
        ex.export(fit, args.out or "quasi.svg", "svg")
    else:
        text = ex._quasi_json(fit) if args.format == "json" else ex._quasi_csv(fit)
        _write(text, args.out)
    return 0


def _cmd_rc_search(args) -> int:
    lo, hi = _parse_float_list(args.bracket, "--bracket")
    spec = _spec_from(args)
    if args.family == "gmm":
        base = SimConfig(
            spec=spec, flow=_flow_from(args, weight_mode=_WEIGHT_MODES[args.weight_mode]),
            batch_size=args.batch, gradient_mode="stochastic",
            geometry=_GEOMETRIES[args.geometry],
        )
        prober = ex.make_gmm_prober(base)
    else:
        prober = ex.make_nf_prober(args.family.removeprefix("nf_"), budget=args.budget)
    result = ex.rc_binary_search(
        d=args.d, family=args.family, seeds=list(range(args.seeds)),
        bracket=(lo, hi), tol=args.tol, sim_factory=prober,
    )
    if args.format == "svg":
        ex.export(result, args.out or "rc.svg", "svg")
    else:
        _write(ex._rc_json(result) if args.format == "json" else ex._rc_csv(result), args.out)
    return 0


def _cmd_simulate(args) -> int:
    spec = _spec_from(args)
    cfg = SimConfig(
        spec=spec, flow=_flow_from(args), batch_size=args.batch, seed=args.seed,
        gradient_mode=args.gradient, geometry=_GEOMETRIES[args.geometry],
        optimizer=args.optimizer,
    )
    record = run_simulation(cfg)
    if args.K == 2:
        if args.format == "svg":
            ex.export(record, args.out or "trajectory.svg", "svg")
        else:
            _write(trajectory_to_csv(record), args.out)
    else:
        _write(record.to_csv(), args.out)
    return 0


def _cmd_export(args) -> int:
    try:
        with open(args.input) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {args.input}: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{args.input} is not valid JSON: {exc}")
    if {"per_seed_thresholds", "d", "family"} <= set(payload):
        res = ex.RcSearchResult(
            d=payload["d"], family=payload["family"],
            per_seed_thresholds=payload["per_seed_thresholds"],
            R_c=payload.get("R_c") or float("nan"),
            seeds_never_collapsing=payload.get("seeds_never_collapsing", []),
            flagged_seeds=payload.get("flagged_seeds", []),
            bracket=tuple(payload.get("bracket", (0.0, 0.0))), tol=payload.get("tol", 0.0),
        )
        ex.export(res, args.out, args.format)
    elif {"radii", "verdicts"} <= set(payload):
        fit = ex.QuasiFit(
            radii=payload["radii"], verdicts=payload["verdicts"],
            t_quasi=payload["t_quasi"], log_t_slope=payload["log_t_slope"],
            log_t_intercept=payload["log_t_intercept"],
            plateau_slopes=payload["plateau_slopes"], plateau_ratios=payload["plateau_ratios"],
        )
        ex.export(fit, args.out, args.format)
    elif {"labels", "m1_grid"} <= set(payload):
        spec = ProblemSpec(R=payload["R"], w_star=payload["w_star"])
        bmap = ex.BasinMap(
            m1_grid=np.asarray(payload["m1_grid"]), m2_grid=np.asarray(payload["m2_grid"]),
            labels=np.asarray(payload["labels"], dtype=object),
            s0=payload["s0"], spec=spec, w1=payload["w1"],
        )
        bmap.boundary = ex._collapse_boundary(bmap)
        ex.export(bmap, args.out, args.format)
    else:
        raise ConfigurationError(f"unrecognized result schema in {args.input}")
    return 0


_COMMANDS = {
    "flow": _cmd_flow,
    "fixed-points": _cmd_fixed_points,
    "basin": _cmd_basin,
    "quasi": _cmd_quasi,
    "rc-search": _cmd_rc_search,
    "simulate": _cmd_simulate,
    "export": _cmd_export,
}


def parse_and_dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, list(argv))
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except GmmflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(parse_and_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
