"""JSON bridge: one training job on stdin, one verdict on stdout.

Job schema: {"d": int, "R": float, "prior": "centered"|"shifted"|"multimodal",
"seed": int, "budget": int (optional), "w_star": float (optional)}.
Verdict: {"collapsed", "reason", "w_plus", "w_minus", "m_plus", "m_minus", "s"}.
Schema violations exit non-zero with a JSON error object naming the field.

Flags mirror the bridge for manual runs:
    python -m nf_harness.bridge --d 8 --R 2.5 --prior centered --seed 0
"""

from __future__ import annotations

import argparse
import json
import sys

import torch

from .train import DEFAULT_BUDGET, collapse_verdict, train

PRIORS = ("centered", "shifted", "multimodal")

REQUIRED = {"d": int, "R": (int, float), "prior": str, "seed": int}
OPTIONAL = {"budget": int, "w_star": (int, float)}


def validate_job(payload: dict) -> dict:
    if not isinstance(payload, dict):
        raise ValueError("job must be a JSON object")
    for key, types in REQUIRED.items():
        if key not in payload:
            raise ValueError(f"missing field: {key}")
        if not isinstance(payload[key], types) or isinstance(payload[key], bool):
            raise ValueError(f"invalid field: {key}")
    for key, types in OPTIONAL.items():
        if key in payload and (not isinstance(payload[key], types) or isinstance(payload[key], bool)):
            raise ValueError(f"invalid field: {key}")
    unknown = set(payload) - set(REQUIRED) - set(OPTIONAL)
    if unknown:
        raise ValueError(f"unknown field: {sorted(unknown)[0]}")
    if payload["prior"] not in PRIORS:
        raise ValueError(f"invalid field: prior (must be one of {PRIORS})")
    if payload["d"] < 1 or payload["R"] <= 0:
        raise ValueError("invalid field: d and R must be positive")
    return payload


def run_job(job: dict) -> dict:
    torch.set_num_threads(max(torch.get_num_threads(), 1))
    _, record = train(
        d=int(job["d"]), R=float(job["R"]), prior=job["prior"], seed=int(job["seed"]),
        w_star=float(job.get("w_star", 2.0 / 3.0)),
        budget=int(job.get("budget", DEFAULT_BUDGET)),
    )
    stats = record.final
    collapsed, reason = collapse_verdict(stats)
    return {
        "collapsed": collapsed,
        "reason": reason,
        "w_plus": stats.w_plus,
        "w_minus": stats.w_minus,
        "m_plus": stats.m_plus,
        "m_minus": stats.m_minus,
        "s": stats.s,
        "converged": record.converged,
        "iterations": record.iterations[-1],
    }


def serve(stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    try:
        job = validate_job(json.loads(stdin.read()))
    except (json.JSONDecodeError, ValueError) as exc:
        stdout.write(json.dumps({"error": str(exc)}) + "\n")
        return 2
    verdict = run_job(job)
    stdout.write(json.dumps(verdict, sort_keys=True) + "\n")
    return 0


def main() -> None:
    parser = argparse.ArgumentParser(
        prog="nf-bridge",
        description="train a RealNVP by reverse KL and report the collapse verdict",
    )
    parser.add_argument("--d", type=int, help="dimension")
    parser.add_argument("--R", type=float, help="target mean norm")
    parser.add_argument("--prior", choices=PRIORS, help="base distribution")
    parser.add_argument("--seed", type=int, help="seed")
    parser.add_argument("--budget", type=int, default=DEFAULT_BUDGET, help="iteration budget")
    parser.add_argument("--w-star", type=float, default=2.0 / 3.0, help="target weight")
    args = parser.parse_args()
    if args.d is None and args.R is None and args.prior is None and args.seed is None:
        sys.exit(serve())
    if None in (args.d, args.R, args.prior, args.seed):
        parser.error("--d, --R, --prior and --seed are all required in flag mode")
    job = {"d": args.d, "R": args.R, "prior": args.prior, "seed": args.seed,
           "budget": args.budget, "w_star": args.w_star}
    print(json.dumps(run_job(validate_job(job)), sort_keys=True))
    sys.exit(0)


if __name__ == "__main__":
    main()
