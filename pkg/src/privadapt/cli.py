"""Command-line front end.

    privadapt mech sample    --mech em --scores 1,0 --eps 2.1972 --n 100000 --seed 7 --out s.txt
    privadapt account calibrate --eps 8 --delta 1e-5 --q 0.01 --steps 1000
    privadapt account convert   --sigma 1 --delta 1e-5 --q 1 --steps 1
    privadapt account compose   --curve a.json --curve b.json
    privadapt sim            --scenario s.json --seed 0 --out curve.csv
    privadapt cost estimate  --pricing P.json --workload W.json
    privadapt dpsgd          --data d.csv --config c.json --seed 0 --out r.json

Exit codes: 0 ok, 2 configuration/validation, 3 calibration failure,
4 numerical failure.  Every file written with ``--out`` gets a
``<out>.manifest.json`` next to it.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from privadapt import __version__
from privadapt.accounting import (
    DEFAULT_ORDERS,
    CalibrationError,
    DeltaConvention,
    RdpCurve,
    SubsampledGaussianParams,
    calibrate_sigma,
    compose,
    integer_orders,
    rdp_subsampled_gaussian,
    to_eps_delta,
)
from privadapt.costmodel import CostLookupError, MethodDescriptor, load_pricing, method_cost_report
from privadapt.dpsgd import DpSgdConfig, ToyDataset, TrainingError, train
from privadapt.mechanisms import (
    InvalidInputError,
    PrivacyBudget,
    exponential_mechanism,
    gnmax,
    gumbel_topk,
    limited_domain_max,
    ptr_topk,
    report_noisy_max,
)
from privadapt.rng import RngStream
from privadapt.simharness import ScenarioConfig, simulate

EXIT_OK, EXIT_CONFIG, EXIT_CALIBRATION, EXIT_NUMERICAL = 0, 2, 3, 4


class ConfigError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_paths: list[str]
    seed: Optional[int]
    output: str
    tool_version: str = __version__
    wall_clock_seconds: float = 0.0
    argv: list[str] = field(default_factory=list)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(args, text: str, configs: Sequence[str] = ()) -> None:
    out = getattr(args, "out", None)
    if not out or out == "-":
        sys.stdout.write(text)
        return
    path = Path(out)
    _atomic_write(path, text)
    manifest = RunManifest(
        command=args.command_name,
        config_paths=[str(c) for c in configs],
        seed=getattr(args, "seed", None),
        output=str(path),
        wall_clock_seconds=round(time.perf_counter() - args.started, 6),
        argv=list(args.argv),
    )
    _atomic_write(path.with_name(path.name + ".manifest.json"), json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    return [int(v) for v in vals]


# -- mech -------------------------------------------------------------------

def cmd_mech_sample(args) -> int:
    mech, n = args.mech, args.n
    if n < 0:
        raise ConfigError("--n must be nonnegative")
    values = args.scores if args.scores is not None else args.counts
    if values is None:
        raise ConfigError("--scores or --counts is required")
    stream = RngStream(args.seed)
    gen = stream.generator()
    lines: list[str] = []
    if n > 0:
        if mech == "em":
            _need(args, "eps")
            draws = exponential_mechanism(values, args.sens, args.eps, gen, size=n)
            lines = [str(int(d)) for d in draws]
        elif mech == "rnm":
            if args.eps is None and args.scale is None:
                raise ConfigError("--eps or --scale is required for rnm")
            draws = report_noisy_max(_as_counts(values), args.eps, gen, noise=args.noise, scale=args.scale, size=n)
            lines = [str(int(d)) for d in draws]
        elif mech == "gnmax":
            _need(args, "sigma")
            lines = [str(int(d)) for d in gnmax(_as_counts(values), args.sigma, gen, size=n)]
        elif mech == "gumbel":
            _need(args, "eps")
            draws = gumbel_topk(values, args.sens, args.eps, args.k, gen, size=n)
            lines = [",".join(str(int(i)) for i in row) for row in draws]
        elif mech == "ptr":
            _need(args, "eps", "delta")
            budget = PrivacyBudget(args.eps, args.delta)
            for _ in range(n):
                got = ptr_topk(_as_counts(values), args.k, budget, gen)
                lines.append("abstain" if got is None else ",".join(map(str, got)))
        elif mech == "lda":
            _need(args, "eps", "delta")
            budget = PrivacyBudget(args.eps, args.delta)
            for _ in range(n):
                got = limited_domain_max(_as_counts(values), args.k, budget, gen)
                lines.append("bottom" if got is None else str(got))
    _emit(args, "".join(line + "\n" for line in lines))
    return EXIT_OK


def _need(args, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise ConfigError(f"--{name} is required for --mech {args.mech}")


def _as_counts(values) -> list[int]:
    if any(v != int(v) or v < 0 for v in values):
        raise ConfigError("--counts must be nonnegative integers")
    return [int(v) for v in values]


# -- account ----------------------------------------------------------------

def _grid(args) -> tuple[float, ...]:
    return tuple(args.orders) if args.orders else DEFAULT_ORDERS


def _params_curve(args) -> RdpCurve:
    _need_account(args, "sigma", "q", "steps")
    grid = _grid(args)
    if args.q < 1:
        grid = integer_orders(grid)
    return rdp_subsampled_gaussian(SubsampledGaussianParams(args.sigma, args.q, args.steps), grid)


def _need_account(args, *names) -> None:
    for name in names:
        if getattr(args, name, None) is None:
            raise ConfigError(f"--{name} is required")


def _read_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def _load_curve(path: str) -> RdpCurve:
    data = _read_json(path)
    if "curve" in data:
        data = data["curve"]
    try:
        return RdpCurve.from_dict(data)
    except KeyError as exc:
        raise ConfigError(f"{path}: missing field {exc}") from None


def cmd_account(args) -> int:
    sub = args.account_command
    if sub == "calibrate":
        _need_account(args, "eps", "delta", "q", "steps")
        sigma = calibrate_sigma(args.eps, args.delta, args.q, args.steps, _grid(args))
        args.sigma = sigma
        eps, alpha = to_eps_delta(_params_curve(args), args.delta)
        report = {"sigma": sigma, "epsilon": eps, "alpha": alpha, "delta": args.delta,
                  "q": args.q, "steps": args.steps, "target_epsilon": args.eps}
        _emit(args, _dump(report))
    elif sub == "convert":
        _need_account(args, "delta")
        if args.calibration:
            cal = _read_json(args.calibration)
            for key in ("sigma", "q", "steps"):
                if getattr(args, key) is None:
                    setattr(args, key, cal[key])
        curve = _load_curve(args.curve) if args.curve else _params_curve(args)
        eps, alpha = to_eps_delta(curve, args.delta)
        _emit(args, _dump({"epsilon": eps, "alpha": alpha, "delta": args.delta}),
              [p for p in (args.curve, args.calibration) if p])
    elif sub == "compose":
        if not args.curve:
            raise ConfigError("--curve is required (repeat for several curves)")
        curve = compose(_load_curve(p) for p in args.curve)
        report = {"curve": curve.to_dict()}
        if args.delta is not None:
            eps, alpha = to_eps_delta(curve, args.delta)
            report.update({"epsilon": eps, "alpha": alpha, "delta": args.delta})
        _emit(args, _dump(report), args.curve)
    elif sub == "curve":
        _emit(args, _dump(_params_curve(args).to_dict()))
    return EXIT_OK


# -- sim / cost / dpsgd -------------------------------------------------------

def cmd_sim(args) -> int:
    try:
        scenario = ScenarioConfig.from_json(args.scenario)
    except OSError as exc:
        raise ConfigError(f"{args.scenario}: {exc.strerror}") from None
    curve = simulate(scenario, args.seed, threads=args.threads)
    _emit(args, curve.to_csv(), [args.scenario])
    return EXIT_OK


def cmd_cost(args) -> int:
    try:
        pricing = load_pricing(args.pricing)
    except OSError as exc:
        raise ConfigError(f"{args.pricing}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.pricing}: invalid JSON ({exc})") from None
    method = MethodDescriptor.from_dict(_read_json(args.workload))
    report = method_cost_report(pricing, method)
    _emit(args, _dump(report.to_dict()), [p for p in (args.pricing, args.workload) if p])
    return EXIT_OK


def _dpsgd_config(d: dict) -> DpSgdConfig:
    d = dict(d)
    delta = d.pop("delta", None)
    allowed = {"clip_norm", "noise_multiplier", "sampling_rate", "steps", "learning_rate", "loss"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown dpsgd config field(s): {sorted(unknown)}")
    missing = {"clip_norm", "noise_multiplier", "sampling_rate", "steps", "learning_rate"} - set(d)
    if missing:
        raise ConfigError(f"missing dpsgd config field(s): {sorted(missing)}")
    return DpSgdConfig(delta=None if delta is None else DeltaConvention.explicit(delta), **d)


def cmd_dpsgd(args) -> int:
    config = _dpsgd_config(_read_json(args.config))
    try:
        dataset = ToyDataset.from_csv(args.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{args.data}: {exc}") from None
    result = train(dataset, config, RngStream(args.seed))
    _emit(args, _dump(result.to_dict()), [args.data, args.config])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="privadapt", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    mech = sub.add_parser("mech", help="sample from a DP mechanism")
    mech_sub = mech.add_subparsers(dest="mech_command", required=True)
    ms = mech_sub.add_parser("sample")
    ms.add_argument("--mech", required=True, choices=["em", "rnm", "gnmax", "gumbel", "ptr", "lda"])
    ms.add_argument("--scores", type=_floats)
    ms.add_argument("--counts", type=_ints)
    ms.add_argument("--sens", type=float, default=1.0)
    ms.add_argument("--eps", type=float)
    ms.add_argument("--delta", type=float)
    ms.add_argument("--sigma", type=float)
    ms.add_argument("--scale", type=float)
    ms.add_argument("--noise", choices=["laplace", "gaussian"], default="laplace")
    ms.add_argument("--k", type=int, default=1, help="top-k size (gumbel, ptr) or kbar (lda)")
    ms.add_argument("--n", type=int, required=True)
    ms.add_argument("--seed", type=int, required=True)
    ms.add_argument("--out")
    ms.set_defaults(func=cmd_mech_sample, command_name="mech sample")

    acc = sub.add_parser("account", help="RDP accountant")
    acc_sub = acc.add_subparsers(dest="account_command", required=True)
    for name in ("calibrate", "convert", "compose", "curve"):
        a = acc_sub.add_parser(name)
        a.add_argument("--eps", type=float, help="target epsilon (calibrate)")
        a.add_argument("--delta", type=float)
        a.add_argument("--sigma", type=float)
        a.add_argument("--q", type=float)
        a.add_argument("--steps", type=int)
        a.add_argument("--orders", type=_floats)
        a.add_argument("--curve", action="append" if name == "compose" else "store")
        a.add_argument("--calibration", help="JSON from 'account calibrate' supplying sigma/q/steps")
        a.add_argument("--out")
        a.set_defaults(func=cmd_account, command_name=f"account {name}")

    s = sub.add_parser("sim", help="simulate a privacy-utility trade-off curve")
    s.add_argument("--scenario", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out")
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_sim, command_name="sim")

    c = sub.add_parser("cost", help="API / GPU cost estimates")
    c_sub = c.add_subparsers(dest="cost_command", required=True)
    ce = c_sub.add_parser("estimate")
    ce.add_argument("--pricing", help="pricing JSON (default: shipped table)")
    ce.add_argument("--workload", required=True)
    ce.add_argument("--out")
    ce.set_defaults(func=cmd_cost, command_name="cost estimate")

    d = sub.add_parser("dpsgd", help="train the toy DPSGD model")
    d.add_argument("--data", required=True)
    d.add_argument("--config", required=True)
    d.add_argument("--seed", type=int, required=True)
    d.add_argument("--out")
    d.set_defaults(func=cmd_dpsgd, command_name="dpsgd")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    args.started = time.perf_counter()
    try:
        return args.func(args)
    except CalibrationError as exc:
        print(f"error: calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except TrainingError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, InvalidInputError, CostLookupError, TypeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
