"""Command-line interface: ``simulate``, ``fit``, ``study`` and ``calibrate``.

Every subcommand is seeded and writes its CSV with ``repr`` floats, so a
repeated invocation reproduces the output byte for byte.  On failure a single
JSON object ``{"error": <kind>, "message": <text>}`` goes to stderr and the
exit code is nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from dataclasses import fields, replace

from .dataset import DataFormatError, load_dataset, write_long_csv
from .evaluate import ESTIMATORS, LambdaRule, analyze, run_study, write_estimates_csv, write_study_csv
from .results import EstimationError
from .simulate import BaselineSpec, SimConfig, calibrate_rates, observed_fraction, read_conf, simulate_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _sim_config(args, **extra) -> SimConfig:
    return SimConfig(model=args.model, n=getattr(args, "n", 1), B=args.B, b1=args.b1, b2=args.b2, b3=args.b3,
                     baseline=BaselineSpec.parse(args.baseline), x_low=args.x_low, x_high=args.x_high,
                     seed=args.seed, **extra)


def cmd_simulate(args) -> None:
    cfg = _sim_config(args, a_D=1.0, a_C=1.0)
    if args.a_D is not None:
        cfg = replace(cfg, a_D=args.a_D, a_C=args.a_D if args.a_C is None else args.a_C)
    else:
        cal = calibrate_rates(cfg, args.pobs, reps=args.reps, ratio=args.ratio)
        cfg = replace(cfg, a_D=cal.a_D, a_C=cal.a_C)
    data = simulate_dataset(cfg)
    write_long_csv(data, args.out)
    _emit({"out": args.out, "n": data.n, "a_D": cfg.a_D, "a_C": cfg.a_C,
           "observed_fraction": observed_fraction(data), "clamped": data.info["clamped"]})


def cmd_fit(args) -> None:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        data = load_dataset(args.inp, args.B, args.format)
        rule = LambdaRule("cv") if args.lam == "auto" else LambdaRule("fixed", float(args.lam))
        rep = analyze(data, args.model, estimators=(args.estimator,), lambda_rule=rule, seed=args.seed)
    if args.estimator in rep.errors:
        raise EstimationError(rep.errors[args.estimator])
    write_estimates_csv(rep, args.out)
    diag = rep.diagnostics()
    diag["out"] = args.out
    diag["n"] = data.n
    diag["warnings"] = sorted({str(w.message) for w in caught})
    _emit(diag)


STUDY_KEYS = {"M", "estimators", "lambda", "pobs", "ratio", "reps", "workers", "fuse_tol"}


def parse_study_conf(text: str):
    """Split a flat study config into (SimConfig list, options).

    ``n`` may list several sample sizes separated by commas; each becomes one
    study sharing every other setting.  Without ``a_D`` the death/censoring
    rates are calibrated to ``pobs``.
    """
    raw = read_conf(text)
    sim_keys = {f.name for f in fields(SimConfig)}
    unknown = set(raw) - sim_keys - STUDY_KEYS
    if unknown:
        raise ValueError(f"unknown study config keys: {sorted(unknown)}")
    opts = {
        "M": int(raw.get("M", 200)),
        "estimators": tuple(e.strip() for e in raw.get("estimators", ",".join(ESTIMATORS)).split(",") if e.strip()),
        "lambda": LambdaRule.parse(raw.get("lambda", "sqrt")),
        "pobs": float(raw.get("pobs", 0.285)),
        "ratio": float(raw.get("ratio", 1.0)),
        "reps": int(raw.get("reps", 20_000)),
        "workers": int(raw.get("workers", 1)),
        "fuse_tol": float(raw.get("fuse_tol", 1e-8)),
    }
    bad = set(opts["estimators"]) - set(ESTIMATORS) - {"oracle"}
    if bad:
        raise ValueError(f"unknown estimators: {sorted(bad)}")
    ns = [int(v) for v in raw.pop("n", "100").split(",")]
    base = {k: v for k, v in raw.items() if k in sim_keys}
    calibrate = "a_D" not in base
    base.setdefault("a_D", "1.0")
    base.setdefault("a_C", base["a_D"])
    cfgs = [SimConfig.from_dict({**base, "n": n}) for n in ns]
    return cfgs, opts, calibrate


def cmd_study(args) -> None:
    with open(args.config, encoding="utf-8") as fh:
        cfgs, opts, calibrate = parse_study_conf(fh.read())
    if calibrate:
        cal = calibrate_rates(cfgs[0], opts["pobs"], reps=opts["reps"], ratio=opts["ratio"])
        cfgs = [replace(c, a_D=cal.a_D, a_C=cal.a_C) for c in cfgs]
    results = [run_study(c, opts["estimators"], opts["M"], opts["lambda"], opts["fuse_tol"],
                         workers=opts["workers"]) for c in cfgs]
    write_study_csv(results, args.out)
    _emit({"out": args.out, "a_D": cfgs[0].a_D, "a_C": cfgs[0].a_C, "n": [c.n for c in cfgs], "M": opts["M"]})


def cmd_calibrate(args) -> None:
    cfg = _sim_config(args)
    cal = calibrate_rates(cfg, args.pobs, reps=args.reps, ratio=args.ratio)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cal.to_conf())
    _emit({"out": args.out, "a_D": cal.a_D, "a_C": cal.a_C, "p_obs": cal.p_obs})


def _design_args(p, with_n: bool) -> None:
    p.add_argument("--model", choices=("mult", "add"), required=True)
    if with_n:
        p.add_argument("--n", type=int, required=True)
    p.add_argument("--baseline", default="weibull:2.5", help="weibull:SHAPE or gompertz:SHAPE")
    p.add_argument("--b1", type=float, default=1.0)
    p.add_argument("--b2", type=float, default=0.5)
    p.add_argument("--b3", type=float, default=0.2)
    p.add_argument("--B", type=int, default=5)
    p.add_argument("--x-low", dest="x_low", type=float, default=0.0)
    p.add_argument("--x-high", dest="x_high", type=float, default=1.0)
    p.add_argument("--pobs", type=float, default=0.285, help="target fraction observed at the B-th event")
    p.add_argument("--ratio", type=float, default=1.0, help="a_C / a_D used in calibration")
    p.add_argument("--reps", type=int, default=20_000, help="Monte Carlo subjects for calibration")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tvrecur", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a recurrent-event dataset to long CSV")
    _design_args(p, with_n=True)
    p.add_argument("--a-D", dest="a_D", type=float, default=None, help="skip calibration and use this death rate")
    p.add_argument("--a-C", dest="a_C", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one estimator and write covariate,stratum,estimator,estimate")
    p.add_argument("--model", choices=("mult", "add"), required=True)
    p.add_argument("--estimator", choices=ESTIMATORS, required=True)
    p.add_argument("--lambda", dest="lam", default="auto", help="'auto' (cross-validation) or a value")
    p.add_argument("--B", type=int, default=5)
    p.add_argument("--format", choices=("long", "wide"), default="long")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="fold assignment for --lambda auto")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("study", help="Monte Carlo study from a flat key = value config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("calibrate", help="calibrate death/censoring rates to a target p_obs")
    _design_args(p, with_n=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)
    return parser


def _check_lambda(args) -> None:
    if getattr(args, "lam", "auto") != "auto":
        try:
            v = float(args.lam)
        except ValueError:
            raise UsageError(f"--lambda must be 'auto' or a number, got {args.lam!r}") from None
        if not (math.isfinite(v) and v >= 0):
            raise UsageError("--lambda must be finite and nonnegative")


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _check_lambda(args)
        args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(json.dumps({"error": "data_format", "message": str(exc)}), file=sys.stderr)
        return 1
    except EstimationError as exc:
        print(json.dumps({"error": "estimation", "message": str(exc)}), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
