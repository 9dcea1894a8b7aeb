"""Command-line front end: ``seelab list | run | check``."""
from __future__ import annotations

import argparse
import ast
import configparser
import csv
import dataclasses
import inspect
import json
import logging
import os
import sys
from pathlib import Path

from .errors import ConfigurationError, SeelabError
from .experiments import BUILTINS, CHECKS, build_builtin, run_experiment

log = logging.getLogger("seelab")

OUT_ENV = "SEELAB_OUT"
DEFAULT_OUT = "seelab-out"

# CLI flag -> builder keyword
_FLAG_KEYS = {"paths": "N", "steps": "M", "modes": "n", "noise_modes": "m", "seed": "seed"}
_RUN_KEYS = {"paths", "steps", "modes", "noise_modes", "seed", "tol_scale", "workers", "checks",
             "out"}


def _literal(text):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def load_config(path):
    """Read an INI run description.

    ``[experiment] name`` picks the built-in builder, ``[run]`` holds the
    same settings as the command-line flags and ``[params]`` passes keyword
    arguments to the builder.  Unknown sections or keys are errors.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    extra = set(parser.sections()) - {"experiment", "run", "params"}
    if extra:
        raise ConfigurationError(f"unknown config sections: {', '.join(sorted(extra))}")
    if not parser.has_option("experiment", "name"):
        raise ConfigurationError("config needs [experiment] name")
    bad = set(parser["experiment"]) - {"name"}
    if bad:
        raise ConfigurationError(f"unknown keys in [experiment]: {', '.join(sorted(bad))}")
    name = parser["experiment"]["name"].strip()
    run = dict(parser["run"]) if parser.has_section("run") else {}
    bad = set(run) - _RUN_KEYS
    if bad:
        raise ConfigurationError(f"unknown keys in [run]: {', '.join(sorted(bad))}")
    run = {k: _literal(v) for k, v in run.items()}
    if isinstance(run.get("checks"), str):
        run["checks"] = [c.strip() for c in run["checks"].split(",") if c.strip()]
    params = {k: _literal(v) for k, v in parser["params"].items()} if parser.has_section("params") else {}
    return name, run, params


def _builder_kwargs(name, run, params):
    if name not in BUILTINS:
        raise ConfigurationError(f"unknown experiment {name!r}; try one of {sorted(BUILTINS)}")
    accepted = set(inspect.signature(BUILTINS[name][0]).parameters)
    kwargs = dict(params)
    for flag, key in _FLAG_KEYS.items():
        if run.get(flag) is not None:
            kwargs[key] = run[flag]
    if run.get("checks") is not None:
        kwargs["checks"] = tuple(run["checks"])
    bad = set(kwargs) - accepted
    if bad:
        raise ConfigurationError(f"{name} does not accept: {', '.join(sorted(bad))}")
    for key in ("N", "M", "n", "m"):
        if key in kwargs and (not isinstance(kwargs[key], int) or kwargs[key] < 1):
            raise ConfigurationError(f"{key} must be an integer >= 1")
    return kwargs


def build_spec(name, run, params):
    spec = build_builtin(name, **_builder_kwargs(name, run, params))
    if run.get("tol_scale") is not None:
        if not float(run["tol_scale"]) > 0:
            raise ConfigurationError("tol-scale must be > 0")
        spec.tol_scale = float(run["tol_scale"])
    if run.get("workers") is not None:
        if int(run["workers"]) < 1:
            raise ConfigurationError("workers must be >= 1")
        spec.setup = dataclasses.replace(spec.setup, workers=int(run["workers"]))
    return spec


def _prepare_out(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory {out} is not writable: {exc}") from exc
    return out


def write_report(report, out):
    data = report.as_dict()
    with open(out / "report.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    for name, check in report.checks.items():
        if not check.series:
            continue
        with open(out / f"{name}.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "quantity", "estimate", "stderr"])
            for t, qty, est, se in check.series:
                writer.writerow([repr(float(t)), qty, repr(float(est)), repr(abs(float(se)))])
    return data


def _run(name, run, params, out, as_json):
    spec = build_spec(name, run, params)
    out = _prepare_out(out)
    only = run.get("only")
    report = run_experiment(spec, only=only)
    data = write_report(report, out)
    for cname, check in report.checks.items():
        status = "PASS" if check.passed else "FAIL"
        detail = f"  ({check.error})" if check.error else ""
        print(f"{status}  {cname}{detail}", file=sys.stderr if as_json else sys.stdout)
    if as_json:
        print(json.dumps(data, indent=2, sort_keys=True))
    else:
        print(f"report written to {out / 'report.json'}")
    return 0 if report.passed else 1


def _parser():
    parser = argparse.ArgumentParser(prog="seelab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_list = sub.add_parser("list", help="list built-in experiments")
    p_list.add_argument("--json", action="store_true", help="machine-readable output")

    def run_flags(p):
        p.add_argument("target", help="built-in experiment name or INI config path")
        p.add_argument("--paths", type=int, help="Monte Carlo paths N")
        p.add_argument("--steps", type=int, help="time steps M")
        p.add_argument("--modes", type=int, help="Galerkin modes n")
        p.add_argument("--noise-modes", type=int, dest="noise_modes", help="noise modes m")
        p.add_argument("--seed", type=int)
        p.add_argument("--tol-scale", type=float, dest="tol_scale",
                       help="multiply every tolerance by this factor")
        p.add_argument("--workers", type=int, help="threads for path-parallel kernels")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or {DEFAULT_OUT})")
        p.add_argument("--json", action="store_true", help="print report.json to stdout")

    run_flags(sub.add_parser("run", help="run every enabled check"))
    p_check = sub.add_parser("check", help="run selected checks only")
    run_flags(p_check)
    p_check.add_argument("--only", action="append", required=True, choices=CHECKS,
                         help="check to run (repeatable)")
    return parser


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list":
        rows = [{"name": k, "description": v[1]} for k, v in sorted(BUILTINS.items())]
        if args.json:
            print(json.dumps(rows, indent=2))
        else:
            width = max(len(r["name"]) for r in rows)
            for r in rows:
                print(f"{r['name']:<{width}}  {r['description']}")
        return 0
    try:
        if os.path.isfile(args.target):
            name, run, params = load_config(args.target)
        else:
            name, run, params = args.target, {}, {}
        for key in ("paths", "steps", "modes", "noise_modes", "seed", "tol_scale", "workers"):
            if getattr(args, key) is not None:
                run[key] = getattr(args, key)
        if args.command == "check":
            run["only"] = args.only
        out = args.out or run.pop("out", None) or os.environ.get(OUT_ENV, DEFAULT_OUT)
        run.pop("out", None)
        return _run(name, run, params, out, args.json)
    except ConfigurationError as exc:
        print(f"seelab: configuration error: {exc}", file=sys.stderr)
        return 2
    except SeelabError as exc:
        print(f"seelab: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
