"""Command-line interface: ``curemix fit|cut|km|simulate|replay``."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, load_config
from .data import SchemaError, ValidationError, km_by_cell, load_dataset
from .diagnostics import summarize
from .lifetable import BackgroundCurve, LifeTableError, load_life_table
from .model import ModelSpec
from .posterior import dump_json, fit, report, survival_curves, write_summary_table
from .sampler import FitError
from .simstudy import (DESK_CONFIG, performance_measures, run_scenario, scenario_grid,
                       write_performance, write_scenarios)

logger = logging.getLogger("curemix")

EXIT_USAGE = 2
EXIT_FAILURE = 1
DIVERGENCE_WARN_RATE = 0.10
CURVE_POINTS = 121


class UsageError(Exception):
    pass


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _threads(arg: int | None) -> int:
    if arg is not None:
        return max(1, arg)
    env = os.environ.get("CUREMIX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"CUREMIX_THREADS must be an integer, got {env!r}") from None
    return 1


def write_manifest(path: Path, command: str, argv: list[str], started: str, outputs: list[Path],
                   base: Path, seed=None, config: str | None = None,
                   data: str | None = None, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "seed": seed,
        "config_hash": _sha256(config) if config else None,
        "data_hash": _sha256(data) if data else None,
        "versions": {"curemix": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "started": started,
        "finished": _now(),
        "outputs": {str(p.relative_to(base)) if p.is_relative_to(base) else str(p): _sha256(p)
                    for p in outputs},
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


# -- fit -------------------------------------------------------------------------------

def _write_draws(fitted, path: Path) -> None:
    d = fitted.draws
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("chain", "iter", "param_name", "value"))
        for c in range(d.n_chains):
            for s in range(d.n_draws):
                for i, name in enumerate(d.names):
                    w.writerow((c + 1, s + 1, name, repr(float(d.draws[c, s, i]))))


def _write_curves(curves, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("arm", "endpoint", "time", "mean", "lower95", "upper95", "uncured_mean",
                    "uncured_lower95", "uncured_upper95", "background"))
        for k, a in enumerate(curves.arms):
            for j, e in enumerate(curves.endpoints):
                for g, t in enumerate(curves.grid):
                    vals = (curves.mean, curves.lower95, curves.upper95, curves.uncured_mean,
                            curves.uncured_lower95, curves.uncured_upper95, curves.background)
                    w.writerow([a, e, f"{t:.6g}"] + [f"{v[k, j, g]:.6g}" for v in vals])


def cmd_fit(args) -> int:
    started = _now()
    cfg = load_config(args.config)
    if cfg.background == "lifetable" and not args.lifetable:
        raise UsageError("config sets background = lifetable but --lifetable was not given "
                         "(pass --lifetable FILE or set background = \"none\")")
    data = load_dataset(args.data)
    if cfg.background == "lifetable":
        bg = BackgroundCurve(data, load_life_table(args.lifetable))
    else:
        bg = BackgroundCurve.none(data)
    spec = ModelSpec.for_data(data, cfg.families_for(data.endpoints), cfg.pooling, cfg.priors)
    sampler = cfg.sampler.__class__(**{**cfg.sampler.__dict__, "seed": args.seed})
    fitted = fit(spec, data, bg, sampler, threads=_threads(args.threads))

    out = Path(args.out)
    for sub in ("draws", "summaries", "diagnostics"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    outputs = [out / "draws" / "draws.csv"]
    _write_draws(fitted, outputs[0])

    d = fitted.draws
    params = summarize(d.draws, d.names)
    rate = d.divergence_rate
    diag = {
        "parameters": [p.__dict__ for p in params],
        "divergences": d.divergences.tolist(),
        "divergence_rate": rate,
        "step_size": d.step_size.tolist(),
        "mean_accept_stat": float(d.accept_stat.mean()),
        "max_rhat": max(p.rhat for p in params),
        "min_ess": min(p.ess for p in params),
        "warnings": [],
    }
    if rate > DIVERGENCE_WARN_RATE:
        msg = f"divergence rate {rate:.1%} exceeds {DIVERGENCE_WARN_RATE:.0%}; results may be biased"
        diag["warnings"].append(msg)
        print(f"warning: {msg}", file=sys.stderr)
    outputs.append(out / "diagnostics" / "diagnostics.json")
    dump_json(diag, outputs[-1])

    grid = np.linspace(0.0, cfg.horizon, CURVE_POINTS)
    rep, rows = report(fitted, grid, cfg.tau)
    rep["warnings"] = diag["warnings"]
    by_kind = {"cure_fractions.csv": ["cure_fraction"],
               "rmst.csv": ["rmst", "rmst_uncured", "rmst_cured"], "median.csv": ["median"]}
    for name, kinds in by_kind.items():
        outputs.append(out / "summaries" / name)
        write_summary_table([r for r in rows if r.quantity in kinds], outputs[-1])
    outputs.append(out / "summaries" / "curves.csv")
    bg_used = bg if bg.enabled else None
    _write_curves(survival_curves(fitted.draws, spec, bg_used, grid), outputs[-1])
    outputs.append(out / "summaries" / "scores.json")
    dump_json({k: rep[k] for k in ("waic", "loo") if k in rep}, outputs[-1])
    outputs.append(out / "summaries" / "report.json")
    dump_json(rep, outputs[-1])

    write_manifest(out / "manifest.json", "fit", args.argv, started, outputs, out,
                   seed=args.seed, config=args.config, data=args.data,
                   extra={"lifetable_hash": _sha256(args.lifetable) if args.lifetable else None})
    return 0


# -- cut -------------------------------------------------------------------------------

def cmd_cut(args) -> int:
    """Censor at the cut; lines that do not change are copied byte for byte."""
    started = _now()
    load_dataset(args.data)  # validates the whole file first
    cut = args.months
    raw = Path(args.data).read_bytes().decode("utf-8")
    lines = raw.splitlines(keepends=True)
    header = next(csv.reader([lines[0]]))
    names = [h.strip() for h in header]
    it, ie = names.index("time"), names.index("event")
    out_lines = [lines[0]]
    for line in lines[1:]:
        if not line.strip():
            out_lines.append(line)
            continue
        row = next(csv.reader([line]))
        if float(row[it]) > cut:
            row[it] = repr(float(cut))
            row[ie] = "0"
            buf = io.StringIO()
            ending = line[len(line.rstrip("\r\n")):]
            csv.writer(buf, lineterminator=ending).writerow(row)
            line = buf.getvalue()
        out_lines.append(line)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes("".join(out_lines).encode("utf-8"))
    write_manifest(Path(f"{out}.manifest.json"), "cut", args.argv, started, [out], out.parent,
                   data=args.data, extra={"months": cut})
    return 0


# -- km --------------------------------------------------------------------------------

KM_COLUMNS = ("arm", "endpoint", "time", "n_risk", "n_event", "survival", "lower95", "upper95")


def cmd_km(args) -> int:
    started = _now()
    data = load_dataset(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(KM_COLUMNS)
        for arm, endpoint, curve in km_by_cell(data):
            if curve is None:
                print(f"warning: no subjects in arm {arm!r}, end-point {endpoint!r}; skipped",
                      file=sys.stderr)
                continue
            for i in range(curve.times.size):
                w.writerow([arm, endpoint, f"{curve.times[i]:.6g}", int(curve.n_risk[i]),
                            int(curve.n_event[i]), f"{curve.survival[i]:.6g}",
                            f"{curve.lower95[i]:.6g}", f"{curve.upper95[i]:.6g}"])
    write_manifest(Path(f"{out}.manifest.json"), "km", args.argv, started, [out], out.parent,
                   data=args.data)
    return 0


# -- simulate --------------------------------------------------------------------------

def parse_scenarios(text: str) -> list[int]:
    """``all`` or a comma list of ids and ranges, e.g. ``1,5,17-20``."""
    if text.strip().lower() == "all":
        return list(range(1, 33))
    ids = []
    for part in text.split(","):
        part = part.strip()
        try:
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                ids.extend(range(lo, hi + 1))
            else:
                ids.append(int(part))
        except ValueError:
            raise UsageError(f"--scenarios: cannot parse {part!r}") from None
    for i in ids:
        if not 1 <= i <= 32:
            raise UsageError(f"--scenarios: unknown scenario id {i} (valid: 1-32)")
    return list(dict.fromkeys(ids))


def cmd_simulate(args) -> int:
    started = _now()
    ids = parse_scenarios(args.scenarios)
    if args.n_rep < 2:
        raise UsageError("--n-rep must be at least 2 to compute performance measures")
    cfg = DESK_CONFIG
    overrides = {k: getattr(args, k) for k in ("chains", "iterations", "warmup")
                 if getattr(args, k) is not None}
    if overrides:
        cfg = cfg.__class__(**{**cfg.__dict__, **overrides})
    grid = {s.id: s for s in scenario_grid()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    reps = []
    threads = _threads(args.threads)
    for sid in ids:
        run = run_scenario(grid[sid], args.n_rep, cfg, seed=args.seed, threads=threads)
        if len(run) < 2:
            print(f"error: scenario {sid}: fewer than 2 successful replications", file=sys.stderr)
            return EXIT_FAILURE
        rows += performance_measures(run)
        for r in run:
            for (model, estimand), arr in sorted(r.estimates.items()):
                for j, e in enumerate(grid[sid].endpoints):
                    reps.append([sid, r.rep, model, estimand, e, f"{r.truth[estimand][j]:.6g}",
                                 f"{arr[0, j]:.6g}", f"{arr[1, j]:.6g}", f"{arr[2, j]:.6g}"])
    outputs = [out / "performance.csv", out / "replications.csv", out / "scenarios.csv"]
    write_performance(rows, outputs[0])
    with open(outputs[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scenario", "rep", "model", "estimand", "endpoint", "truth", "mean",
                    "lower95", "upper95"))
        w.writerows(reps)
    write_scenarios([grid[i] for i in ids], outputs[2])
    write_manifest(out / "manifest.json", "simulate", args.argv, started, outputs, out,
                   seed=args.seed, extra={"sampler": cfg.__dict__})
    return 0


# -- replay ----------------------------------------------------------------------------

def cmd_replay(args) -> int:
    with open(args.manifest, encoding="utf-8") as fh:
        argv = json.load(fh)["argv"]
    return main(argv)


# -- entry point -----------------------------------------------------------------------

def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="curemix", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a mixture cure model and write summaries")
    f.add_argument("--data", required=True)
    f.add_argument("--lifetable")
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--threads", type=int)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("cut", help="administratively censor a dataset at a data-cut")
    c.add_argument("--data", required=True)
    c.add_argument("--months", required=True, type=_positive_float)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cut)

    k = sub.add_parser("km", help="Kaplan-Meier tables per arm and end-point")
    k.add_argument("--data", required=True)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_km)

    s = sub.add_parser("simulate", help="run simulation-study scenarios")
    s.add_argument("--scenarios", required=True, help="'all' or ids such as 1,5,17-20")
    s.add_argument("--n-rep", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--threads", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--chains", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--warmup", type=int)
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    r.add_argument("manifest")
    r.set_defaults(func=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SchemaError, ValidationError, LifeTableError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
