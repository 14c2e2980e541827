"""Command-line front end.

Exit codes: 0 success, 2 input error, 3 no convergence, 4 numerical failure.
Diagnostics go to stderr as one JSON object per line; a short human summary
goes to stdout.  Every output directory gets a ``manifest.json``.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import att as att_mod
from .design import DesignError, ModelSpec, build_design, build_pretrend_design
from .estimation import FitResult, NonFiniteLikelihood, fit, pretrend_table
from .ingest import (
    IngestRules,
    InputError,
    build_spells,
    format_summary,
    load_events_csv,
    load_spell_csv,
    summarize,
    write_events_csv,
    write_exclusions,
    write_spell_csv,
)
from .model import TRANSITIONS
from .rng import generator_info
from .simulator import ScenarioSpec, calibrate, simulate_population

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("msmsfit")


class _JsonLines(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        d = {"level": record.levelname.lower(), "logger": record.name, "message": record.getMessage()}
        d.update(getattr(record, "data", {}))
        return json.dumps(d, sort_keys=True, default=str)


def _setup_logging(verbose: bool) -> None:
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(_JsonLines())
    root = logging.getLogger()
    root.handlers[:] = [h]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _diag(message: str, level=logging.INFO, **data) -> None:
    log.log(level, message, extra={"data": data})


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def write_manifest(out: Path, args: argparse.Namespace, inputs: dict, configs: dict,
                   seeds: dict, outputs: list[Path], started: str) -> Path:
    manifest = {
        "command": args.command,
        "argv": sys.argv[1:],
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()},
        "configs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in configs.items() if p},
        "seeds": seeds,
        "tool": {"name": "msmsfit", "version": _version(), **generator_info()},
        "started": started,
        "finished": _now(),
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    path = out / "manifest.json"
    _write_json(path, manifest)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    started = _now()
    rules = IngestRules()
    if args.rules:
        with open(args.rules, encoding="utf-8") as fh:
            rules = IngestRules.from_json(json.load(fh))
    events = load_events_csv(args.events)
    spells, exclusions = build_spells(events, rules)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "spells.csv", out / "exclusions.jsonl", out / "summary.json"]
    write_spell_csv(spells, paths[0])
    write_exclusions(exclusions, paths[1])
    summary = summarize(spells) if spells else {}
    _write_json(paths[2], summary)
    write_manifest(out, args, {"events": args.events}, {"rules": args.rules}, {}, paths, started)
    for x in exclusions:
        _diag("patient excluded", logging.ERROR, **x)
    print(f"{len(spells)} spells, {len(exclusions)} excluded patient(s)")
    if summary:
        print(format_summary(summary))
    return EXIT_INPUT if exclusions else EXIT_OK


def _load_model(path) -> ModelSpec:
    return ModelSpec.load(path)


def _fit_and_save(spells, spec, args, out: Path, design=None):
    res = fit(spells, spec, draws=args.draws, seed=args.seed, tol=args.tol,
              max_iter=args.max_iter, threads=args.threads, design=design)
    paths = res.save(out)
    _diag("fit finished", converged=res.converged, loglik=res.loglik, iterations=res.n_iter,
          grad_sup_norm=res.grad_sup_norm, clamps=res.clamps, optimizer_message=res.message)
    if "covariance_error" in res.diagnostics:
        _diag("covariance omitted", logging.WARNING, reason=res.diagnostics["covariance_error"])
    if res.clamps:
        _diag("exponent clamping at the final estimate", logging.WARNING, clamps=res.clamps)
    return res, paths


def cmd_fit(args) -> int:
    started = _now()
    spec = _load_model(args.model)
    spells = load_spell_csv(args.spells, spec)
    out = Path(args.out)
    res, paths = _fit_and_save(spells, spec, args, out)
    seeds = {"frailty": res.seed if res.seed is not None else args.seed}
    write_manifest(out, args, {"spells": args.spells}, {"model": args.model}, seeds, paths, started)
    print(f"logL={res.loglik:.6f} iterations={res.n_iter} converged={res.converged} "
          f"parameters={len(res.layout)}")
    for row in res.coefficient_rows():
        if row["block"] == "beta" and (row["name"] == "mc" or row["name"].startswith("mc:")):
            print(f"  {row['transition']}:{row['name']:<20} {row['estimate']: .5f} ({row['sd']:.5f})")
    if not res.converged:
        _diag("not converged", logging.ERROR, optimizer_message=res.message)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_att(args) -> int:
    started = _now()
    fitdir = Path(args.fitdir)
    res = FitResult.load(fitdir)
    spec = ModelSpec.from_json(res.spec)
    spells = load_spell_csv(args.spells, spec)
    design = build_design(spells, spec)
    if design.layout.keys != res.layout.keys:
        raise DesignError("spells do not reproduce the parameter layout of the fit")
    transitions = [int(t) for t in args.transitions.split(",")] if args.transitions else list(TRANSITIONS)
    results = []
    for r in transitions:
        if not design.treatment_columns(r):
            _diag("no treatment column", logging.WARNING, transition=r)
            continue
        results += att_mod.att_duration(
            res.params, design, r, covariance=res.covariance, group=args.group,
            horizon=args.horizon, eps_draws=args.eps_draws, param_draws=args.draws,
            seed=args.seed, max_rows=args.max_rows,
        )
    for a in results:
        if a.sign_check:
            _diag("sign check", logging.WARNING, transition=a.transition, group=a.group, note=a.sign_check)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "att.csv", out / "att.json"]
    att_mod.write_att_csv(results, paths[0])
    att_mod.write_att_json(results, paths[1], {"fit": str(fitdir), "group": args.group})
    write_manifest(out, args, {"spells": args.spells, "fit": fitdir / "fit.json"}, {},
                   {"att": args.seed}, paths, started)
    print("transition group estimate se")
    for a in results:
        se = "NA" if a.se is None else f"{a.se:.4f}"
        print(f"{a.transition} {a.group} {a.estimate:.4f} {se}")
    return EXIT_OK


def cmd_trend_test(args) -> int:
    started = _now()
    spec = _load_model(args.model)
    spells = load_spell_csv(args.spells, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    degree = 3 if args.cubic else spec.pretrend_degree
    paths = []
    status = EXIT_OK
    res = None
    try:
        design = build_pretrend_design(spells, spec, args.cutoff, degree)
    except DesignError as ex:
        _diag("trend test could not be run", logging.WARNING, reason=str(ex))
        design = None
    if design is not None:
        res, paths = _fit_and_save(None, design.spec, args, out / "fit", design=design)
        if not res.converged:
            status = EXIT_NOT_CONVERGED
    rows = pretrend_table(res, design, degree)
    table = out / "trend_test.csv"
    with open(table, "w", encoding="utf-8") as fh:
        fh.write("transition,statistic,df,p_value,note\n")
        for row in rows:
            cells = [row["transition"], row["statistic"], row["df"], row["p_value"]]
            fh.write(",".join("NA" if c is None else (repr(c) if isinstance(c, float) else str(c))
                              for c in cells) + f",{row['note']}\n")
    inputs, configs, seeds = {"spells": args.spells}, {"model": args.model}, {"frailty": args.seed}
    if paths:
        write_manifest(out / "fit", args, inputs, configs, seeds, paths, started)
    write_manifest(out, args, inputs, configs, seeds, [table], started)
    print("transition p_value")
    for row in rows:
        p = "NA" if row["p_value"] is None else f"{row['p_value']:.4f}"
        print(f"{row['transition']} {p}")
    return status


def cmd_simulate(args) -> int:
    started = _now()
    scn = ScenarioSpec.load(args.scenario)
    if args.calibrate:
        scn = calibrate(scn)
        _diag("baselines calibrated to the target transition shares")
    sim = simulate_population(scn)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "events.csv", out / "spells.csv", out / "truth.json", out / "summary.json"]
    write_events_csv(sim.events, paths[0])
    write_spell_csv(sim.spells, paths[1])
    _write_json(paths[2], sim.truth)
    summary = summarize(sim.spells)
    _write_json(paths[3], summary)
    write_manifest(out, args, {}, {"scenario": args.scenario}, {"scenario": scn.seed}, paths, started)
    print(f"{scn.n_patients} patients, {len(sim.spells)} spells, {len(sim.events)} events")
    print(format_summary(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _fit_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--draws", type=int, default=None, help="frailty draws per patient (M)")
    p.add_argument("--seed", type=int, default=None, help="frailty draw seed")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-6)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msmsfit", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="raw events to spells")
    p.add_argument("events")
    p.add_argument("--rules", help="JSON with start, end, readmission_window, death_window")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="simulated maximum likelihood fit")
    p.add_argument("spells")
    p.add_argument("model")
    _fit_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("att", help="treatment effects on expected durations")
    p.add_argument("fitdir")
    p.add_argument("spells")
    p.add_argument("--group", choices=["overall", "specialty"], default="overall")
    p.add_argument("--draws", type=int, default=200, help="Krinsky-Robb parameter draws")
    p.add_argument("--eps-draws", type=int, default=100, help="frailty draws per row")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=None)
    p.add_argument("--transitions", default=None, help="comma-separated subset, e.g. 1,3")
    p.add_argument("--max-rows", type=int, default=None, help="subsample treated rows")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_att)

    p = sub.add_parser("trend-test", help="pre-reform differential trend test")
    p.add_argument("spells")
    p.add_argument("model")
    p.add_argument("--cutoff", default="1999-08-31")
    p.add_argument("--cubic", action="store_true")
    _fit_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trend_test)

    p = sub.add_parser("simulate", help="synthetic dataset from a scenario")
    p.add_argument("scenario")
    p.add_argument("--calibrate", action="store_true", help="rescale baselines to the default shares")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except (InputError, DesignError, KeyError, FileNotFoundError, json.JSONDecodeError) as ex:
        _diag("input error", logging.ERROR, error=str(ex), kind=type(ex).__name__)
        return EXIT_INPUT
    except (NonFiniteLikelihood, FloatingPointError, np.linalg.LinAlgError) as ex:
        _diag("numerical failure", logging.ERROR, error=str(ex), kind=type(ex).__name__)
        return EXIT_NUMERIC
    except ValueError as ex:
        _diag("input error", logging.ERROR, error=str(ex), kind=type(ex).__name__)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
