"""Command-line entry point: fit, impute, combine, diagnose, sensitivity, simulate."""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import platform
import sys
import time
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from . import diagnostics as dg
from . import mi, sim
from .data import load_dataset, load_design, save_dataset, write_text_atomic
from .errors import AttrlabError
from .model import default_an_spec, parse_spec, parse_term_at
from .sampler import McmcConfig, PosteriorDraws, run_mwg


class RunContext:
    """Output directory plus the manifest every command writes."""

    def __init__(self, command: str, args: argparse.Namespace, inputs: dict):
        self.command = command
        self.seed = args.seed
        self.t0 = time.time()
        payload = {"command": command, "inputs": inputs}
        self.config_hash = hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:12]
        if args.out:
            self.dir = Path(args.out)
        else:
            stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
            self.dir = Path("runs") / f"{stamp}-{command}-{self.config_hash}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.inputs = inputs
        self.outputs: list[str] = []
        self.extra: dict = {}

    def write(self, name: str, text: str) -> Path:
        path = self.dir / name
        write_text_atomic(path, text)
        self.outputs.append(str(path))
        return path

    def finish(self) -> Path:
        manifest = {
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "inputs": self.inputs,
            "versions": {"attrlab": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__, "pandas": pd.__version__},
            "timing_seconds": round(time.time() - self.t0, 3),
            "outputs": self.outputs,
            **self.extra,
        }
        path = self.dir / "manifest.json"
        write_text_atomic(path, json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("ATTRLAB_JOBS", "1")))
    except ValueError:
        return 1


def _load_inputs(args):
    design = load_design(args.design)
    ds = load_dataset(args.data, design)
    if getattr(args, "spec", None):
        spec = parse_spec(Path(args.spec).read_text(), design)
    else:
        spec = default_an_spec(design, ds.covariate_names)
    inputs = {"data": str(args.data), "data_sha256": _file_digest(args.data), "design": design.variant.value,
              "spec": spec.to_text()}
    return design, ds, spec, inputs


def _mcmc(args) -> McmcConfig:
    return McmcConfig(iterations=args.iters, burn_in_fraction=args.burn, seed=args.seed, n_chains=args.chains,
                      prior_sd=args.prior_sd, init=args.init, marginal_steps=args.marginal_steps)


def _load_draws(path) -> PosteriorDraws:
    manifest = Path(path).with_name("manifest.json")
    meta = json.loads(manifest.read_text()).get("draws") if manifest.exists() else None
    return PosteriorDraws.from_csv(Path(path), meta)


# ------------------------------------------------------------ commands

def cmd_fit(args) -> int:
    design, ds, spec, inputs = _load_inputs(args)
    cfg = _mcmc(args)
    ctx = RunContext("fit", args, {**inputs, "mcmc": cfg.to_dict()})
    draws = run_mwg(ds, spec, cfg, jobs=args.jobs)
    ctx.write("draws.csv", draws.to_csv())
    ctx.write("spec.txt", spec.to_text())
    summary = draws.summary()
    ctx.write("summary.txt", summary.to_string(float_format=lambda v: f"{v:.4f}") + "\n")
    ctx.extra["draws"] = draws.manifest()
    if draws.n_chains >= 2:
        rows = dg.convergence_summary(draws)
        ctx.extra["convergence"] = [vars(r) for r in rows]
        ctx.write("convergence.txt", dg.format_convergence(rows))
    ctx.finish()
    print(summary.to_string(float_format=lambda v: f"{v:.4f}"))
    print(f"run directory: {ctx.dir}")
    return 0


def cmd_impute(args) -> int:
    design, ds, spec, inputs = _load_inputs(args)
    draws = _load_draws(args.draws)
    mode = mi.parse_mode(args.mode)
    ctx = RunContext("impute", args, {**inputs, "draws_sha256": _file_digest(args.draws), "m": args.m,
                                      "mode": mode.value, "formula": args.analyze})
    idx, stride = mi.select_draws(draws, args.m, args.max_autocorr)
    imps = mi.emit_imputations(draws, ds, spec, args.m, mode, seed=args.seed, indices=idx)
    width = len(str(args.m))
    sidecar = []
    for k, c in enumerate(imps, 1):
        name = f"imputations/imp_{k:0{width}d}.csv"
        save_dataset(c.data, ctx.dir / name)
        ctx.outputs.append(str(ctx.dir / name))
        sidecar.append({"file": name, "draw_index": c.draw_index})
    ctx.write("imputations/draw_index.json", json.dumps(sidecar, indent=2) + "\n")
    ctx.extra.update({"thinning_interval": stride, "mode": mode.value})
    if args.analyze:
        fits = [mi.fit_logistic_ml(c, args.analyze) for c in imps]
        names = fits[0].names
        ctx.write("q.csv", pd.DataFrame([f.q for f in fits], columns=names).to_csv(index=False, float_format="%.17g"))
        ctx.write("u.csv", pd.DataFrame([f.u for f in fits], columns=names).to_csv(index=False, float_format="%.17g"))
        ctx.extra["complete_data_dof"] = fits[0].dof
        results = mi.combine_fits(fits)
        ctx.write("mi.json", json.dumps({n: r.to_dict() for n, r in results.items()}, indent=2) + "\n")
        ctx.write("mi.txt", mi.format_results(results))
        print(mi.format_results(results), end="")
    ctx.finish()
    print(f"{len(imps)} {mode.value} imputations (spacing {stride}) in {ctx.dir}")
    return 0


def cmd_combine(args) -> int:
    q = pd.read_csv(args.q)
    u = pd.read_csv(args.u)
    if list(q.columns) != list(u.columns) or len(q) != len(u):
        raise ValueError("q and u tables must have the same columns and rows")
    ctx = RunContext("combine", args, {"q_sha256": _file_digest(args.q), "u_sha256": _file_digest(args.u),
                                       "nu_com": args.nu_com})
    results = {c: mi.rubin_combine(q[c].to_numpy(), u[c].to_numpy(), args.nu_com) for c in q.columns}
    ctx.write("mi.json", json.dumps({n: r.to_dict() for n, r in results.items()}, indent=2) + "\n")
    ctx.write("mi.txt", mi.format_results(results))
    ctx.finish()
    print(mi.format_results(results), end="")
    return 0


def cmd_diagnose(args) -> int:
    design, ds, spec, inputs = _load_inputs(args)
    draws = _load_draws(args.draws)
    ctx = RunContext("diagnose", args, {**inputs, "draws_sha256": _file_digest(args.draws), "T": args.T})
    reps = dg.replicate_data(draws, ds, spec, args.T, args.seed)
    reports = dg.standard_checks(draws, ds, spec, args.T, args.seed, replicates=reps)
    if args.save_replicates:
        for k, r in enumerate(reps, 1):
            save_dataset(r, ctx.dir / f"replicates/rep_{k:04d}.csv")
    ctx.write("ppp.json", dg.ppp_json(reports, include_replicates=args.save_replicates) + "\n")
    ctx.write("ppp.txt", dg.format_ppp_table(reports))
    ctx.extra["flagged"] = [r.statistic_name for r in reports if r.flagged]
    ctx.finish()
    print(dg.format_ppp_table(reports), end="")
    return 0


def cmd_sensitivity(args) -> int:
    design, ds, spec, inputs = _load_inputs(args)
    response, term = parse_term_at(args.term)
    grid = [float(v) for v in args.grid.split(",") if v.strip()]
    cfg = _mcmc(args)
    ctx = RunContext("sensitivity", args, {**inputs, "term": args.term, "grid": grid, "mcmc": cfg.to_dict()})
    rows = dg.sensitivity_scan(ds, spec, response, term, grid, cfg, jobs=args.jobs)
    flat = []
    for r in rows:
        rec = {"fixed_value": r.fixed_value}
        for name, s in r.summary.items():
            rec[f"{name} mean"] = s["mean"]
            rec[f"{name} sd"] = s["sd"]
        rec["odds_ratio"] = r.odds_ratio
        flat.append(rec)
    ctx.write("sensitivity.csv", pd.DataFrame(flat).to_csv(index=False, float_format="%.6g"))
    ctx.write("sensitivity.txt", dg.format_sensitivity(rows))
    ctx.finish()
    print(dg.format_sensitivity(rows), end="")
    return 0


def cmd_simulate(args) -> int:
    mcmc = McmcConfig(iterations=args.iters, seed=args.seed, marginal_steps=args.marginal_steps)
    cfg = sim.preset_experiment(args.preset, args.scale, args.reps, args.seed, mcmc)
    ctx = RunContext("simulate", args, cfg.describe())
    if args.dataset_only:
        ds = sim.generate(cfg.generator.with_seed(args.seed))
        save_dataset(ds, ctx.dir / "data.csv")
        ctx.outputs.append(str(ctx.dir / "data.csv"))
        ctx.write("design.txt", ds.design.to_text())
        ctx.write("spec.txt", cfg.fitted_specs[0][1].to_text())
        ctx.finish()
        print(f"dataset written to {ctx.dir}")
        return 0

    def progress(done, total):
        print(f"replication {done}/{total}", file=sys.stderr)

    result = sim.run_experiment(cfg, jobs=args.jobs, progress=progress if args.verbose else None)
    ctx.write("fits_long.csv", result.fits.to_csv(index=False, float_format="%.6g"))
    table = result.table()
    ctx.write("table.csv", table.to_csv(index=False, float_format="%.4g"))
    ctx.write("summary.csv", result.summary().to_csv(index=False, float_format="%.4g"))
    text = table.to_string(index=False, float_format=lambda v: f"{v:.3f}")
    if not result.mi.empty:
        audit = result.mi_audit()
        ctx.write("mi_audit.csv", audit.to_csv(index=False, float_format="%.4g"))
        text += "\n\n" + audit.to_string(index=False, float_format=lambda v: f"{v:.4f}")
    ctx.extra["experiment_seconds"] = round(result.seconds, 2)
    ctx.finish()
    print(text)
    return 0


# ------------------------------------------------------------ parser

def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="single source of randomness")
    p.add_argument("--jobs", type=int, default=_default_jobs(), help="parallel workers (env ATTRLAB_JOBS)")
    p.add_argument("--out", help="run directory (default: runs/<timestamp>-<command>-<hash>)")


def _add_data(p, spec=True):
    p.add_argument("--data", required=True, help="dataset CSV")
    p.add_argument("--design", required=True, help="design descriptor file or variant name")
    if spec:
        p.add_argument("--spec", help="model spec file (default: just-identified AN chain)")


def _add_mcmc(p):
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--burn", type=float, default=0.5, help="burn-in fraction")
    p.add_argument("--chains", type=int, default=1)
    p.add_argument("--prior-sd", type=float, default=5.0)
    p.add_argument("--init", choices=["zero", "ml"], default="zero")
    p.add_argument("--marginal-steps", type=int, default=2,
                   help="joint observed-likelihood Metropolis steps per sweep (0 = pure augmentation)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attrlab", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="posterior draws for a model spec")
    _add_data(p)
    _add_mcmc(p)
    _add_common(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("impute", help="multiply imputed datasets from saved draws")
    _add_data(p)
    p.add_argument("--draws", required=True)
    p.add_argument("--m", type=int, default=100)
    p.add_argument("--mode", default="POnly", help="POnly or PPlusR")
    p.add_argument("--max-autocorr", type=float, default=0.1)
    p.add_argument("--analyze", help='completed-data logistic formula, e.g. "Y2 ~ 1 + X + Y1"')
    _add_common(p)
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("combine", help="Rubin-combine per-imputation estimates")
    p.add_argument("--q", required=True, help="CSV of estimates, one column per quantity")
    p.add_argument("--u", required=True, help="CSV of variances, same layout")
    p.add_argument("--nu-com", type=float, default=None, help="complete-data degrees of freedom")
    _add_common(p)
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("diagnose", help="posterior predictive checks")
    _add_data(p)
    p.add_argument("--draws", required=True)
    p.add_argument("--T", type=int, default=500, help="replicated datasets")
    p.add_argument("--save-replicates", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("sensitivity", help="refit with an unidentified term frozen at grid values")
    _add_data(p)
    p.add_argument("--term", required=True, help="TERM@RESPONSE, e.g. Y1:Y2@W1")
    p.add_argument("--grid", required=True, help="comma-separated values")
    _add_mcmc(p)
    _add_common(p)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("simulate", help="Monte Carlo experiment presets")
    p.add_argument("--preset", required=True, choices=["table1", "table2", "table3", "apyn-like"])
    p.add_argument("--scale", choices=["desk", "full"], default="desk")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--marginal-steps", type=int, default=2)
    p.add_argument("--dataset-only", action="store_true", help="write one generated dataset and stop")
    p.add_argument("--verbose", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except AttrlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(type(exc).__name__, file=sys.stderr)
        return exc.exit_code
    except (ValueError, KeyError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        print("UsageError", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
