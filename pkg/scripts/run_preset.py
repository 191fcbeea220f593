"""Run a Monte Carlo preset and write its tables as CSV.

    python scripts/run_preset.py table1 --reps 100 --jobs 4 --out results/table1
"""
import argparse
import os
import time
from pathlib import Path

from attrlab import sim
from attrlab.sampler import McmcConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("preset", choices=["table1", "table2", "table3", "apyn-like"])
    p.add_argument("--scale", choices=["desk", "full"], default="desk")
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--iters", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=int(os.environ.get("ATTRLAB_JOBS", "1")))
    p.add_argument("--out", default=None)
    args = p.parse_args()

    cfg = sim.preset_experiment(args.preset, args.scale, args.reps, args.seed,
                                McmcConfig(iterations=args.iters, seed=args.seed))
    out = Path(args.out or f"results/{args.preset}")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    res = sim.run_experiment(cfg, jobs=args.jobs,
                             progress=lambda d, n: print(f"\r{d}/{n}", end="", flush=True))
    print(f"\n{cfg.replications} replications in {time.time() - t0:.0f}s")

    res.fits.to_csv(out / "fits_long.csv", index=False)
    res.summary().to_csv(out / "summary.csv", index=False)
    table = res.table()
    table.to_csv(out / "table.csv", index=False)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.3f}"))
    if not res.mi.empty:
        audit = res.mi_audit()
        audit.to_csv(out / "mi_audit.csv", index=False)
        print()
        print(audit.to_string(index=False, float_format=lambda v: f"{v:.4f}"))


if __name__ == "__main__":
    main()
