"""Sensitivity of an interaction-generated two-wave dataset to the frozen Y1:Y2 selection term."""
import argparse

from attrlab import diagnostics as dg
from attrlab import sim
from attrlab.model import Term
from attrlab.sampler import McmcConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--grid", default="-1,-0.5,0,0.5,1,1.5")
    p.add_argument("--iters", type=int, default=4000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    ds = sim.generate(sim.table2_generator(seed=args.seed))
    grid = [float(v) for v in args.grid.split(",")]
    rows = dg.sensitivity_scan(ds, sim.two_wave_an(), "W1", Term(("Y1", "Y2")), grid,
                               McmcConfig(iterations=args.iters, seed=args.seed))
    print(dg.format_sensitivity(rows), end="")


if __name__ == "__main__":
    main()
