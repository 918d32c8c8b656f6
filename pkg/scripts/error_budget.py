#!/usr/bin/env python3
"""Break the absolute phonon-scale uncertainty into its inputs.

Each line switches on one input of the budget alone, then all together,
and prints the resulting 95 % half-width on ``A_ph``. With ``--noise``
the run-to-run scatter of a regenerated replica is reported too.
"""

import argparse
import sys
from dataclasses import fields, replace

from optocal.pipeline import UncertaintyBudget, absolute_scale_uncertainty, run_calibration
from optocal.synth import generate_dataset, load_bundled


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--noise", action="store_true", help="also report drift-limited scatter")
    args = ap.parse_args(argv)

    full = UncertaintyBudget()
    zero = UncertaintyBudget(**{f.name: 0.0 for f in fields(UncertaintyBudget)})
    print(f"{'input':>16s}  {'95% half-width':>14s}")
    for f in fields(UncertaintyBudget):
        one = replace(zero, **{f.name: getattr(full, f.name)})
        s = absolute_scale_uncertainty(one, args.samples, args.seed)
        print(f"{f.name:>16s}  {100 * s.relative_half_width_95:13.1f}%")
    s = absolute_scale_uncertainty(full, args.samples, args.seed)
    print(f"{'all':>16s}  {100 * s.relative_half_width_95:13.1f}%")

    if args.noise:
        scenario = load_bundled()
        for drift in (0.0, 0.05, 0.10, 0.20):
            sc = scenario.with_noise(replace(scenario.noise, drift_rms=drift))
            rep = run_calibration(generate_dataset(sc))
            print(f"drift rms {drift:4.2f}: run-to-run scatter +-{100 * rep.reproducibility_95:.1f}%")
    return 0


if __name__ == "__main__":
    sys.exit(main())
