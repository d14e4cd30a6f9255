"""Grid-convergence study of the backward sweep on a problem whose value depends on (t, chi) only.

Renewable infeed and battery power are switched off, so the cost-to-go is the
linear terminal value in a plus a smooth function of (t, chi).  Errors are
measured against a fine reference in chi."""
import argparse
import time
from dataclasses import replace

import numpy as np

from greenprocure.hjb import GridSpec, MultiplierFunction, solve_hjb
from greenprocure.market import synthetic_scenario
from greenprocure.model import BatteryCharacteristic


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cells", type=int, nargs="+", default=[4, 8, 16, 32])
    ap.add_argument("--reference", type=int, default=64)
    a = ap.parse_args()
    base = synthetic_scenario("base", 0)
    inputs = replace(base, model=replace(base.model, p_r_max=0.0), battery=BatteryCharacteristic(0.0, 0.0))
    lam = MultiplierFunction.zero(inputs.horizon_hours)
    ref = solve_hjb(lam, GridSpec(2, 2, a.reference), inputs).value0[1, 1, :]
    prev = None
    print("cells  n_t  max_error  ratio  seconds")
    for n in a.cells:
        if a.reference % n:
            raise SystemExit(f"{n} does not divide the reference {a.reference}")
        t0 = time.perf_counter()
        axes = min(n, 8)   # a and r carry no error; keep them moderate on fine chi grids
        fld = solve_hjb(lam, GridSpec(axes, axes, n), inputs)
        err = float(np.max(np.abs(fld.value0[axes // 2] - ref[None, :: a.reference // n])))
        ratio = f"{prev / err:.3f}" if prev else "-"
        print(f"{n:5d} {fld.grid.n_t:5d} {err:10.4g} {ratio:>6} {time.perf_counter() - t0:8.1f}")
        prev = err


if __name__ == "__main__":
    main()
