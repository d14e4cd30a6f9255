"""Compare the two SSM step rules on the base preset: final level, subgradient norm, HJB solves."""
import argparse
import time

from greenprocure.dual import SolverSettings, optimize_dual
from greenprocure.hjb import GridSpec
from greenprocure.market import synthetic_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cells", type=int, default=5)
    ap.add_argument("--ell-max", type=int, default=8)
    ap.add_argument("--c-ssm", type=float, nargs="*", default=[None, 0.1, 0.5])
    a = ap.parse_args()
    inputs = synthetic_scenario("base", 0)
    grid = GridSpec(a.cells, a.cells, a.cells)
    runs = [("adaptive", None)] + [("normalized", c) for c in a.c_ssm]
    print("rule        c_ssm   level  norm     solves  dual_value  seconds")
    for rule, c in runs:
        t0 = time.perf_counter()
        res = optimize_dual(SolverSettings(step_rule=rule, c_ssm=c, ell_max=a.ell_max), inputs, 0, grid)
        print(f"{rule:10s} {str(c):>6s} {res.multiplier.level:6d} {res.norm:8.4f} {res.n_solves:7d} "
              f"{res.value:11.3f} {time.perf_counter() - t0:8.1f}", flush=True)


if __name__ == "__main__":
    main()
