"""Break the explicit-scheme step bound into its per-axis contributions."""
import argparse

import numpy as np

from greenprocure.dynamics import theta_of_t
from greenprocure.hjb import GridSpec, check_cfl
from greenprocure.market import synthetic_scenario
from greenprocure.model import battery_limits


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cells", type=int, default=10)
    ap.add_argument("--preset", default="base")
    a = ap.parse_args()
    inputs = synthetic_scenario(a.preset, 0)
    grid = GridSpec(a.cells, a.cells, a.cells)
    m, ren, fad = inputs.model, inputs.renewable, inputs.fading
    h = 1.0 / a.cells
    _, dis = battery_limits(1.0, inputs.battery)
    t = np.linspace(0, inputs.horizon_hours, 2001)
    theta = np.asarray(theta_of_t(t, ren))
    p = np.asarray(ren.forecast(t))
    drift_r = np.max(np.abs(np.asarray(ren.forecast_deriv(t))) + theta * np.maximum(p, 1 - p)) / h
    terms = {
        "battery drift": max(dis, inputs.battery.p_charge_max) / m.a_max / h,
        "renewable drift": drift_r,
        "renewable diffusion": 2 * ren.alpha * ren.theta0 * 0.25 / h ** 2,
        "fading drift": fad.theta * max(fad.mu / fad.span, 1 - fad.mu / fad.span) / h,
        "fading diffusion": 2 * fad.theta / fad.span / h ** 2,
    }
    for k, v in terms.items():
        print(f"{k:20s} {v:8.2f} per hour -> {v * inputs.horizon_hours:8.0f} steps alone")
    print(f"{'upper bound (sum)':20s} {sum(terms.values()):8.2f} per hour")
    print("check_cfl min_nt:", check_cfl(grid, inputs)[2])


if __name__ == "__main__":
    main()
