"""Benchmark problems bracketing the dual optimum, plus energy accounting."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import hamiltonian as ham
from .dynamics import PathEnsemble
from .dynamics import simulate_controlled_paths
from .hjb import CostToGoField, FieldPolicy, GridSpec, MultiplierFunction, dual_value, solve_hjb
from .model import ScenarioInputs, terminal_cost, traffic_count


class InfeasibleReference(ValueError):
    """The QoS-pinned transmit power exceeds the per-user power budget somewhere."""


def forced_transmit_power(xi, inputs: ScenarioInputs):
    """Transmit power at which the outage proportion equals phi_th exactly."""
    consts = ham.pack_constants(inputs)
    return consts[ham.D5_BASE] / np.asarray(xi, dtype=float)


def check_as_feasibility(grid: GridSpec, inputs: ScenarioInputs, n_times: int = 2001) -> None:
    """Raise InfeasibleReference naming the (t, chi) region where the forced power is above P_tx_max / N_u(t)."""
    T = inputs.horizon_hours
    times = np.linspace(0.0, T, n_times)
    chi = np.linspace(0.0, 1.0, grid.n_chi + 1)
    need = forced_transmit_power(inputs.fading.to_xi(chi), inputs)
    n_u = np.atleast_1d(traffic_count(times, inputs.traffic))
    bad = n_u[:, None] * need[None, :] > inputs.model.p_tx_max * (1.0 + 1e-12)
    if bad.any():
        ti, ci = np.nonzero(bad)
        raise InfeasibleReference(
            f"almost-sure QoS infeasible for t in [{times[ti.min()]:.3g}, {times[ti.max()]:.3g}] h and "
            f"chi in [{chi[ci.min()]:.3g}, {chi[ci.max()]:.3g}] (required per-user power up to "
            f"{need[ci].max():.3g} W vs budget {inputs.model.p_tx_max / n_u[ti].max():.3g} W); "
            "raise p_tx_max or phi_th")


def solve_unconstrained(grid: GridSpec, inputs: ScenarioInputs, seed: int = 0, n_init_samples: int = 4096,
                        store_values: bool = False):
    """Zero multiplier: no QoS penalty. Returns (field, theta, stderr)."""
    fld = solve_hjb(MultiplierFunction.zero(inputs.horizon_hours), grid, inputs, store_values=store_values)
    theta, se = dual_value(fld, inputs.a0, inputs, n_init_samples, seed)
    return fld, theta, se


def solve_as_constrained(grid: GridSpec, inputs: ScenarioInputs, seed: int = 0, n_init_samples: int = 4096,
                         store_values: bool = False):
    """Transmit power pinned to the QoS threshold everywhere. Returns (field, theta, stderr)."""
    check_as_feasibility(grid, inputs)
    fld = solve_hjb(MultiplierFunction.zero(inputs.horizon_hours), grid, inputs, store_values=store_values,
                    forced_qos=True)
    theta, se = dual_value(fld, inputs.a0, inputs, n_init_samples, seed)
    return fld, theta, se


# ---------------------------------------------------------------------------
# energy accounting

@dataclass
class EnergyBalance:
    consumed: float
    battery: float
    bought: float
    sold: float
    consumed_se: float
    battery_se: float
    bought_se: float
    sold_se: float
    hours: float

    def as_dict(self):
        return asdict(self)


def energy_per_path(ens: PathEnsemble, hours: float = 24.0) -> dict[str, np.ndarray]:
    """Energy (Wh) of every path over [0, hours] by the trapezoid rule, keyed like EnergyBalance."""
    if ens.controls is None:
        raise ValueError("ensemble carries no controls")
    mask = ens.times <= hours + 1e-12
    t = ens.times[mask]
    u = ens.controls[:, mask]
    series = {"consumed": u[..., 0] + u[..., 1], "battery": u[..., 0], "bought": u[..., 1], "sold": u[..., 3]}
    return {name: np.trapezoid(s, t, axis=1) for name, s in series.items()}


def energy_balance(ens: PathEnsemble, inputs: ScenarioInputs, hours: float = 24.0) -> EnergyBalance:
    """Expected energies (Wh) over [0, hours], averaged over paths.

    consumed = p_a + p_f (base-station demand), battery = p_a, bought = p_f, sold = p_s."""
    out = {}
    m = ens.m_paths
    for name, per_path in energy_per_path(ens, hours).items():
        out[name] = float(per_path.mean())
        out[name + "_se"] = float(per_path.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return EnergyBalance(hours=hours, **out)


# ---------------------------------------------------------------------------
# policy evaluation

class _RecordingPolicy:
    """Feedback policy of a solved field that keeps the running cost of every call."""

    def __init__(self, field_: CostToGoField, inputs: ScenarioInputs):
        self.inner = FieldPolicy(field_, inputs)
        self.running = []

    def controls(self, t, states):
        res = self.inner.evaluate(t, states)
        self.running.append(res[:, 6].copy())
        return np.column_stack([res[:, 3], res[:, 1], res[:, 0], res[:, 2]])


def policy_cost(field_: CostToGoField, inputs: ScenarioInputs, m_paths: int = 1000, n_steps: int | None = None,
                seed: int = 0):
    """Monte Carlo estimate of the Lagrangian cost of the field's feedback policy.

    Each path accumulates running cost by the left-endpoint rule on the
    Euler-Maruyama grid and adds the terminal battery value.  Returns
    (mean, stderr, ensemble)."""
    n_steps = n_steps or field_.grid.n_t
    pol = _RecordingPolicy(field_, inputs)
    ens = simulate_controlled_paths(pol, m_paths, n_steps, seed, inputs)
    dt = inputs.horizon_hours / n_steps
    per_path = dt * np.sum(np.array(pol.running[:n_steps]), axis=0) + terminal_cost(ens.states[:, -1, 0], inputs.model)
    se = float(per_path.std(ddof=1) / math.sqrt(m_paths)) if m_paths > 1 else 0.0
    return float(per_path.mean()), se, ens


# ---------------------------------------------------------------------------
# comparison

@dataclass
class ReferenceReport:
    theta_unconstrained: float
    theta_dual: float
    theta_as: float
    se_unconstrained: float
    se_dual: float
    se_as: float
    budget_unconstrained: float
    budget_dual: float
    budget_as: float
    ordering_holds: bool = False
    dual_converged: bool | None = None
    dual_norm: float | None = None

    @property
    def lower_tolerance(self) -> float:
        """Allowed excess of theta_unconstrained over theta_dual."""
        return 3.0 * math.hypot(self.se_unconstrained, self.se_dual) + max(self.budget_unconstrained, self.budget_dual)

    @property
    def upper_tolerance(self) -> float:
        """Allowed excess of theta_dual over theta_as."""
        return 3.0 * math.hypot(self.se_dual, self.se_as) + max(self.budget_dual, self.budget_as)

    def check(self) -> bool:
        self.ordering_holds = (self.theta_unconstrained <= self.theta_dual + self.lower_tolerance
                               and self.theta_dual <= self.theta_as + self.upper_tolerance)
        return self.ordering_holds

    def as_dict(self):
        d = asdict(self)
        d["lower_tolerance"] = self.lower_tolerance
        d["upper_tolerance"] = self.upper_tolerance
        return d

    def to_json(self, path, provenance: str | None = None):
        d = self.as_dict()
        if provenance:
            d["provenance"] = provenance
        with open(path, "w") as fh:
            json.dump(d, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path, provenance: str | None = None):
        with open(path, "w", newline="") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            wr = csv.writer(fh)
            wr.writerow(["problem", "theta", "stderr", "grid_budget"])
            wr.writerow(["unconstrained", repr(self.theta_unconstrained), repr(self.se_unconstrained),
                         repr(self.budget_unconstrained)])
            wr.writerow(["chance_dual", repr(self.theta_dual), repr(self.se_dual), repr(self.budget_dual)])
            wr.writerow(["almost_sure", repr(self.theta_as), repr(self.se_as), repr(self.budget_as)])


class OrderingViolation(AssertionError):
    pass


def richardson_budget(fine: float, coarse: float) -> float:
    """First-order error estimate of the fine value from a grid with doubled spacings."""
    return abs(fine - coarse)


def coarsened(grid: GridSpec) -> GridSpec:
    return GridSpec(max(2, grid.n_a // 2), max(2, grid.n_r // 2), max(2, grid.n_chi // 2), None,
                    grid.horizon, grid.chi_bar)


def grid_budget(inputs: ScenarioInputs, grid: GridSpec, fine_value: float, multiplier: MultiplierFunction,
                forced: bool = False, seed: int = 0, n_init: int = 4096) -> float:
    """Richardson budget of one problem: fine value against the same problem on the halved grid."""
    coarse = dual_value(solve_hjb(multiplier, coarsened(grid), inputs, forced_qos=forced), inputs.a0, inputs,
                        n_init, seed)[0]
    return richardson_budget(fine_value, coarse)


def compare_references(inputs: ScenarioInputs, grid: GridSpec, seed: int = 0, settings=None, dual_result=None,
                       with_budget: bool = True, raise_on_violation: bool = True) -> ReferenceReport:
    """Solve both references (and the dual unless a result is passed) and check the ordering."""
    from .dual import SolverSettings, optimize_dual
    settings = settings or SolverSettings()
    n_init = settings.n_init_samples
    zero = MultiplierFunction.zero(inputs.horizon_hours)
    _, th_u, se_u = solve_unconstrained(grid, inputs, seed, n_init)
    _, th_as, se_as = solve_as_constrained(grid, inputs, seed, n_init)
    if dual_result is None:
        dual_result = optimize_dual(settings, inputs, seed, grid)
    b_u = b_d = b_as = 0.0
    if with_budget:
        b_u = grid_budget(inputs, grid, th_u, zero, False, seed, n_init)
        b_d = grid_budget(inputs, grid, dual_result.value, dual_result.multiplier, False, seed, n_init)
        b_as = grid_budget(inputs, grid, th_as, zero, True, seed, n_init)
    rep = ReferenceReport(th_u, dual_result.value, th_as, se_u, dual_result.value_se, se_as, b_u, b_d, b_as,
                          dual_converged=dual_result.converged, dual_norm=float(dual_result.norm))
    if not rep.check() and raise_on_violation:
        raise OrderingViolation(
            f"ordering violated: unconstrained={th_u:.6g} dual={rep.theta_dual:.6g} almost_sure={th_as:.6g} "
            f"(stderrs {se_u:.2g}, {rep.se_dual:.2g}, {se_as:.2g}; grid budgets {b_u:.3g}, {b_d:.3g}, {b_as:.3g})")
    return rep
