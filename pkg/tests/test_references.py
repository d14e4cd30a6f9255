import json
import math
from dataclasses import replace

import numpy as np
import pytest

from greenprocure import references as ref
from greenprocure.dynamics import PathEnsemble
from greenprocure.hjb import GridSpec, MultiplierFunction, dual_value, solve_hjb
from greenprocure.model import outage_proportion, qos_threshold_power


def test_forced_power_matches_gaussian_closed_form(base_inputs):
    m, dist, phi = base_inputs.model, base_inputs.user_dist, base_inputs.qos.phi_th
    xi = np.array([0.6, 1.0, 3.7])
    # Gaussian users: phi = exp(-rho^2 / (2 sigma^2)), rho^eta = p xi kappa / sigma_noise
    rho = math.sqrt(-2.0 * dist.sigma_u ** 2 * math.log(phi))
    expected = rho ** m.eta * m.snr_linear_noise / (xi * m.kappa)
    assert np.allclose(ref.forced_transmit_power(xi, base_inputs), expected, rtol=1e-12)
    assert np.allclose(ref.forced_transmit_power(xi, base_inputs),
                       [qos_threshold_power(x, phi, dist, m) for x in xi], rtol=1e-12)


@pytest.mark.parametrize("xi", [0.55, 1.0, 2.5, 6.8])
def test_forced_power_sits_on_threshold(base_inputs, xi):
    p = float(ref.forced_transmit_power(xi, base_inputs))
    phi = outage_proportion(p, xi, base_inputs.user_dist, base_inputs.model)
    assert phi == pytest.approx(base_inputs.qos.phi_th, rel=1e-12)


def test_infeasible_almost_sure_problem_reports_region(base_inputs, small_grid):
    weak = replace(base_inputs, model=replace(base_inputs.model, p_tx_max=1.0))
    with pytest.raises(ref.InfeasibleReference, match="chi in"):
        ref.solve_as_constrained(small_grid, weak)


def test_base_preset_almost_sure_problem_feasible(base_inputs, small_grid):
    ref.check_as_feasibility(small_grid, base_inputs)


def test_unconstrained_equals_zero_multiplier_solve(base_inputs, small_grid):
    fld, theta, se = ref.solve_unconstrained(small_grid, base_inputs, seed=3, n_init_samples=512)
    direct = solve_hjb(MultiplierFunction.zero(48.0), small_grid, base_inputs)
    assert np.array_equal(fld.value0, direct.value0)
    assert (theta, se) == dual_value(direct, base_inputs.a0, base_inputs, 512, 3)


def test_almost_sure_bounds_unconstrained(base_inputs, small_grid):
    _, th_u, _ = ref.solve_unconstrained(small_grid, base_inputs, n_init_samples=512)
    _, th_as, _ = ref.solve_as_constrained(small_grid, base_inputs, n_init_samples=512)
    assert th_u <= th_as


def _synthetic_ensemble(values, hours=4.0, n=8):
    t = np.linspace(0.0, hours, n + 1)
    m = len(values)
    states = np.zeros((m, n + 1, 3))
    controls = np.zeros((m, n + 1, 4))
    for i, (p_a, p_f, p_s) in enumerate(values):
        controls[i, :, 0] = p_a
        controls[i, :, 1] = p_f
        controls[i, :, 3] = p_s
    return PathEnsemble(times=t, states=states, seed=0, controls=controls)


def test_energy_balance_on_constant_controls(base_inputs):
    ens = _synthetic_ensemble([(10.0, 5.0, 1.0), (20.0, 15.0, 3.0)])
    bal = ref.energy_balance(ens, base_inputs, hours=4.0)
    assert bal.battery == pytest.approx(60.0)
    assert bal.bought == pytest.approx(40.0)
    assert bal.consumed == pytest.approx(100.0)
    assert bal.sold == pytest.approx(8.0)
    assert bal.consumed_se == pytest.approx(np.std([60.0, 140.0], ddof=1) / math.sqrt(2))


def test_energy_balance_window_and_linear_ramp(base_inputs):
    t = np.linspace(0.0, 8.0, 17)
    controls = np.zeros((1, 17, 4))
    controls[0, :, 1] = 3.0 * t
    ens = PathEnsemble(times=t, states=np.zeros((1, 17, 3)), seed=0, controls=controls)
    bal = ref.energy_balance(ens, base_inputs, hours=4.0)
    assert bal.bought == pytest.approx(1.5 * 16.0)
    assert bal.bought_se == 0.0


def test_energy_balance_needs_controls(base_inputs):
    ens = PathEnsemble(times=np.array([0.0, 1.0]), states=np.zeros((1, 2, 3)), seed=0)
    with pytest.raises(ValueError):
        ref.energy_balance(ens, base_inputs)


def test_report_ordering_and_serialization(tmp_path):
    rep = ref.ReferenceReport(-10.0, -9.0, 5.0, 0.1, 0.1, 0.1, 0.0, 0.0, 0.0)
    assert rep.check() and rep.ordering_holds
    rep.to_json(tmp_path / "r.json", provenance="p")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data["provenance"] == "p" and data["lower_tolerance"] == pytest.approx(3 * math.hypot(0.1, 0.1))
    rep.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "problem,theta,stderr,grid_budget"
    bad = ref.ReferenceReport(-8.0, -9.0, 5.0, 0.1, 0.1, 0.1, 0.0, 0.0, 0.0)
    assert not bad.check()
    slack = ref.ReferenceReport(-8.0, -9.0, 5.0, 0.1, 0.1, 0.1, 1.5, 0.0, 0.0)
    assert slack.check()


def test_richardson_budget_and_coarsening():
    assert ref.richardson_budget(1.0, 1.3) == pytest.approx(0.3)
    g = ref.coarsened(GridSpec(10, 8, 3))
    assert (g.n_a, g.n_r, g.n_chi) == (5, 4, 2)


def test_compare_references_on_small_grid(base_inputs, small_grid):
    from greenprocure.dual import SolverSettings
    st_ = SolverSettings(m_sg=100, n_init_samples=256, ell_max=2, max_iter=2, n_lmbm_iter=2)
    rep = ref.compare_references(base_inputs, small_grid, settings=st_, with_budget=False,
                                 raise_on_violation=False)
    assert rep.theta_unconstrained <= rep.theta_as
    assert rep.dual_converged in (True, False)


def test_per_path_energies_average_to_balance(base_inputs):
    ens = _synthetic_ensemble([(10.0, 5.0, 1.0), (20.0, 15.0, 3.0), (0.0, 2.0, 0.0)])
    per = ref.energy_per_path(ens, hours=4.0)
    bal = ref.energy_balance(ens, base_inputs, hours=4.0)
    assert list(per["bought"]) == pytest.approx([20.0, 60.0, 8.0])
    for key in ("consumed", "battery", "bought", "sold"):
        assert per[key].mean() == pytest.approx(getattr(bal, key))
