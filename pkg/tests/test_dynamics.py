import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from greenprocure import dynamics as dyn
from greenprocure.model import ControlVector, ConstantCurve, FadingParams, RenewableParams, StateVector


def idle_policy(t, states):
    return np.zeros((states.shape[0], 4))


class _Idle:
    controls = staticmethod(idle_policy)


def test_noise_stream_independent_of_ensemble_size():
    small = dyn.normals(7, dyn.STREAM_DYNAMICS, 3, 10, 3)
    large = dyn.normals(7, dyn.STREAM_DYNAMICS, 3, 2500, 3)
    assert np.array_equal(small, large[:10])
    assert not np.array_equal(small, dyn.normals(8, dyn.STREAM_DYNAMICS, 3, 10, 3))
    assert not np.array_equal(small, dyn.normals(7, dyn.STREAM_DYNAMICS, 4, 10, 3))


def test_simulation_reproducible_for_fixed_seed(base_inputs):
    a = dyn.simulate_controlled_paths(_Idle(), 40, 30, 5, base_inputs)
    b = dyn.simulate_controlled_paths(_Idle(), 40, 30, 5, base_inputs)
    c = dyn.simulate_controlled_paths(_Idle(), 40, 30, 6, base_inputs)
    assert np.array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_callable_policy_adapter_matches_batch_policy(base_inputs):
    scalar = lambda t, x: ControlVector(0.0, 0.0, 0.0, 0.0)
    a = dyn.simulate_controlled_paths(scalar, 5, 10, 1, base_inputs)
    b = dyn.simulate_controlled_paths(_Idle(), 5, 10, 1, base_inputs)
    assert np.array_equal(a.states, b.states)


def test_euler_step_charges_battery_by_quarter(base_inputs):
    a_max = base_inputs.model.a_max
    x = StateVector(0.5, 0.0, 0.4)
    ctrl = ControlVector(p_a=-0.25 * a_max, p_f=0.0, p_tx=0.0, p_s=0.0)
    new = dyn.em_step(0.0, x, ctrl, 1.0, np.zeros(3), base_inputs)
    assert new.a == pytest.approx(0.75, abs=1e-12)


def test_euler_step_keeps_state_in_unit_cube(base_inputs):
    x = StateVector(0.95, 0.99, 0.99)
    ctrl = ControlVector(p_a=-1e9, p_f=0.0, p_tx=0.0, p_s=0.0)
    new = dyn.em_step(0.0, x, ctrl, 0.5, np.array([0.0, 50.0, 50.0]), base_inputs)
    assert 0.0 <= new.a <= 1.0 and 0.0 <= new.r <= 1.0 and 0.0 <= new.chi <= 1.0
    with pytest.raises(ValueError):
        dyn.em_step(0.0, x, ctrl, 0.0, np.zeros(3), base_inputs)


def test_fading_drift_reverts_to_scaled_mean(base_inputs):
    fad = base_inputs.fading
    target = fad.mu / fad.span
    x_lo = StateVector(0.5, 0.5, target * 0.5)
    x_hi = StateVector(0.5, 0.5, min(1.0, target * 1.5))
    zero = ControlVector(0.0, 0.0, 0.0, 0.0)
    assert dyn.drift_vector(0.0, x_lo, zero, base_inputs)[2] > 0
    assert dyn.drift_vector(0.0, x_hi, zero, base_inputs)[2] < 0
    assert dyn.diffusion_vector(0.0, StateVector(0.5, 0.0, 0.0), base_inputs)[1:] == pytest.approx([0.0, 0.0])


def test_bridge_returns_stored_states_exactly(base_inputs):
    ens = dyn.simulate_controlled_paths(_Idle(), 3, 16, 2, base_inputs)
    for n in (0, 5, 16):
        got = dyn.brownian_bridge_point(ens.path(1), ens.times[n])
        assert np.array_equal(got.as_array(), ens.states[1, n])


def test_bridge_midpoint_mean_and_variance(base_inputs):
    ens = dyn.simulate_controlled_paths(_Idle(), 1, 8, 3, base_inputs)
    times, states = ens.path(0)
    t0, t1 = times[2], times[3]
    tq = 0.5 * (t0 + t1)
    mean = dyn.brownian_bridge_point((times, states), tq)
    assert np.allclose(mean.as_array(), 0.5 * (states[2] + states[3]))
    rng = np.random.default_rng(0)
    draws = np.array([dyn.brownian_bridge_point((times, states), tq, rng, base_inputs).as_array()
                      for _ in range(4000)])
    g = dyn.diffusion_batch(t0, states[2][None, :], base_inputs)[0]
    expected_var = 2.0 * g * (tq - t0) * (t1 - tq) / (t1 - t0)
    # the renewable coordinate is interior with positive variance; sample variance within 10 %
    assert draws[:, 1].var() == pytest.approx(expected_var[1], rel=0.1)
    assert draws[:, 0].var() == 0.0
    with pytest.raises(ValueError):
        dyn.brownian_bridge_point((times, states), times[-1] + 1.0)


def test_initial_law_keeps_a0_and_samples_shifted_gamma(base_inputs):
    x = dyn.sample_initial_states(0.3, 20000, 4, base_inputs)
    assert np.all(x[:, 0] == 0.3)
    fad = base_inputs.fading
    # KS p-values over independent seeds should be uniform: at most 3 of 20 below 1 % (binomial tail < 1e-3)
    pvals = [stats.kstest(dyn.sample_initial_fading(5000, s, fad), stats.gamma(fad.mu, loc=fad.xi_floor).cdf).pvalue
             for s in range(20)]
    assert sum(p < 0.01 for p in pvals) <= 3
    assert np.all((x[:, 1:] >= 0) & (x[:, 1:] <= 1))
    with pytest.raises(ValueError):
        dyn.sample_initial_states(1.5, 2, 0, base_inputs)


def test_point_mass_initial_fading(base_inputs):
    fad = replace(base_inputs.fading, xi0=2.0)
    assert np.all(dyn.sample_initial_fading(10, 0, fad) == 2.0)


def test_zero_spinup_starts_renewable_at_forecast(base_inputs):
    ren = replace(base_inputs.renewable, varsigma=0.0)
    inp = replace(base_inputs, renewable=ren)
    r = dyn.sample_initial_renewable(50, 0, inp)
    assert np.all(r == pytest.approx(float(np.clip(ren.forecast(0.0), 0, 1))))


def test_noise_free_renewable_tracks_forecast():
    ren = RenewableParams(forecast=lambda t: 0.5 + 0.2 * np.sin(np.asarray(t) * math.pi / 12),
                          forecast_deriv=lambda t: 0.2 * math.pi / 12 * np.cos(np.asarray(t) * math.pi / 12),
                          alpha=0.0, varsigma=0.0)
    from greenprocure.model import ScenarioInputs
    inp = ScenarioInputs(renewable=ren, fading=FadingParams(xi_floor=0.5, chi_bar=6.8))
    summ = dyn.simulate_renewable(inp, 20, 4800, 0, record_every=4800)
    assert np.all(summ.std < 1e-12)
    assert summ.mean[-1] == pytest.approx(float(ren.forecast(48.0)), abs=2e-3)


def test_fading_mean_stays_at_invariant_mean(base_inputs):
    fad = base_inputs.fading
    summ = dyn.simulate_fading(fad, 4000, 480, 48.0, seed=9, record_every=48)
    se = summ.std[-1] / math.sqrt(4000)
    assert abs(summ.mean[-1] - (fad.xi_floor + fad.mu)) < 4 * se
    assert np.all(summ.final >= fad.xi_floor)


def test_fading_from_point_mass_relaxes_to_shifted_gamma(base_inputs):
    fad = base_inputs.fading
    summ = dyn.simulate_fading(fad, 5000, 2400, 48.0, seed=3, xi0=fad.xi_floor + 8.0, record_every=2400)
    assert stats.kstest(summ.final, stats.gamma(fad.mu, loc=fad.xi_floor).cdf).pvalue > 0.01


def test_scaled_and_unscaled_fading_agree(base_inputs):
    fad = base_inputs.fading
    chi0 = 0.4
    xi_paths = dyn.simulate_fading(fad, 200, 100, 10.0, seed=1, xi0=float(fad.to_xi(chi0)), record_every=100).final
    chi_paths = dyn.simulate_scaled_fading(fad, 200, 100, 10.0, seed=1, chi0=chi0)
    assert np.allclose(fad.to_xi(chi_paths), xi_paths, rtol=1e-10, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95), st.floats(0.05, 0.95), st.floats(0.0, 0.95))
def test_diffusion_nonnegative_and_vanishes_on_boundaries(r, chi, a):
    inp_r = RenewableParams()
    from greenprocure.model import ScenarioInputs
    inp = ScenarioInputs(renewable=inp_r, fading=FadingParams(xi_floor=0.5, chi_bar=6.8))
    g = dyn.diffusion_vector(1.0, StateVector(a, r, chi), inp)
    assert g[0] == 0.0 and g[1] > 0 and g[2] > 0
    for edge in (0.0, 1.0):
        assert dyn.diffusion_vector(1.0, StateVector(a, edge, chi), inp)[1] == 0.0


def test_path_ensemble_csv(tmp_path, base_inputs):
    ens = dyn.simulate_controlled_paths(_Idle(), 2, 3, 0, base_inputs)
    out = tmp_path / "paths.csv"
    ens.to_csv(out, provenance="test")
    lines = out.read_text().splitlines()
    assert lines[0] == "# test"
    assert lines[1].startswith("time,path_id,a,r,chi,p_a")
    assert len(lines) == 2 + 2 * 4


def test_theta_bounded_below_by_base_rate():
    ren = RenewableParams(forecast=ConstantCurve(0.0005))
    assert dyn.theta_of_t(0.0, ren) >= ren.theta0
