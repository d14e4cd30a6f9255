import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from greenprocure.model import (
    BatteryCharacteristic, ControlVector, FadingParams, GaussianUsers, ModelParams, QoSParams, ScenarioInputs,
    StateVector, TrafficProfile, UniformUsers, battery_limits, fading_floor_for, outage_proportion,
    power_balance_residual, qos_threshold_power, running_cost, snr_db, terminal_cost, traffic_count,
)
from greenprocure.model import ConstantCurve, PriceCurves

PARAMS = ModelParams()
PROFILE = TrafficProfile()


# --- traffic -----------------------------------------------------------------

@pytest.mark.parametrize("t, expected", [(3.0, 100.0), (9.0, 2000.0), (0.0, 250.0), (21.0, 2000.0)])
def test_traffic_profile_reference_points(t, expected):
    assert traffic_count(t, PROFILE) == pytest.approx(expected, rel=1e-12)


@given(st.floats(0, 96))
def test_traffic_within_bounds_and_periodic(t):
    n = traffic_count(t, PROFILE)
    assert 100.0 <= n <= 2000.0
    assert traffic_count(t + 24.0, PROFILE) == pytest.approx(n, rel=1e-9, abs=1e-9)


def test_traffic_vectorized_matches_scalar():
    ts = np.linspace(0, 48, 97)
    vec = traffic_count(ts, PROFILE)
    assert np.allclose(vec, [traffic_count(t, PROFILE) for t in ts])


# --- outage ------------------------------------------------------------------

def _gaussian_outage_by_integration(p_tx, xi, sigma_u, params):
    """Fraction of an isotropic Gaussian population outside the coverage disc, by 2-D quadrature."""
    radius = (p_tx * xi * params.kappa / params.snr_linear_noise) ** (1.0 / params.eta)
    dens = lambda y, x: np.exp(-(x * x + y * y) / (2 * sigma_u ** 2)) / (2 * np.pi * sigma_u ** 2)
    inside, _ = integrate.dblquad(dens, -radius, radius, lambda x: -math.sqrt(max(radius ** 2 - x ** 2, 0.0)),
                                  lambda x: math.sqrt(max(radius ** 2 - x ** 2, 0.0)), epsabs=1e-13, epsrel=1e-11)
    return 1.0 - inside


def test_zero_power_means_full_outage():
    assert outage_proportion(0.0, 2.0, GaussianUsers(300.0), PARAMS) == 1.0


def test_gaussian_outage_reference_value_matches_quadrature():
    prod = 0.18 * math.log(1000.0)
    dist = GaussianUsers(300.0)
    closed = outage_proportion(prod, 1.0, dist, PARAMS)
    assert closed == pytest.approx(1.0e-3, rel=2e-3)
    assert closed == pytest.approx(_gaussian_outage_by_integration(prod, 1.0, 300.0, PARAMS), rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-3, 5.0), st.floats(0.1, 8.0), st.floats(50.0, 800.0))
def test_gaussian_outage_matches_quadrature(p_tx, xi, sigma_u):
    closed = outage_proportion(p_tx, xi, GaussianUsers(sigma_u), PARAMS)
    numeric = _gaussian_outage_by_integration(p_tx, xi, sigma_u, PARAMS)
    assert closed == pytest.approx(numeric, abs=1e-8, rel=1e-6)


def test_uniform_outage_matches_monte_carlo_over_disc():
    area = math.pi * 400.0 ** 2
    dist = UniformUsers(area)
    rng = np.random.default_rng(5)
    n = 400_000
    rad = 400.0 * np.sqrt(rng.uniform(size=n))
    p_tx, xi = 0.5, 1.3
    snr = p_tx * xi * PARAMS.kappa * rad ** (-PARAMS.eta) / PARAMS.sigma0
    mc = np.mean(10 * np.log10(snr) < PARAMS.snr_th)
    se = math.sqrt(mc * (1 - mc) / n)
    assert abs(outage_proportion(p_tx, xi, dist, PARAMS) - mc) < 4 * se + 1e-12


def test_uniform_outage_clamped_at_zero():
    dist = UniformUsers(100.0)
    assert outage_proportion(100.0, 5.0, dist, PARAMS) == 0.0


@given(st.floats(1e-4, 10.0), st.floats(1e-4, 10.0), st.floats(0.05, 8.0))
def test_outage_monotone_decreasing_in_power(p1, p2, xi):
    lo, hi = sorted((p1, p2))
    dist = GaussianUsers(300.0)
    assert outage_proportion(hi, xi, dist, PARAMS) <= outage_proportion(lo, xi, dist, PARAMS)


@given(st.floats(0.05, 8.0), st.floats(1e-5, 0.5), st.sampled_from([2.0, 3.0, 4.0]))
def test_threshold_power_inverts_outage(xi, phi_th, eta):
    params = ModelParams(eta=eta)
    for dist in (GaussianUsers(300.0), UniformUsers(math.pi * 500.0 ** 2)):
        p = qos_threshold_power(xi, phi_th, dist, params)
        assert outage_proportion(p, xi, dist, params) == pytest.approx(phi_th, rel=1e-10)


def test_outage_rejects_negative_power_and_low_fading():
    with pytest.raises(ValueError):
        outage_proportion(-1.0, 1.0, GaussianUsers(), PARAMS)
    with pytest.raises(ValueError):
        outage_proportion(1.0, 0.2, GaussianUsers(), PARAMS, xi_floor=0.5)


def test_fading_floor_and_cap_of_base_preset():
    floor = fading_floor_for(1e-3, PROFILE, GaussianUsers(300.0), PARAMS)
    assert floor == pytest.approx(0.54727, abs=5e-6)
    fad = FadingParams.with_quantile_cap(xi_floor=floor)
    assert fad.chi_bar == pytest.approx(0.54727 + stats.gamma.ppf(0.95, 3.0), abs=5e-6)
    assert fad.chi_bar == pytest.approx(6.84306, abs=5e-5)
    # at peak load and full power the floor yields half the outage threshold
    assert outage_proportion(PARAMS.p_tx_max / PROFILE.n_max, floor, GaussianUsers(300.0), PARAMS) == \
        pytest.approx(5e-4, rel=1e-10)


# --- SNR, power balance ------------------------------------------------------

def test_snr_reference_values():
    assert snr_db(PARAMS.sigma0, 1.0, 1.0, PARAMS) == pytest.approx(0.0, abs=1e-12)
    assert snr_db(1.0, 1.0, 1.0, PARAMS) == pytest.approx(75.0, abs=1e-3)
    assert snr_db(1.0, 1.0, 10.0, PARAMS) - snr_db(1.0, 1.0, 20.0, PARAMS) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(ValueError):
        snr_db(1.0, 1.0, 0.0, PARAMS)


def test_power_balance_reference_values():
    prof = TrafficProfile(n_min=100.0, n_max=100.0)
    assert power_balance_residual(ControlVector(0, 0, 0, 0), 0.0, PARAMS, prof) == pytest.approx(-71.5)
    assert power_balance_residual(ControlVector(0, 71.5, 0, 0), 0.0, PARAMS, prof) == pytest.approx(0.0)
    assert power_balance_residual(ControlVector(100, 0, 1, 0), 0.0, PARAMS, prof) == pytest.approx(-755.5)


# --- battery -----------------------------------------------------------------

def test_battery_limits_reference_values():
    char = BatteryCharacteristic()
    assert battery_limits(0.0, char)[1] == 0.0
    assert battery_limits(1.0, char)[0] == 0.0
    assert battery_limits(0.5, char) == (7.5e3, 3.0e4)
    with pytest.raises(ValueError):
        battery_limits(1.2, char)


@given(st.floats(0, 1), st.floats(0, 1))
def test_battery_limits_monotone_in_charge(a1, a2):
    lo, hi = sorted((a1, a2))
    char = BatteryCharacteristic()
    c_lo, d_lo = battery_limits(lo, char)
    c_hi, d_hi = battery_limits(hi, char)
    assert c_hi <= c_lo and d_hi >= d_lo
    assert 0 <= c_lo <= 7.5e3 and 0 <= d_hi <= 3e4


# --- costs -------------------------------------------------------------------

def _inputs(w=0.5, k_net=0.0, k_b=0.0, eps=0.1):
    flat = TrafficProfile(n_min=500.0, n_max=500.0)
    return ScenarioInputs(model=ModelParams(w=w), qos=QoSParams(epsilon=eps), traffic=flat,
                          prices=PriceCurves(ConstantCurve(k_b), ConstantCurve(k_b), ConstantCurve(k_net)),
                          fading=FadingParams(xi_floor=0.5, chi_bar=6.8))


def test_running_cost_pure_service_revenue():
    inp = _inputs(w=1.0, k_net=0.01)
    huge = 1e6
    cost = running_cost(0.0, StateVector(0.5, 0.5, 0.5), ControlVector(0, 0, huge, 0), 0.0, inp)
    assert cost == pytest.approx(-0.01 * 500.0, rel=1e-12)


def test_running_cost_environmental_term():
    inp = _inputs(w=0.0)
    cost = running_cost(0.0, StateVector(0.5, 0.5, 0.5), ControlVector(0, 10.0, 1e6, 0), 0.0, inp)
    assert cost == pytest.approx(0.014, rel=1e-12)


def test_running_cost_penalty_term():
    inp = _inputs(w=1.0)
    cost = running_cost(0.0, StateVector(0.5, 0.5, 0.5), ControlVector(0, 0, 0.0, 0), 50.0, inp)
    assert cost == pytest.approx(45.0, rel=1e-12)


def test_terminal_cost_reference_values():
    assert terminal_cost(0.0, PARAMS) == 0.0
    assert terminal_cost(1.0, PARAMS) == pytest.approx(-64.0)
    assert terminal_cost(0.5, PARAMS) == pytest.approx(-32.0)
    assert np.allclose(terminal_cost(np.array([0.0, 0.5]), PARAMS), [0.0, -32.0])


# --- validation --------------------------------------------------------------

@pytest.mark.parametrize("factory", [
    lambda: ModelParams(w=1.5), lambda: ModelParams(a_max=0.0), lambda: QoSParams(phi_th=0.0),
    lambda: QoSParams(epsilon=1.0), lambda: TrafficProfile(n_min=3000.0), lambda: GaussianUsers(-1.0),
    lambda: BatteryCharacteristic(p_charge_max=5e4), lambda: FadingParams(mu=0.5),
    lambda: ScenarioInputs(a0=1.5),
])
def test_invalid_parameters_rejected(factory):
    with pytest.raises(ValueError):
        factory()


def test_state_vector_round_trip():
    x = StateVector(0.1, 0.2, 0.3)
    assert StateVector.from_array(x.as_array()) == x
