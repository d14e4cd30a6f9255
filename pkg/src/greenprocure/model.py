"""Domain types and the deterministic algebra of the base-station model.

Units: watts, watt-hours, hours, euro. States are normalized to the unit cube.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Union

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class ModelParams:
    c_scal: float = 7.84
    c_offset: float = 71.5
    p_tx_max: float = 5.0e3
    kappa: float = 1.0
    eta: float = 2.0
    snr_th: float = 15.0
    sigma0: float = 3.1623e-8
    p_r_max: float = 1.0e4
    a_max: float = 1.0e4
    c1_emission: float = 4.0e-4
    c2_emission: float = 1.0e-4
    p_k: float = 0.0064
    w: float = 0.5

    def __post_init__(self):
        for name in ("c_scal", "c_offset", "p_tx_max", "kappa", "sigma0", "p_r_max",
                     "c1_emission", "c2_emission", "p_k"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.a_max <= 0:
            raise ValueError("a_max must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must lie in [0, 1]")

    @property
    def snr_linear_noise(self) -> float:
        """Received power needed at the threshold, sigma0 * 10^(snr_th/10)."""
        return self.sigma0 * 10.0 ** (self.snr_th / 10.0)


@dataclass(frozen=True)
class QoSParams:
    phi_th: float = 1.0e-3
    epsilon: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.phi_th < 1.0:
            raise ValueError("phi_th must lie in (0, 1)")
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")


@dataclass(frozen=True)
class TrafficProfile:
    n_min: float = 100.0
    n_max: float = 2000.0
    rho: float = 3.0
    period_hours: float = 24.0

    def __post_init__(self):
        if not 0 < self.n_min <= self.n_max:
            raise ValueError("need 0 < n_min <= n_max")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if self.period_hours <= 0:
            raise ValueError("period_hours must be positive")


@dataclass(frozen=True)
class UniformUsers:
    """Users spread uniformly over a domain of the given area (m^2)."""
    area: float

    def __post_init__(self):
        if self.area <= 0:
            raise ValueError("area must be positive")

    kind = "uniform"


@dataclass(frozen=True)
class GaussianUsers:
    """Users distributed as an isotropic Gaussian around the site."""
    sigma_u: float = 300.0

    def __post_init__(self):
        if self.sigma_u <= 0:
            raise ValueError("sigma_u must be positive")

    kind = "gaussian"


UserDistribution = Union[UniformUsers, GaussianUsers]


@dataclass(frozen=True)
class BatteryCharacteristic:
    p_charge_max: float = 7.5e3
    p_discharge_max: float = 3.0e4
    ramp_fraction: float = 0.1

    def __post_init__(self):
        if self.p_charge_max < 0 or self.p_discharge_max < 0:
            raise ValueError("battery power plateaus must be nonnegative")
        if self.p_charge_max > self.p_discharge_max:
            raise ValueError("p_charge_max must not exceed p_discharge_max")
        if not 0.0 <= self.ramp_fraction <= 0.5:
            raise ValueError("ramp_fraction must lie in [0, 0.5]")


class Curve:
    """A vectorized time function; subclasses must implement __call__."""

    def __call__(self, t):
        raise NotImplementedError

    def describe(self) -> dict:
        return {"type": type(self).__name__}


@dataclass(frozen=True)
class ConstantCurve(Curve):
    value: float

    def __call__(self, t):
        return np.full(np.shape(t), float(self.value)) if np.ndim(t) else float(self.value)

    def describe(self):
        return {"type": "constant", "value": self.value}


@dataclass(frozen=True)
class PolynomialCurve(Curve):
    """Polynomial in t given by coefficients on a scaled domain (numpy Polynomial)."""
    coef: tuple
    domain: tuple
    floor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "_poly",
                           np.polynomial.Polynomial(self.coef, domain=self.domain, window=(-1, 1)))

    def __call__(self, t):
        out = np.maximum(self._poly(np.asarray(t, dtype=float)), self.floor)
        return out if np.ndim(t) else float(out)

    def describe(self):
        return {"type": "polynomial", "coef": list(self.coef), "domain": list(self.domain)}


@dataclass(frozen=True)
class ScaledCurve(Curve):
    base: Curve
    factor: float

    def __call__(self, t):
        return self.factor * self.base(t)

    def describe(self):
        return {"type": "scaled", "factor": self.factor, "base": self.base.describe()}


@dataclass(frozen=True)
class PriceCurves:
    k_b: Callable = field(default_factory=lambda: ConstantCurve(1.0e-4))
    k_s: Callable = field(default_factory=lambda: ConstantCurve(1.0e-4))
    k_net: Callable = field(default_factory=lambda: ConstantCurve(0.01))

    def check(self, times) -> None:
        kb, ks = np.asarray(self.k_b(times)), np.asarray(self.k_s(times))
        if np.any(ks > kb + 1e-15):
            raise ValueError("selling price must not exceed buying price")
        if np.any(kb < 0) or np.any(np.asarray(self.k_net(times)) < 0):
            raise ValueError("prices must be nonnegative")


@dataclass(frozen=True)
class StateVector:
    a: float
    r: float
    chi: float

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.r, self.chi], dtype=float)

    @classmethod
    def from_array(cls, x) -> "StateVector":
        return cls(float(x[0]), float(x[1]), float(x[2]))


@dataclass(frozen=True)
class ControlVector:
    p_a: float
    p_f: float
    p_tx: float
    p_s: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_a, self.p_f, self.p_tx, self.p_s], dtype=float)


# Fading and renewable parameter types live here too so that ScenarioInputs
# can be assembled without circular imports.

@dataclass(frozen=True)
class FadingParams:
    mu: float = 3.0
    theta: float = 1.0
    xi_floor: float = 0.5473
    chi_bar: float = 6.8431
    xi0: float | None = None  # point-mass initial fading level; None draws from the invariant law

    def __post_init__(self):
        if self.mu < 1:
            raise ValueError("mu must be >= 1")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.xi_floor < 0:
            raise ValueError("xi_floor must be nonnegative")
        if self.chi_bar <= self.xi_floor:
            raise ValueError("chi_bar must exceed xi_floor")

    @property
    def span(self) -> float:
        return self.chi_bar - self.xi_floor

    @classmethod
    def with_quantile_cap(cls, mu=3.0, theta=1.0, xi_floor=0.0, quantile=0.95, xi0=None):
        cap = xi_floor + stats.gamma.ppf(quantile, mu, scale=1.0)
        return cls(mu=mu, theta=theta, xi_floor=xi_floor, chi_bar=float(cap), xi0=xi0)

    def to_xi(self, chi):
        return self.xi_floor + np.asarray(chi) * self.span

    def to_chi(self, xi):
        return (np.asarray(xi) - self.xi_floor) / self.span


@dataclass(frozen=True)
class RenewableParams:
    forecast: Callable = field(default_factory=lambda: ConstantCurve(0.5))
    forecast_deriv: Callable = field(default_factory=lambda: ConstantCurve(0.0))
    alpha: float = 0.34
    theta0: float = 2.3948
    varsigma: float = 0.054
    clamp_delta: float = 1.0e-3

    def __post_init__(self):
        if self.alpha < 0 or self.theta0 <= 0 or self.varsigma < 0:
            raise ValueError("need alpha >= 0, theta0 > 0, varsigma >= 0")


@dataclass(frozen=True)
class ScenarioInputs:
    model: ModelParams = field(default_factory=ModelParams)
    qos: QoSParams = field(default_factory=QoSParams)
    traffic: TrafficProfile = field(default_factory=TrafficProfile)
    user_dist: UserDistribution = field(default_factory=GaussianUsers)
    battery: BatteryCharacteristic = field(default_factory=BatteryCharacteristic)
    prices: PriceCurves = field(default_factory=PriceCurves)
    renewable: RenewableParams = field(default_factory=RenewableParams)
    fading: FadingParams = field(default_factory=FadingParams)
    horizon_hours: float = 48.0
    a0: float = 0.5
    name: str = "custom"

    def __post_init__(self):
        if self.horizon_hours <= 0:
            raise ValueError("horizon_hours must be positive")
        if not 0.0 <= self.a0 <= 1.0:
            raise ValueError("a0 must lie in [0, 1]")

    def with_changes(self, **kw) -> "ScenarioInputs":
        return replace(self, **kw)


# ---------------------------------------------------------------------------
# formulas

def traffic_count(t, profile: TrafficProfile):
    """Number of active users at hour t (two daily peaks)."""
    t = np.asarray(t, dtype=float)
    omega = 4.0 * np.pi / profile.period_hours
    wave = profile.n_max * 2.0 ** (-profile.rho) * (1.0 + np.sin(omega * t + np.pi)) ** profile.rho
    out = np.maximum(profile.n_min, np.minimum(wave, profile.n_max))
    return out if out.ndim else float(out)


def _outage_exponent_scale(dist: UserDistribution) -> float:
    if isinstance(dist, GaussianUsers):
        return 1.0 / (2.0 * dist.sigma_u ** 2)
    if isinstance(dist, UniformUsers):
        return np.pi / dist.area
    raise TypeError(f"unknown user distribution {dist!r}")


def coverage_term(p_tx, xi, dist: UserDistribution, params: ModelParams):
    """(pi/A) x^(2/eta) or x^(2/eta)/(2 sigma_u^2) with x = p_tx xi kappa / (sigma0 10^(snr/10))."""
    x = np.asarray(p_tx, dtype=float) * np.asarray(xi, dtype=float) * params.kappa / params.snr_linear_noise
    return _outage_exponent_scale(dist) * x ** (2.0 / params.eta)


def outage_proportion(p_tx, xi, dist: UserDistribution, params: ModelParams, xi_floor: float = 0.0):
    """Fraction of users whose SNR is below threshold."""
    p_tx = np.asarray(p_tx, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if np.any(p_tx < 0):
        raise ValueError("p_tx must be nonnegative")
    if np.any(xi < xi_floor) or np.any(xi < 0):
        raise ValueError("fading level below its floor")
    c = coverage_term(p_tx, xi, dist, params)
    if isinstance(dist, GaussianUsers):
        out = np.exp(-c)
    else:
        out = np.clip(1.0 - c, 0.0, 1.0)
    return out if out.ndim else float(out)


def qos_threshold_power(xi, phi_th: float, dist: UserDistribution, params: ModelParams):
    """Per-user transmit power at which the outage proportion equals phi_th."""
    xi = np.asarray(xi, dtype=float)
    target = -np.log(phi_th) if isinstance(dist, GaussianUsers) else 1.0 - phi_th
    x = (target / _outage_exponent_scale(dist)) ** (params.eta / 2.0)
    with np.errstate(divide="ignore"):
        out = x * params.snr_linear_noise / (xi * params.kappa)
    return out if out.ndim else float(out)


def fading_floor_for(phi_th: float, traffic: TrafficProfile, dist: UserDistribution,
                     params: ModelParams, margin: float = 0.5) -> float:
    """Smallest fading level still reaching outage margin*phi_th at peak load and full power."""
    per_user = params.p_tx_max / traffic.n_max
    return float(qos_threshold_power(1.0, margin * phi_th, dist, params) / per_user)


def snr_db(p_tx, xi, distance, params: ModelParams):
    p_tx, xi, distance = (np.asarray(v, dtype=float) for v in (p_tx, xi, distance))
    if np.any(distance <= 0) or np.any(p_tx <= 0) or np.any(xi <= 0):
        raise ValueError("snr_db needs positive power, fading and distance")
    out = 10.0 * np.log10(p_tx * xi * params.kappa * distance ** (-params.eta) / params.sigma0)
    return out if out.ndim else float(out)


def power_balance_residual(ctrl: ControlVector, t, params: ModelParams, profile: TrafficProfile):
    n_u = traffic_count(t, profile)
    return ctrl.p_a + ctrl.p_f - params.c_scal * n_u * ctrl.p_tx - params.c_offset


def battery_limits(a, char: BatteryCharacteristic):
    """(charge_cap, discharge_cap) in watts at normalized charge a."""
    a_arr = np.asarray(a, dtype=float)
    if np.any(a_arr < 0) or np.any(a_arr > 1):
        raise ValueError("normalized charge must lie in [0, 1]")
    ramp = char.ramp_fraction
    if ramp > 0:
        chg = char.p_charge_max * np.minimum(1.0, (1.0 - a_arr) / ramp)
        dis = char.p_discharge_max * np.minimum(1.0, a_arr / ramp)
    else:
        chg = np.where(a_arr < 1.0, char.p_charge_max, 0.0)
        dis = np.where(a_arr > 0.0, char.p_discharge_max, 0.0)
    if a_arr.ndim == 0:
        return float(chg), float(dis)
    return chg, dis


def running_cost(t, x: StateVector, ctrl: ControlVector, lambda_val: float, inputs: ScenarioInputs) -> float:
    """Lagrangian running cost in euro per hour."""
    m, pr = inputs.model, inputs.prices
    n_u = traffic_count(t, inputs.traffic)
    xi = float(inputs.fading.to_xi(x.chi))
    phi = outage_proportion(ctrl.p_tx, xi, inputs.user_dist, m)
    financial = float(pr.k_b(t)) * ctrl.p_f - float(pr.k_s(t)) * ctrl.p_s \
        - float(pr.k_net(t)) * n_u * (1.0 - phi)
    environmental = m.c1_emission * ctrl.p_f + m.c2_emission * ctrl.p_f ** 2
    violated = 1.0 if phi >= inputs.qos.phi_th else 0.0
    return m.w * financial + (1.0 - m.w) * environmental + lambda_val * (violated - inputs.qos.epsilon)


def terminal_cost(a, params: ModelParams):
    return -params.p_k * params.a_max * np.asarray(a, dtype=float) if np.ndim(a) else \
        -params.p_k * params.a_max * float(a)
