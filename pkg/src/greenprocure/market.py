"""Wind and spot-price ingestion, smooth time curves and synthetic scenario presets."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, fields, is_dataclass, replace
from datetime import datetime, timedelta, timezone

import numpy as np
from scipy.interpolate import CubicSpline

from .model import (BatteryCharacteristic, ConstantCurve, Curve, FadingParams, GaussianUsers, ModelParams,
                    PolynomialCurve, PriceCurves, QoSParams, RenewableParams, ScenarioInputs, TrafficProfile,
                    UniformUsers, fading_floor_for)

log = logging.getLogger(__name__)

WIND_HEADER = ["timestamp", "forecast_mw", "production_mw"]
PRICE_HEADER = ["timestamp", "price_eur_per_mwh"]
PRESETS = ("base", "scenario_a", "scenario_b", "scenario_c", "scenario_d", "scenario_e", "randomized")


class DataError(ValueError):
    """Malformed or unusable input data."""


class NoDataError(DataError):
    """The file holds no data rows."""


@dataclass(frozen=True)
class TimeSeries:
    times: np.ndarray     # hours from the first sample
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape or t.ndim != 1:
            raise DataError("times and values must be 1-D of equal length")
        if np.any(np.diff(t) <= 0):
            raise DataError("times must be strictly increasing")
        if np.any(~np.isfinite(v)):
            raise DataError("missing or non-finite values")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)


# ---------------------------------------------------------------------------
# CSV ingestion

def _parse_time(text: str, lineno: int) -> datetime:
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(s)
    except ValueError as exc:
        raise DataError(f"line {lineno}: bad timestamp {text!r}") from exc
    return ts


def _hours(stamps: list[datetime]) -> np.ndarray:
    t0 = stamps[0]
    return np.array([(s - t0).total_seconds() / 3600.0 for s in stamps])


def _read_rows(path, header_prefix: list[str], optional: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [(i + 1, line) for i, line in enumerate(fh)]
    lines = [(i, l) for i, l in lines if l.strip() and not l.lstrip().startswith("#")]
    if not lines:
        raise NoDataError(f"{path}: no data")
    hdr_line, hdr = lines[0]
    cols = [c.strip() for c in next(csv.reader([hdr]))]
    if cols[:len(header_prefix)] != header_prefix or any(c not in optional for c in cols[len(header_prefix):]):
        raise DataError(f"{path}: line {hdr_line}: expected header {','.join(header_prefix + optional)}")
    rows = []
    for lineno, line in lines[1:]:
        parts = [p.strip() for p in next(csv.reader([line]))]
        if len(parts) != len(cols):
            raise DataError(f"{path}: line {lineno}: expected {len(cols)} fields, got {len(parts)}")
        stamp = _parse_time(parts[0], lineno)
        try:
            nums = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise DataError(f"{path}: line {lineno}: non-numeric field") from exc
        if not all(math.isfinite(x) for x in nums):
            raise DataError(f"{path}: line {lineno}: non-finite field")
        rows.append((lineno, stamp, nums))
    if not rows:
        raise NoDataError(f"{path}: no data")
    for (l0, s0, _), (l1, s1, _) in zip(rows, rows[1:]):
        if s1 <= s0:
            raise DataError(f"{path}: line {l1}: timestamps not strictly increasing")
    return cols, rows


def parse_wind_csv(path, capacity_mw: float | None = None):
    """Read a wind file and return (forecast, production) normalized to [0, 1].

    Normalization uses the capacity_mw column when present, otherwise the
    explicit `capacity_mw` argument.  Values above capacity are clamped to 1 and
    counted in meta['clamped']."""
    cols, rows = _read_rows(path, WIND_HEADER, ["capacity_mw"])
    has_cap = len(cols) == 4
    if not has_cap and capacity_mw is None:
        raise DataError(f"{path}: no capacity column and no explicit capacity")
    stamps = [r[1] for r in rows]
    raw = np.array([r[2] for r in rows])
    cap = raw[:, 2] if has_cap else np.full(len(rows), float(capacity_mw))
    if np.any(cap <= 0):
        bad = rows[int(np.argmax(cap <= 0))][0]
        raise DataError(f"{path}: line {bad}: capacity must be positive")
    out = []
    for col, label in ((0, "forecast"), (1, "production")):
        v = raw[:, col] / cap
        over = int(np.sum(v > 1.0)) + int(np.sum(v < 0.0))
        if over:
            log.warning("%s: %d %s values outside [0, capacity] clamped", path, over, label)
        meta = {"source": str(path), "kind": label, "start": stamps[0].isoformat(),
                "stamps": [s.isoformat() for s in stamps], "raw_mw": raw[:, col].copy(),
                "capacity_mw": cap.copy(), "has_capacity_column": has_cap, "clamped": over}
        out.append(TimeSeries(_hours(stamps), np.clip(v, 0.0, 1.0), meta))
    return out[0], out[1]


def write_wind_csv(forecast: TimeSeries, production: TimeSeries, path) -> None:
    """Inverse of parse_wind_csv for series that came from a file or carry raw_mw metadata."""
    stamps = forecast.meta.get("stamps") or _synthetic_stamps(forecast.times)
    cap = np.asarray(forecast.meta.get("capacity_mw", np.ones_like(forecast.values)), dtype=float)
    f_raw = forecast.meta.get("raw_mw", forecast.values * cap)
    p_raw = production.meta.get("raw_mw", production.values * cap)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(WIND_HEADER + ["capacity_mw"])
        for s, f, p, c in zip(stamps, f_raw, p_raw, cap):
            wr.writerow([s, repr(float(f)), repr(float(p)), repr(float(c))])


def parse_price_csv(path) -> TimeSeries:
    """Hourly day-ahead prices, converted from EUR/MWh to EUR/Wh."""
    cols, rows = _read_rows(path, PRICE_HEADER, [])
    stamps = [r[1] for r in rows]
    eur_mwh = np.array([r[2][0] for r in rows])
    meta = {"source": str(path), "start": stamps[0].isoformat(), "stamps": [s.isoformat() for s in stamps],
            "raw_eur_per_mwh": eur_mwh.copy()}
    return TimeSeries(_hours(stamps), eur_mwh / 1e6, meta)


def write_price_csv(series: TimeSeries, path) -> None:
    stamps = series.meta.get("stamps") or _synthetic_stamps(series.times)
    raw = series.meta.get("raw_eur_per_mwh", series.values * 1e6)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(PRICE_HEADER)
        for s, v in zip(stamps, raw):
            wr.writerow([s, repr(float(v))])


def _synthetic_stamps(hours, start=datetime(2024, 1, 1, tzinfo=timezone.utc)):
    return [(start + timedelta(hours=float(h))).isoformat() for h in hours]


# ---------------------------------------------------------------------------
# curves

class SplineCurve(Curve):
    """Cubic spline through forecast samples, values clamped to [0, 1].

    Where the clamp is active the derivative is reported as 0, matching the
    clamped values."""

    def __init__(self, times, values, derivative=False):
        self.times = np.asarray(times, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.derivative = derivative
        self._spline = CubicSpline(self.times, self.values, bc_type="not-a-knot" if len(times) > 3 else "natural")
        self._dspline = self._spline.derivative()

    def __call__(self, t):
        tt = np.clip(np.asarray(t, dtype=float), self.times[0], self.times[-1])
        raw = self._spline(tt)
        if not self.derivative:
            out = np.clip(raw, 0.0, 1.0)
        else:
            out = np.where((raw < 0.0) | (raw > 1.0), 0.0, self._dspline(tt))
        return out if np.ndim(t) else float(out)

    def describe(self):
        return {"type": "spline", "derivative": self.derivative, "n": int(self.times.size)}


def build_forecast_curve(series: TimeSeries, horizon: float | None = None):
    """(p, p_dot) from forecast samples; p is C^1 and p_dot its derivative."""
    if series.times.size < 2:
        raise DataError("need at least two samples to build a forecast curve")
    if horizon is not None and (series.times[0] > 0 or series.times[-1] < horizon):
        raise DataError(f"forecast samples span [{series.times[0]}, {series.times[-1]}] "
                        f"but the horizon is [0, {horizon}]")
    if np.all(series.values == series.values[0]):
        c = float(np.clip(series.values[0], 0.0, 1.0))
        return ConstantCurve(c), ConstantCurve(0.0)
    return SplineCurve(series.times, series.values), SplineCurve(series.times, series.values, derivative=True)


@dataclass(frozen=True)
class PriceFit:
    curve: PolynomialCurve
    rms: float
    degree: int


def fit_price_polynomial(series: TimeSeries, degree: int = 6) -> PriceFit:
    """Least-squares polynomial over the sample span (scaled domain for conditioning)."""
    n = series.times.size
    if degree < 0 or degree >= n:
        raise DataError(f"degree {degree} needs more than {degree} samples (have {n})")
    domain = (float(series.times[0]), float(series.times[-1]))
    if domain[0] == domain[1]:
        raise DataError("price samples need a positive time span")
    poly, (resid, rank, sv, rcond) = np.polynomial.Polynomial.fit(series.times, series.values, degree,
                                                                    domain=domain, full=True)
    if rank < degree + 1:
        raise DataError(f"rank-deficient price fit (rank {rank} < {degree + 1})")
    fitted = poly(series.times)
    rms = float(np.sqrt(np.mean((fitted - series.values) ** 2)))
    curve = PolynomialCurve(tuple(float(c) for c in poly.coef), domain, floor=-np.inf)
    return PriceFit(curve=curve, rms=rms, degree=degree)


def assemble_two_day(series: TimeSeries, horizon: float = 48.0) -> TimeSeries:
    """Extend a series covering one day to the full horizon by repeating day 1."""
    if series.times[-1] >= horizon:
        return series
    day = 24.0
    if series.times[-1] < day - 1.0 - 1e-9:
        raise DataError("need at least one day of samples to assemble a two-day horizon")
    log.warning("only one day of data supplied; repeating day 1 for day 2")
    first = series.times < day
    reps = int(math.ceil(horizon / day))
    times = np.concatenate([series.times[first] + k * day for k in range(reps)])
    values = np.concatenate([series.values[first] for _ in range(reps)])
    # keep one sample at or beyond the horizon end
    keep = times <= horizon + 1e-9
    if not np.any(np.isclose(times[keep][-1], horizon)) and np.any(~keep):
        keep[np.argmax(~keep)] = True
    meta = {k: v for k, v in series.meta.items() if k not in ("stamps", "raw_mw", "raw_eur_per_mwh", "capacity_mw")}
    meta["repeated_day"] = True
    return TimeSeries(times[keep], values[keep], meta)


# ---------------------------------------------------------------------------
# synthetic presets

def synthetic_wind_series(horizon: float = 48.0, step_hours: float = 0.25) -> TimeSeries:
    """Smooth normalized wind forecast with a slow front and a diurnal ripple."""
    t = np.arange(0.0, horizon + 1e-9, step_hours)
    p = 0.42 + 0.16 * np.sin(2 * np.pi * t / 31.0 + 0.9) + 0.07 * np.sin(2 * np.pi * t / 11.0 + 2.1)
    return TimeSeries(t, np.clip(p, 0.05, 0.95), {"source": "synthetic"})


def synthetic_price_series(horizon: float = 48.0) -> TimeSeries:
    """Hourly day-ahead style prices (EUR/Wh) with morning and evening humps, repeated daily."""
    h = np.arange(0.0, horizon + 1e-9, 1.0)
    hod = h % 24.0
    eur_mwh = 70.0 + 35.0 * np.exp(-0.5 * ((hod - 8.5) / 2.0) ** 2) + 45.0 * np.exp(-0.5 * ((hod - 19.0) / 2.5) ** 2) \
        - 15.0 * np.exp(-0.5 * ((hod - 3.5) / 2.5) ** 2)
    return TimeSeries(h, eur_mwh / 1e6, {"source": "synthetic", "raw_eur_per_mwh": eur_mwh})


def _base_inputs(model=None, qos=None, traffic=None, user_dist=None, horizon=48.0, a0=0.5, name="base",
                 wind=None, prices=None, price_degree=6, renewable_kw=None, fading_kw=None,
                 k_net=0.01) -> ScenarioInputs:
    model = model or ModelParams()
    qos = qos or QoSParams()
    traffic = traffic or TrafficProfile()
    user_dist = user_dist or GaussianUsers(300.0)
    wind = wind if wind is not None else synthetic_wind_series(horizon)
    p, pdot = build_forecast_curve(wind, horizon)
    ren = RenewableParams(forecast=p, forecast_deriv=pdot, **(renewable_kw or {}))
    price_series = prices if prices is not None else synthetic_price_series(horizon)
    fit = fit_price_polynomial(price_series, price_degree)
    kb = PolynomialCurve(fit.curve.coef, fit.curve.domain, floor=0.0)
    price_curves = PriceCurves(k_b=kb, k_s=kb, k_net=ConstantCurve(k_net))
    fkw = dict(fading_kw or {})
    floor = fkw.pop("xi_floor", None)
    if floor is None:
        floor = fading_floor_for(qos.phi_th, traffic, user_dist, model)
    fading = FadingParams.with_quantile_cap(xi_floor=floor, **fkw)
    return ScenarioInputs(model=model, qos=qos, traffic=traffic, user_dist=user_dist, battery=BatteryCharacteristic(),
                          prices=price_curves, renewable=ren, fading=fading, horizon_hours=horizon, a0=a0, name=name)


def randomized_parameters(seed: int) -> dict:
    """Draws of the randomized model and algorithm parameters."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(99,)))
    sigma0 = -1.0
    while sigma0 <= 0:
        sigma0 = rng.normal(3.1623e-8, math.sqrt(1e-16))
    return {
        "p_tx_max": 10 ** rng.uniform(3, 4),
        "sigma0": sigma0,
        "p_r_max": 10 ** rng.uniform(2, 4),
        "a_max": 10 ** rng.uniform(3, 4),
        "w": rng.uniform(0, 1),
        "phi_th": 10 ** rng.uniform(-4, -2),
        "a0": rng.uniform(0, 1),
        "k_net": 10 ** rng.uniform(-1, 1),
    }


def synthetic_scenario(kind: str = "base", seed: int = 0, horizon: float = 48.0) -> ScenarioInputs:
    if kind not in PRESETS:
        raise ValueError(f"unknown preset {kind!r}; choose one of {', '.join(PRESETS)}")
    if kind == "randomized":
        d = randomized_parameters(seed)
        model = ModelParams(p_tx_max=d["p_tx_max"], sigma0=d["sigma0"], p_r_max=d["p_r_max"], a_max=d["a_max"],
                            w=d["w"])
        return _base_inputs(model=model, qos=QoSParams(phi_th=d["phi_th"]), a0=d["a0"], k_net=d["k_net"],
                            horizon=horizon, name=f"randomized-{seed}")
    base = _base_inputs(horizon=horizon)
    if kind == "base":
        return base
    if kind == "scenario_a":
        # no renewable infeed: zero installed capacity keeps the forecast process well posed
        return replace(base, model=replace(base.model, p_r_max=0.0), name=kind)
    if kind == "scenario_b":
        return replace(base, fading=FadingParams.with_quantile_cap(xi_floor=base.fading.xi_floor / 2), name=kind)
    if kind == "scenario_c":
        return replace(base, model=replace(base.model, w=0.99), name=kind)
    if kind == "scenario_d":
        return replace(base, prices=replace(base.prices, k_net=ConstantCurve(0.001)), name=kind)
    return replace(base, qos=replace(base.qos, epsilon=0.2), name=kind)


# ---------------------------------------------------------------------------
# scenario JSON

_SECTIONS = {"model": ModelParams, "qos": QoSParams, "traffic": TrafficProfile, "battery": BatteryCharacteristic}


def scenario_from_dict(spec: dict, seed: int = 0) -> ScenarioInputs:
    """Build inputs from a JSON-like dict mirroring ScenarioInputs; missing fields keep preset defaults.

    Extra keys: "preset" (base preset), renewable.wind_csv, renewable.capacity_mw,
    prices.price_csv, prices.degree, prices.k_net, user_dist.kind."""
    spec = dict(spec or {})
    known = {"preset", "model", "qos", "traffic", "user_dist", "battery", "prices", "renewable", "fading",
             "horizon_hours", "a0", "name"}
    unknown = set(spec) - known
    if unknown:
        raise ValueError(f"unknown scenario fields: {sorted(unknown)}")
    inputs = synthetic_scenario(spec.get("preset", "base"), seed, float(spec.get("horizon_hours", 48.0)))
    T = inputs.horizon_hours
    for key, cls in _SECTIONS.items():
        if key in spec:
            inputs = replace(inputs, **{key: _update(getattr(inputs, key), spec[key])})
    if "user_dist" in spec:
        ud = dict(spec["user_dist"])
        kind = ud.pop("kind", inputs.user_dist.kind)
        inputs = replace(inputs, user_dist=UniformUsers(**ud) if kind == "uniform" else GaussianUsers(**ud))
    ren_spec = dict(spec.get("renewable", {}))
    ren = inputs.renewable
    if "wind_csv" in ren_spec:
        fc, _ = parse_wind_csv(ren_spec.pop("wind_csv"), ren_spec.pop("capacity_mw", None))
        p, pdot = build_forecast_curve(assemble_two_day(fc, T), T)
        ren = replace(ren, forecast=p, forecast_deriv=pdot)
    ren_spec.pop("capacity_mw", None)
    if "constant_forecast" in ren_spec:
        ren = replace(ren, forecast=ConstantCurve(float(ren_spec.pop("constant_forecast"))),
                      forecast_deriv=ConstantCurve(0.0))
    inputs = replace(inputs, renewable=_update(ren, ren_spec))
    pr_spec = dict(spec.get("prices", {}))
    prices = inputs.prices
    if "price_csv" in pr_spec:
        series = assemble_two_day(parse_price_csv(pr_spec.pop("price_csv")), T)
        fit = fit_price_polynomial(series, int(pr_spec.pop("degree", 6)))
        kb = PolynomialCurve(fit.curve.coef, fit.curve.domain, floor=0.0)
        prices = replace(prices, k_b=kb, k_s=kb)
    pr_spec.pop("degree", None)
    for k in ("k_b", "k_s", "k_net"):
        if k in pr_spec:
            prices = replace(prices, **{k: ConstantCurve(float(pr_spec.pop(k)))})
    if pr_spec:
        raise ValueError(f"unknown price fields: {sorted(pr_spec)}")
    inputs = replace(inputs, prices=prices)
    if "fading" in spec:
        fs = dict(spec["fading"])
        cur = inputs.fading
        if "chi_bar" in fs:
            inputs = replace(inputs, fading=_update(cur, fs))
        else:
            inputs = replace(inputs, fading=FadingParams.with_quantile_cap(
                mu=fs.get("mu", cur.mu), theta=fs.get("theta", cur.theta),
                xi_floor=fs.get("xi_floor", cur.xi_floor), xi0=fs.get("xi0", cur.xi0)))
    for k in ("a0", "name"):
        if k in spec:
            inputs = replace(inputs, **{k: spec[k]})
    inputs.prices.check(np.linspace(0.0, T, 97))
    return inputs


def _update(obj, changes: dict):
    names = {f.name for f in fields(obj)}
    bad = set(changes) - names
    if bad:
        raise ValueError(f"unknown fields for {type(obj).__name__}: {sorted(bad)}")
    return replace(obj, **changes)


def load_scenario(path, seed: int = 0) -> ScenarioInputs:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh), seed)


def describe_inputs(inputs: ScenarioInputs) -> dict:
    """JSON-serializable description used for provenance hashing."""
    def conv(o):
        if isinstance(o, Curve):
            return o.describe()
        if is_dataclass(o):
            return {f.name: conv(getattr(o, f.name)) for f in fields(o)} | {"_type": type(o).__name__}
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer)):
            return o.item()
        if callable(o):
            return repr(o)
        return o
    return conv(inputs)
