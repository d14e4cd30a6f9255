"""Explicit upwind finite-difference solver for the relaxed problem's HJB equation."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numba as nb
import numpy as np

from . import hamiltonian as ham
from .dynamics import STREAM_DUAL_INIT, nominal_initial_state, sample_initial_states, theta_of_t
from .model import ScenarioInputs, StateVector, battery_limits, terminal_cost, traffic_count


@dataclass(frozen=True)
class GridSpec:
    n_a: int = 10
    n_r: int = 10
    n_chi: int = 10
    n_t: int | None = None      # None: smallest count satisfying the CFL condition
    horizon: float = 48.0
    chi_bar: float | None = None  # informational; the fading span comes from the scenario

    def __post_init__(self):
        for name in ("n_a", "n_r", "n_chi"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_t is not None and self.n_t < 1:
            raise ValueError("n_t must be >= 1")

    @property
    def da(self):
        return 1.0 / self.n_a

    @property
    def dr(self):
        return 1.0 / self.n_r

    @property
    def dchi(self):
        return 1.0 / self.n_chi

    @property
    def dt(self):
        return self.horizon / self.n_t

    def refined(self, factor=2) -> "GridSpec":
        return replace(self, n_a=self.n_a * factor, n_r=self.n_r * factor, n_chi=self.n_chi * factor, n_t=None)


@dataclass(frozen=True)
class MultiplierFunction:
    """Piecewise-constant multiplier on a uniform partition of [0, T]."""
    amplitudes: tuple
    horizon: float

    def __post_init__(self):
        amps = tuple(float(a) for a in np.atleast_1d(self.amplitudes))
        if len(amps) < 1:
            raise ValueError("need at least one amplitude")
        if any(a < 0 or not math.isfinite(a) for a in amps):
            raise ValueError("amplitudes must be finite and nonnegative")
        object.__setattr__(self, "amplitudes", amps)

    @property
    def level(self) -> int:
        return len(self.amplitudes)

    @property
    def breakpoints(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.level + 1)

    @classmethod
    def zero(cls, horizon, level=1):
        return cls(tuple([0.0] * level), horizon)

    def interval_index(self, t):
        idx = np.floor(np.asarray(t, dtype=float) / self.horizon * self.level).astype(int)
        return np.clip(idx, 0, self.level - 1)

    def __call__(self, t):
        out = np.asarray(self.amplitudes)[self.interval_index(t)]
        return out if np.ndim(t) else float(out)

    def as_array(self) -> np.ndarray:
        return np.array(self.amplitudes)


# ---------------------------------------------------------------------------
# coefficients on the grid

@dataclass
class _TimeCoefficients:
    times: np.ndarray
    nu: np.ndarray
    kb: np.ndarray
    ks: np.ndarray
    knet: np.ndarray
    p: np.ndarray
    pdot: np.ndarray
    theta: np.ndarray


def _time_coefficients(times, inputs: ScenarioInputs) -> _TimeCoefficients:
    pr, ren = inputs.prices, inputs.renewable

    def arr(f):
        return np.broadcast_to(np.asarray(f(times), dtype=float), times.shape).copy()

    return _TimeCoefficients(times=times, nu=np.asarray(traffic_count(times, inputs.traffic), dtype=float),
                             kb=arr(pr.k_b), ks=arr(pr.k_s), knet=arr(pr.k_net), p=arr(ren.forecast),
                             pdot=arr(ren.forecast_deriv),
                             theta=np.asarray(theta_of_t(times, ren), dtype=float) * np.ones_like(times))


def _cfl_rates(times, grid: GridSpec, inputs: ScenarioInputs) -> np.ndarray:
    """Per-time maximum over the grid of the CFL left side divided by dt."""
    m, ren, fad = inputs.model, inputs.renewable, inputs.fading
    a = np.linspace(0.0, 1.0, grid.n_a + 1)
    r = np.linspace(0.0, 1.0, grid.n_r + 1)
    chi = np.linspace(0.0, 1.0, grid.n_chi + 1)
    chg, dis = battery_limits(a, inputs.battery)
    R = m.p_r_max * r
    # |battery flow| <= max(discharge cap, min(charge cap, renewable))
    f1 = np.maximum(dis[:, None], np.minimum(chg[:, None], R[None, :])) / m.a_max  # (a, r)
    f3 = np.abs(fad.theta * (chi - fad.mu / fad.span))
    g3 = fad.theta * chi / fad.span
    chi_part = np.max(f3 / grid.dchi + 2.0 * g3 / grid.dchi ** 2)
    g2 = ren.alpha * ren.theta0 * r * (1.0 - r)
    co = _time_coefficients(times, inputs)
    f2 = np.abs(co.pdot[:, None] - co.theta[:, None] * (r[None, :] - co.p[:, None]))  # (t, r)
    r_part = f2 / grid.dr + 2.0 * g2[None, :] / grid.dr ** 2                           # (t, r)
    ar = np.max(f1[None, :, :] / grid.da + r_part[:, None, :], axis=(1, 2))
    return ar + chi_part


def check_cfl(grid: GridSpec, inputs: ScenarioInputs, n_dense: int = 2001):
    """(ok, max_lhs, min_nt) for the explicit scheme on this grid."""
    T = grid.horizon
    dense = np.linspace(0.0, T, n_dense)
    rate = float(np.max(_cfl_rates(dense, grid, inputs)))
    min_nt = max(1, int(math.ceil(T * rate * (1.0 + 1e-12))))
    while True:
        nodes = np.linspace(0.0, T, min_nt + 1)
        node_rate = float(np.max(_cfl_rates(nodes, grid, inputs)))
        if node_rate * T / min_nt <= 1.0:
            break
        min_nt = int(math.ceil(T * max(node_rate, rate) * (1.0 + 1e-12))) + 1
    if grid.n_t is None:
        return True, rate * T / min_nt, min_nt
    nodes = np.linspace(0.0, T, grid.n_t + 1)
    lhs = float(np.max(_cfl_rates(nodes, grid, inputs))) * grid.dt
    return lhs <= 1.0, lhs, min_nt


def resolve_grid(grid: GridSpec, inputs: ScenarioInputs) -> GridSpec:
    if grid.horizon != inputs.horizon_hours:
        grid = replace(grid, horizon=inputs.horizon_hours)
    if grid.chi_bar is None:
        grid = replace(grid, chi_bar=inputs.fading.chi_bar)
    if grid.n_t is None:
        grid = replace(grid, n_t=check_cfl(grid, inputs)[2])
    return grid


# ---------------------------------------------------------------------------
# compiled sweep

@nb.njit(cache=True)
def _battery_derivs(u, da, dplus, dminus):
    na = u.shape[0] - 1
    for i in range(na + 1):
        for j in range(u.shape[1]):
            for k in range(u.shape[2]):
                if na == 0:
                    dp = 0.0
                    dm = 0.0
                elif i < na:
                    dp = (u[i + 1, j, k] - u[i, j, k]) / da
                    dm = (u[i, j, k] - u[i - 1, j, k]) / da if i > 0 else dp
                else:
                    dm = (u[i, j, k] - u[i - 1, j, k]) / da
                    dp = dm
                dplus[i, j, k] = dp
                dminus[i, j, k] = dm


@nb.njit(cache=True)
def _sweep(u_terminal, n_t, dt, da, dr, dchi, nu, kb, ks, knet, lam, p, pdot, theta,
           chg, dis, R, xi, f3, g3, r_nodes, alpha_theta0, consts, store_values,
           values, dplus, dminus, u0, status):
    na1, nr1, nc1 = u_terminal.shape
    u = u_terminal.copy()
    un = np.empty_like(u)
    g2 = np.empty(nr1)
    f2 = np.empty(nr1)
    for j in range(nr1):
        g2[j] = alpha_theta0 * r_nodes[j] * (1.0 - r_nodes[j])
    if store_values:
        values[n_t] = u
    for n in range(n_t, 0, -1):
        _battery_derivs(u, da, dplus[n], dminus[n])
        maxabs = 0.0
        for i in range(na1):
            for j in range(nr1):
                for k in range(nc1):
                    v = abs(u[i, j, k])
                    if v > maxabs:
                        maxabs = v
        for j in range(nr1):
            f2[j] = pdot[n] - theta[n] * (r_nodes[j] - p[n])
        max_run = 0.0
        for i in range(na1):
            for j in range(nr1):
                fj = f2[j]
                for k in range(nc1):
                    res = ham.cell_minimize(nu[n], kb[n], ks[n], knet[n], lam[n], R[j], chg[i], dis[i], xi[k],
                                            dplus[n, i, j, k], dminus[n, i, j, k], consts)
                    hval = res[5]
                    run = abs(res[6])
                    if run > max_run:
                        max_run = run
                    uc = u[i, j, k]
                    ujp = u[i, j + 1, k] if j + 1 < nr1 else uc
                    ujm = u[i, j - 1, k] if j > 0 else uc
                    ukp = u[i, j, k + 1] if k + 1 < nc1 else uc
                    ukm = u[i, j, k - 1] if k > 0 else uc
                    acc = hval
                    if fj > 0.0:
                        acc += fj * (ujp - uc) / dr
                    else:
                        acc += fj * (uc - ujm) / dr
                    acc += g2[j] * (ujp - 2.0 * uc + ujm) / (dr * dr)
                    fk = f3[k]
                    if fk > 0.0:
                        acc += fk * (ukp - uc) / dchi
                    else:
                        acc += fk * (uc - ukm) / dchi
                    if k + 1 < nc1:
                        acc += g3[k] * (ukp - 2.0 * uc + ukm) / (dchi * dchi)
                    val = uc + dt * acc
                    if not np.isfinite(val):
                        status[0] = 1
                        status[1] = n
                        status[2] = i
                        status[3] = j
                        status[4] = k
                        return
                    un[i, j, k] = val
        new_max = 0.0
        for i in range(na1):
            for j in range(nr1):
                for k in range(nc1):
                    v = abs(un[i, j, k])
                    if v > new_max:
                        new_max = v
        if new_max > maxabs + dt * max_run + 1e-9 * (1.0 + maxabs):
            status[0] = 2
            status[1] = n
            return
        u, un = un, u
        if store_values:
            values[n - 1] = u
    _battery_derivs(u, da, dplus[0], dminus[0])
    u0[:] = u


@dataclass
class CostToGoField:
    grid: GridSpec
    multiplier: MultiplierFunction
    value0: np.ndarray            # slice at t = 0
    terminal: np.ndarray          # slice at t = T
    d_plus: np.ndarray            # (n_t+1, n_a+1, n_r+1, n_chi+1)
    d_minus: np.ndarray
    values: np.ndarray | None = None
    forced_qos: bool = False
    seconds: float = 0.0
    inputs: ScenarioInputs | None = field(default=None, repr=False)


class CFLViolation(ValueError):
    pass


class SweepError(ArithmeticError):
    pass


def _step_multiplier(multiplier: MultiplierFunction, grid: GridSpec) -> np.ndarray:
    """Multiplier used for the step from t_n back to t_{n-1}, taken at the step midpoint."""
    lam = np.zeros(grid.n_t + 1)
    mids = (np.arange(1, grid.n_t + 1) - 0.5) * grid.dt
    lam[1:] = multiplier(mids)
    lam[0] = multiplier(0.0)
    return lam


def solve_hjb(multiplier: MultiplierFunction, grid: GridSpec, inputs: ScenarioInputs,
              store_values: bool = False, forced_qos: bool = False) -> CostToGoField:
    """Backward sweep from the terminal slice."""
    import time
    start = time.perf_counter()
    grid = resolve_grid(grid, inputs)
    ok, lhs, min_nt = check_cfl(grid, inputs)
    if not ok:
        raise CFLViolation(f"CFL condition violated (lhs={lhs:.4g}); need n_t >= {min_nt}")
    if abs(multiplier.horizon - grid.horizon) > 1e-12:
        raise ValueError("multiplier horizon differs from the grid horizon")
    m = inputs.model
    times = np.linspace(0.0, grid.horizon, grid.n_t + 1)
    co = _time_coefficients(times, inputs)
    a = np.linspace(0.0, 1.0, grid.n_a + 1)
    r = np.linspace(0.0, 1.0, grid.n_r + 1)
    chi = np.linspace(0.0, 1.0, grid.n_chi + 1)
    chg, dis = battery_limits(a, inputs.battery)
    fad = inputs.fading
    xi = fad.to_xi(chi)
    f3 = -fad.theta * (chi - fad.mu / fad.span)
    g3 = fad.theta * chi / fad.span
    consts = ham.pack_constants(inputs, ham.MODE_FORCED if forced_qos else ham.MODE_RELAXED)
    shape = (grid.n_a + 1, grid.n_r + 1, grid.n_chi + 1)
    terminal = np.broadcast_to(terminal_cost(a, m)[:, None, None], shape).copy()
    full = (grid.n_t + 1,) + shape
    values = np.empty(full) if store_values else np.empty((1, 1, 1, 1))
    dplus = np.empty(full)
    dminus = np.empty(full)
    u0 = np.empty(shape)
    status = np.zeros(5, dtype=np.int64)
    lam = _step_multiplier(multiplier, grid)
    _sweep(terminal, grid.n_t, grid.dt, grid.da, grid.dr, grid.dchi, co.nu, co.kb, co.ks, co.knet, lam,
           co.p, co.pdot, co.theta, np.asarray(chg, float), np.asarray(dis, float), m.p_r_max * r,
           np.asarray(xi, float), f3, g3, r, inputs.renewable.alpha * inputs.renewable.theta0, consts,
           store_values, values, dplus, dminus, u0, status)
    if status[0] == 1:
        n, i, j, k = status[1:]
        raise SweepError(f"non-finite value in backward sweep at (n,i,j,k)=({n},{i},{j},{k})")
    if status[0] == 2:
        raise SweepError(f"discrete maximum principle violated at step n={status[1]}")
    return CostToGoField(grid=grid, multiplier=multiplier, value0=u0, terminal=terminal, d_plus=dplus,
                         d_minus=dminus, values=values if store_values else None, forced_qos=forced_qos,
                         seconds=time.perf_counter() - start, inputs=inputs)


# ---------------------------------------------------------------------------
# interpolation

@nb.njit(cache=True)
def _locate(x, n):
    """Cell index and weight for x in [0, 1] on n uniform cells."""
    if n == 0:
        return 0, 0.0
    s = x * n
    i = int(math.floor(s))
    if i >= n:
        i = n - 1
    if i < 0:
        i = 0
    return i, s - i


@nb.njit(cache=True)
def _interp3(arr, a, r, c):
    na, nr, nc = arr.shape[0] - 1, arr.shape[1] - 1, arr.shape[2] - 1
    i, wa = _locate(a, na)
    j, wr = _locate(r, nr)
    k, wc = _locate(c, nc)
    out = 0.0
    for di in range(2):
        fa = wa if di else 1.0 - wa
        if fa == 0.0:
            continue
        for dj in range(2):
            fr = wr if dj else 1.0 - wr
            if fr == 0.0:
                continue
            for dk in range(2):
                fc = wc if dk else 1.0 - wc
                if fc == 0.0:
                    continue
                out += fa * fr * fc * arr[i + di, j + dj, k + dk]
    return out


@nb.njit(cache=True)
def _interp4_batch(arr, tfrac, states, out):
    """Multilinear interpolation of arr (n_t+1, ...) at time fraction tfrac in [0,1]."""
    nt = arr.shape[0] - 1
    n, wt = _locate(tfrac, nt)
    for m in range(states.shape[0]):
        a = min(max(states[m, 0], 0.0), 1.0)
        r = min(max(states[m, 1], 0.0), 1.0)
        c = min(max(states[m, 2], 0.0), 1.0)
        v = 0.0
        if wt != 1.0:
            v += (1.0 - wt) * _interp3(arr[n], a, r, c)
        if wt != 0.0:
            v += wt * _interp3(arr[n + 1], a, r, c)
        out[m] = v


def _check_domain(field_: CostToGoField, t, states):
    T = field_.grid.horizon
    if t < 0 or t > T:
        raise ValueError(f"t={t} outside [0, {T}]")
    if np.any(states < 0) or np.any(states > 1):
        raise ValueError("state outside the unit cube")


def interpolate_batch(arr, t, horizon, states):
    out = np.empty(states.shape[0])
    _interp4_batch(arr, float(t) / horizon, np.ascontiguousarray(states, dtype=float), out)
    return out


def interpolate_value(field_: CostToGoField, t, x) -> float:
    states = np.atleast_2d(x.as_array() if isinstance(x, StateVector) else np.asarray(x, float))
    _check_domain(field_, t, states)
    if field_.values is None:
        if t != 0.0:
            raise ValueError("only the t=0 slice is stored; solve with store_values=True")
        out = np.empty(1)
        out[0] = _interp3(field_.value0, *states[0])
        return float(out[0])
    return float(interpolate_batch(field_.values, t, field_.grid.horizon, states)[0])


def interpolate_battery_derivs(field_: CostToGoField, t, x):
    states = np.atleast_2d(x.as_array() if isinstance(x, StateVector) else np.asarray(x, float))
    _check_domain(field_, t, states)
    T = field_.grid.horizon
    return (float(interpolate_batch(field_.d_plus, t, T, states)[0]),
            float(interpolate_batch(field_.d_minus, t, T, states)[0]))


def value_at_start(field_: CostToGoField, states) -> np.ndarray:
    states = np.clip(np.atleast_2d(np.asarray(states, float)), 0.0, 1.0)
    return np.array([_interp3(field_.value0, *s) for s in states])


def dual_value(field_: CostToGoField, a0: float, inputs: ScenarioInputs, n_init_samples: int = 4096, seed: int = 0):
    """Mean of the cost-to-go at t=0 over the initial-state law, with its standard error.

    n_init_samples=1 evaluates at the nominal initial state instead."""
    if n_init_samples == 1:
        return float(value_at_start(field_, nominal_initial_state(a0, inputs)[None, :])[0]), 0.0
    states = sample_initial_states(a0, n_init_samples, seed, inputs)
    vals = value_at_start(field_, states)
    if np.all(vals == vals[0]):
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))


# ---------------------------------------------------------------------------
# policy derived from a solved field

class FieldPolicy:
    """Optimal feedback controls from interpolated battery derivatives."""

    def __init__(self, field_: CostToGoField, inputs: ScenarioInputs, multiplier: MultiplierFunction | None = None):
        self.field = field_
        self.inputs = inputs
        self.multiplier = multiplier if multiplier is not None else field_.multiplier
        self.consts = ham.pack_constants(inputs, ham.MODE_FORCED if field_.forced_qos else ham.MODE_RELAXED)

    def evaluate(self, t, states):
        """(m, 8) array: p_tx, p_f, p_s, p_a, flow, value, running, violated."""
        T = self.field.grid.horizon
        dp = interpolate_batch(self.field.d_plus, t, T, states)
        dm = interpolate_batch(self.field.d_minus, t, T, states)
        m = states.shape[0]
        pr = self.inputs.prices
        ones = np.ones(m)
        nu = ones * float(traffic_count(t, self.inputs.traffic))
        chi = np.clip(states[:, 2], 0.0, 1.0)
        return ham.cells_minimize(nu, ones * float(pr.k_b(t)), ones * float(pr.k_s(t)), ones * float(pr.k_net(t)),
                                  ones * float(self.multiplier(min(t, T))), np.ascontiguousarray(states[:, 0]),
                                  np.ascontiguousarray(states[:, 1]), np.ascontiguousarray(chi), dp, dm, self.consts)

    def controls(self, t, states):
        res = self.evaluate(t, states)
        return np.column_stack([res[:, 3], res[:, 1], res[:, 0], res[:, 2]])


# ---------------------------------------------------------------------------
# export

BINARY_MAGIC = b"GPCTG001"


def export_field(field_: CostToGoField, path, fmt: str = "binary") -> None:
    """Dump the cost-to-go values with grid metadata.

    Binary layout (little-endian): 8-byte magic, int64 n_t, n_a, n_r, n_chi,
    int64 n_slices, float64 chi_bar, float64 T, then n_slices*(n_a+1)*(n_r+1)*(n_chi+1)
    float64 values in C order (time slice, a, r, chi).  n_slices is n_t+1 when
    the full field was stored, else 1 (the t=0 slice)."""
    g = field_.grid
    data = field_.values if field_.values is not None else field_.value0[None]
    chi_bar = g.chi_bar if g.chi_bar is not None else float("nan")
    if fmt == "binary":
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<5q2d", g.n_t, g.n_a, g.n_r, g.n_chi, data.shape[0], chi_bar, g.horizon))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    elif fmt == "csv":
        with open(path, "w") as fh:
            meta = dict(n_t=g.n_t, n_a=g.n_a, n_r=g.n_r, n_chi=g.n_chi, chi_bar=chi_bar, T=g.horizon)
            fh.write("# " + json.dumps(meta) + "\n")
            fh.write("n,i,j,k,value\n")
            for idx in np.ndindex(data.shape):
                fh.write(f"{idx[0]},{idx[1]},{idx[2]},{idx[3]},{data[idx]!r}\n")
    else:
        raise ValueError("fmt must be 'binary' or 'csv'")


def load_field_values(path):
    """Read a binary dump; returns (metadata dict, values array)."""
    with open(path, "rb") as fh:
        if fh.read(8) != BINARY_MAGIC:
            raise ValueError("not a cost-to-go dump")
        n_t, n_a, n_r, n_chi, n_slices, chi_bar, T = struct.unpack("<5q2d", fh.read(56))
        vals = np.frombuffer(fh.read(), dtype="<f8").reshape(n_slices, n_a + 1, n_r + 1, n_chi + 1)
    return dict(n_t=n_t, n_a=n_a, n_r=n_r, n_chi=n_chi, chi_bar=chi_bar, T=T), vals
