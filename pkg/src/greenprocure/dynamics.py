"""Drift and diffusion of the scaled state, Euler-Maruyama path simulation,
Brownian-bridge interpolation and the initial-state law.

The state is x = (a, r, chi): battery charge, normalized renewable output and
the fading level mapped affinely from [xi_floor, chi_bar] onto [0, 1].
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import (ControlVector, FadingParams, RenewableParams, ScenarioInputs, StateVector)

# Random streams are keyed by purpose and indexed by (step, block of paths), so a
# path's noise depends only on (seed, purpose, step, path index).
BLOCK = 1024
STREAM_INIT = 0
STREAM_DYNAMICS = 1
STREAM_BRIDGE = 2
STREAM_DUAL_INIT = 3
STREAM_FADING = 4
STREAM_RENEWABLE = 5

SPINUP_SUBSTEPS = 8


def _stream_key(seed: int, purpose: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed), spawn_key=(int(purpose),)).generate_state(2, dtype=np.uint64)


def normals(seed: int, purpose: int, step: int, n_paths: int, dim: int) -> np.ndarray:
    """Standard normals of shape (n_paths, dim) for one step of one stream."""
    key = _stream_key(seed, purpose)
    out = np.empty((n_paths, dim))
    for b in range(0, n_paths, BLOCK):
        gen = np.random.Generator(np.random.Philox(key=key, counter=np.array([0, 0, step, b // BLOCK], dtype=np.uint64)))
        block = gen.standard_normal((BLOCK, dim))
        out[b:b + BLOCK] = block[: min(BLOCK, n_paths - b)]
    return out


def gammas(seed: int, purpose: int, n: int, shape: float) -> np.ndarray:
    key = _stream_key(seed, purpose)
    out = np.empty(n)
    for b in range(0, n, BLOCK):
        gen = np.random.Generator(np.random.Philox(key=key, counter=np.array([0, 1, 0, b // BLOCK], dtype=np.uint64)))
        out[b:b + BLOCK] = gen.standard_gamma(shape, BLOCK)[: min(BLOCK, n - b)]
    return out


# ---------------------------------------------------------------------------
# coefficient fields

def theta_of_t(t, params: RenewableParams):
    """Time-varying mean-reversion rate of the renewable output (1/hour)."""
    d = params.clamp_delta
    p = np.clip(np.asarray(params.forecast(t), dtype=float), d, 1.0 - d)
    pdot = np.abs(np.asarray(params.forecast_deriv(t), dtype=float))
    out = np.maximum(params.theta0, (params.alpha * params.theta0 + pdot) / np.minimum(p, 1.0 - p))
    return out if out.ndim else float(out)


def drift_batch(t, states, controls, inputs: ScenarioInputs):
    """Drift F for arrays of states (m, 3) and controls (m, 4: p_a, p_f, p_tx, p_s)."""
    m, ren, fad = inputs.model, inputs.renewable, inputs.fading
    a, r, chi = states[:, 0], states[:, 1], states[:, 2]
    out = np.empty_like(states)
    out[:, 0] = (m.p_r_max * r - controls[:, 3] - controls[:, 0]) / m.a_max
    p, pdot = float(ren.forecast(t)), float(ren.forecast_deriv(t))
    out[:, 1] = pdot - theta_of_t(t, ren) * (r - p)
    out[:, 2] = -fad.theta * (chi - fad.mu / fad.span)
    return out


def diffusion_batch(t, states, inputs: ScenarioInputs):
    """Half squared diffusion G for arrays of states; noise scale is sqrt(2 G dt)."""
    ren, fad = inputs.renewable, inputs.fading
    r, chi = states[:, 1], np.maximum(states[:, 2], 0.0)
    out = np.zeros_like(states)
    out[:, 1] = ren.alpha * ren.theta0 * r * (1.0 - r)
    out[:, 2] = fad.theta * chi / fad.span
    return out


def drift_vector(t, x: StateVector, ctrl: ControlVector, inputs: ScenarioInputs) -> np.ndarray:
    return drift_batch(t, x.as_array()[None, :], ctrl.as_array()[None, :], inputs)[0]


def diffusion_vector(t, x: StateVector, inputs: ScenarioInputs) -> np.ndarray:
    return diffusion_batch(t, x.as_array()[None, :], inputs)[0]


def em_step_batch(t, states, controls, dt, noise, inputs: ScenarioInputs, clamp_chi=True):
    f = drift_batch(t, states, controls, inputs)
    g = diffusion_batch(t, states, inputs)
    new = states + f * dt + np.sqrt(2.0 * g * dt) * noise
    np.clip(new[:, :2], 0.0, 1.0, out=new[:, :2])
    if clamp_chi:
        np.clip(new[:, 2], 0.0, 1.0, out=new[:, 2])
    else:
        np.maximum(new[:, 2], 0.0, out=new[:, 2])
    return new


def em_step(t, x: StateVector, ctrl: ControlVector, dt, noise, inputs: ScenarioInputs) -> StateVector:
    if dt <= 0:
        raise ValueError("dt must be positive")
    new = em_step_batch(t, x.as_array()[None, :], ctrl.as_array()[None, :], dt,
                        np.asarray(noise, dtype=float)[None, :], inputs)
    return StateVector.from_array(new[0])


# ---------------------------------------------------------------------------
# initial law

def sample_initial_fading(n: int, seed: int, fading: FadingParams) -> np.ndarray:
    """Unscaled initial fading levels: xi_floor + Gamma(mu, 1), or the point mass."""
    if fading.xi0 is not None:
        return np.full(n, float(fading.xi0))
    return fading.xi_floor + gammas(seed, STREAM_INIT, n, fading.mu)


def sample_initial_renewable(n: int, seed: int, inputs: ScenarioInputs) -> np.ndarray:
    """Renewable output at t=0 after running the forecast-error SDE over [-varsigma, 0]."""
    ren = inputs.renewable
    p0 = float(np.clip(ren.forecast(0.0), 0.0, 1.0))
    r = np.full(n, p0)
    if ren.varsigma <= 0 or ren.alpha == 0:
        return r
    th = theta_of_t(0.0, ren)
    dt = ren.varsigma / SPINUP_SUBSTEPS
    for s in range(SPINUP_SUBSTEPS):
        z = normals(seed, STREAM_INIT, s + 1, n, 1)[:, 0]
        r = r - th * (r - p0) * dt + np.sqrt(2.0 * ren.alpha * ren.theta0 * r * (1.0 - r) * dt) * z
        np.clip(r, 0.0, 1.0, out=r)
    return r


def sample_initial_states(a0: float, n: int, seed: int, inputs: ScenarioInputs) -> np.ndarray:
    if not 0.0 <= a0 <= 1.0:
        raise ValueError("a0 must lie in [0, 1]")
    out = np.empty((n, 3))
    out[:, 0] = a0
    out[:, 1] = sample_initial_renewable(n, seed, inputs)
    out[:, 2] = np.clip(inputs.fading.to_chi(sample_initial_fading(n, seed, inputs.fading)), 0.0, 1.0)
    return out


def sample_initial_state(a0: float, seed: int, inputs: ScenarioInputs) -> StateVector:
    return StateVector.from_array(sample_initial_states(a0, 1, seed, inputs)[0])


def nominal_initial_state(a0: float, inputs: ScenarioInputs) -> np.ndarray:
    """Deterministic representative of the initial law: forecast value and invariant fading mean."""
    fad = inputs.fading
    xi = fad.xi0 if fad.xi0 is not None else fad.xi_floor + fad.mu
    chi = float(np.clip(fad.to_chi(xi), 0.0, 1.0))
    return np.array([a0, float(np.clip(inputs.renewable.forecast(0.0), 0, 1)), chi])


# ---------------------------------------------------------------------------
# path ensembles

@dataclass
class PathEnsemble:
    times: np.ndarray            # (n+1,)
    states: np.ndarray           # (m, n+1, 3)
    seed: int
    controls: np.ndarray | None = None   # (m, n+1, 4): p_a, p_f, p_tx, p_s
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def m_paths(self) -> int:
        return self.states.shape[0]

    def path(self, m: int):
        return self.times, self.states[m]

    def to_csv(self, path, provenance: str | None = None) -> None:
        with open(path, "w", newline="") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            wr = csv.writer(fh)
            cols = ["time", "path_id", "a", "r", "chi"]
            if self.controls is not None:
                cols += ["p_a", "p_f", "p_tx", "p_s"]
            wr.writerow(cols)
            for m in range(self.m_paths):
                for n, t in enumerate(self.times):
                    row = [repr(float(t)), m] + [repr(float(v)) for v in self.states[m, n]]
                    if self.controls is not None:
                        row += [repr(float(v)) for v in self.controls[m, n]]
                    wr.writerow(row)


class BatchPolicy:
    """Adapter turning a per-state callable into a batch policy."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def controls(self, t, states):
        out = np.empty((states.shape[0], 4))
        for m in range(states.shape[0]):
            try:
                out[m] = self.fn(t, StateVector.from_array(states[m])).as_array()
            except Exception as exc:
                raise RuntimeError(f"policy failed on path {m} at t={t}: {exc}") from exc
        return out


def simulate_controlled_paths(policy, m_paths: int, n_steps: int, seed: int, inputs: ScenarioInputs,
                              a0: float | None = None, initial_states=None) -> PathEnsemble:
    """Euler-Maruyama paths on a uniform grid of n_steps over [0, T].

    `policy` is either an object with a batch method controls(t, states) or a
    callable (t, StateVector) -> ControlVector."""
    if m_paths < 1 or n_steps < 1:
        raise ValueError("m_paths and n_steps must be >= 1")
    if not hasattr(policy, "controls"):
        policy = BatchPolicy(policy)
    T = inputs.horizon_hours
    times = np.linspace(0.0, T, n_steps + 1)
    dt = T / n_steps
    states = np.empty((m_paths, n_steps + 1, 3))
    controls = np.empty((m_paths, n_steps + 1, 4))
    x = sample_initial_states(inputs.a0 if a0 is None else a0, m_paths, seed, inputs) \
        if initial_states is None else np.array(initial_states, dtype=float)
    states[:, 0] = x
    for n in range(n_steps):
        try:
            u = policy.controls(times[n], x)
        except Exception as exc:
            raise RuntimeError(f"policy evaluation failed at step {n} (t={times[n]}): {exc}") from exc
        controls[:, n] = u
        z = normals(seed, STREAM_DYNAMICS, n, m_paths, 3)
        x = em_step_batch(times[n], x, u, dt, z, inputs)
        states[:, n + 1] = x
    controls[:, n_steps] = policy.controls(times[n_steps], x)
    return PathEnsemble(times=times, states=states, seed=seed, controls=controls)


def brownian_bridge_point(path, t_query, seed_context=None, inputs: ScenarioInputs | None = None) -> StateVector:
    """State of one path at t_query.

    Stored grid times return the stored state exactly.  Between grid times the
    conditional mean is the linear interpolant; if a numpy Generator is passed
    as seed_context (and inputs are given) a bridge sample is drawn with the
    diffusion frozen at the left endpoint, variance 2G (t-t0)(t1-t)/(t1-t0)."""
    times, states = (path.times, path.states) if hasattr(path, "times") else path
    times = np.asarray(times)
    if t_query < times[0] or t_query > times[-1]:
        raise ValueError(f"t_query={t_query} outside [{times[0]}, {times[-1]}]")
    idx = int(np.searchsorted(times, t_query))
    if idx < len(times) and times[idx] == t_query:
        return StateVector.from_array(states[idx])
    t0, t1 = times[idx - 1], times[idx]
    w = (t_query - t0) / (t1 - t0)
    mean = (1.0 - w) * states[idx - 1] + w * states[idx]
    if seed_context is None or inputs is None:
        return StateVector.from_array(mean)
    g = diffusion_batch(t0, states[idx - 1][None, :], inputs)[0]
    var = 2.0 * g * (t_query - t0) * (t1 - t_query) / (t1 - t0)
    sample = mean + np.sqrt(var) * seed_context.standard_normal(3)
    sample = np.clip(sample, 0.0, 1.0)
    return StateVector.from_array(sample)


# ---------------------------------------------------------------------------
# uncontrolled ensembles (unscaled forms)

@dataclass
class EnsembleSummary:
    times: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    lower: np.ndarray   # 2.5% quantile
    upper: np.ndarray   # 97.5% quantile
    final: np.ndarray   # all path values at the last time

    @property
    def stderr(self):
        return self.std / np.sqrt(self.final.size)


def _summarize(values, times, record, acc):
    acc["t"].append(times)
    acc["mean"].append(values.mean())
    acc["std"].append(values.std(ddof=1) if values.size > 1 else 0.0)
    lo, hi = np.quantile(values, [0.025, 0.975])
    acc["lo"].append(lo)
    acc["hi"].append(hi)


def _finish(acc, final):
    return EnsembleSummary(times=np.array(acc["t"]), mean=np.array(acc["mean"]), std=np.array(acc["std"]),
                           lower=np.array(acc["lo"]), upper=np.array(acc["hi"]), final=final)


def simulate_fading(fading: FadingParams, n_paths: int, n_steps: int, horizon: float, seed: int,
                    xi0=None, record_every: int = 1) -> EnsembleSummary:
    """Unscaled fading ensemble: d xi = -theta (xi - xi_floor - mu) dt + sqrt(2 theta (xi - xi_floor)) dW.

    Only the floor is enforced; no truncation at chi_bar."""
    dt = horizon / n_steps
    if xi0 is None:
        xi = sample_initial_fading(n_paths, seed, fading)
    else:
        xi = np.full(n_paths, float(xi0))
    acc = {k: [] for k in ("t", "mean", "std", "lo", "hi")}
    _summarize(xi, 0.0, True, acc)
    for n in range(n_steps):
        z = normals(seed, STREAM_FADING, n, n_paths, 1)[:, 0]
        y = xi - fading.xi_floor
        xi = xi - fading.theta * (y - fading.mu) * dt + np.sqrt(2.0 * fading.theta * y * dt) * z
        np.maximum(xi, fading.xi_floor, out=xi)
        if (n + 1) % record_every == 0 or n + 1 == n_steps:
            _summarize(xi, (n + 1) * dt, True, acc)
    return _finish(acc, xi)


def simulate_scaled_fading(fading: FadingParams, n_paths: int, n_steps: int, horizon: float, seed: int,
                           chi0) -> np.ndarray:
    """Same noise as simulate_fading but in the scaled coordinate, floor-clamped only."""
    dt = horizon / n_steps
    chi = np.full(n_paths, float(chi0))
    L = fading.span
    for n in range(n_steps):
        z = normals(seed, STREAM_FADING, n, n_paths, 1)[:, 0]
        chi = chi - fading.theta * (chi - fading.mu / L) * dt + np.sqrt(2.0 * fading.theta * chi / L * dt) * z
        np.maximum(chi, 0.0, out=chi)
    return chi


def simulate_renewable(inputs: ScenarioInputs, n_paths: int, n_steps: int, seed: int,
                       record_every: int = 1) -> EnsembleSummary:
    """Uncontrolled renewable-output ensemble around the forecast."""
    ren = inputs.renewable
    T = inputs.horizon_hours
    dt = T / n_steps
    r = sample_initial_renewable(n_paths, seed, inputs)
    acc = {k: [] for k in ("t", "mean", "std", "lo", "hi")}
    _summarize(r, 0.0, True, acc)
    for n in range(n_steps):
        t = n * dt
        z = normals(seed, STREAM_RENEWABLE, n, n_paths, 1)[:, 0]
        p, pdot = float(ren.forecast(t)), float(ren.forecast_deriv(t))
        r = r + (pdot - theta_of_t(t, ren) * (r - p)) * dt \
            + np.sqrt(2.0 * ren.alpha * ren.theta0 * r * (1.0 - r) * dt) * z
        np.clip(r, 0.0, 1.0, out=r)
        if (n + 1) % record_every == 0 or n + 1 == n_steps:
            _summarize(r, (n + 1) * dt, True, acc)
    return _finish(acc, r)
