"""Dual maximization over piecewise-constant multipliers.

Each dual evaluation solves the HJB equation for the current multiplier and
estimates the subgradient (time-integrated QoS violation minus epsilon per
subinterval) from optimally controlled Monte Carlo paths.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dynamics import PathEnsemble, brownian_bridge_point, simulate_controlled_paths
from .hjb import CostToGoField, FieldPolicy, GridSpec, MultiplierFunction, dual_value, solve_hjb
from .model import ScenarioInputs, outage_proportion

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class BundleParams:
    """Settings of the 1-D proximal bundle routine."""
    tol_f: float = 0.1          # function-change tolerance
    tol_term: float = 1e-2      # predicted-increase tolerance (relative to 1+|f|)
    tol_term2: float = 1e-2     # subgradient-aggregate tolerance
    distance: float = 0.5       # locality (distance-measure) weight
    line_search: float = 0.2    # fraction of predicted increase needed for a serious step
    max_step: float = 10.0      # trust region, relative to max(1, |center|)
    max_iter: int = 50
    max_eval: int = 100
    n_small: int = 5            # consecutive small changes before stopping


@dataclass(frozen=True)
class SolverSettings:
    tol: float = 0.1
    tol_init: float = 1.0
    max_iter: int = 50
    n_bar_iter: int = 10
    n_lmbm_iter: int = 50
    beta_f: float = 5.0
    c_ssm: float | None = None
    m_sg: int = 1000
    n_bar_t: int = 64
    ell_max: int | None = None
    init_cap: int = 40
    n_init_samples: int = 4096
    step_rule: str = "adaptive"
    adaptive_step: float = 0.5
    bundle: BundleParams = field(default_factory=BundleParams)

    def __post_init__(self):
        if self.tol <= 0 or self.tol_init <= 0 or self.beta_f <= 1:
            raise ValueError("need tol, tol_init > 0 and beta_f > 1")
        if self.m_sg < 1 or self.n_bar_t < 1 or self.max_iter < 0:
            raise ValueError("invalid iteration or sample counts")
        if self.step_rule not in ("normalized", "adaptive"):
            raise ValueError(f"unknown step_rule {self.step_rule!r}")

    @property
    def level_cap(self) -> int:
        return self.ell_max if self.ell_max is not None else self.n_bar_t


@dataclass
class SubgradientEstimate:
    components: np.ndarray      # integrated violation minus epsilon per subinterval (hours)
    stderr: np.ndarray
    m_paths: int
    n_quad: int
    interval: np.ndarray        # subinterval lengths
    point_means: np.ndarray     # mean violation indicator at each quadrature time
    point_times: np.ndarray
    epsilon: float
    ensemble: PathEnsemble | None = None

    @property
    def level(self) -> int:
        return self.components.size

    @property
    def norm(self) -> float:
        """Euclidean norm divided by sqrt(level)."""
        return float(np.linalg.norm(self.components) / math.sqrt(self.level))

    def regrouped(self, level: int) -> np.ndarray:
        """Components the same quadrature points give on a partition with `level` subintervals."""
        n = self.point_means.size
        if n % level:
            raise ValueError(f"level {level} does not divide {n} quadrature points")
        h = self.interval.sum() / n
        return ((self.point_means - self.epsilon) * h).reshape(level, n // level).sum(axis=1)

    def regrouped_norm(self, level: int, amplitudes=None) -> float:
        g = self.regrouped(level)
        if amplitudes is not None:
            g = projected(g, amplitudes)
        return float(np.linalg.norm(g) / math.sqrt(level))

    def projected_norm(self, amplitudes) -> float:
        """Norm after zeroing components that push an amplitude already at zero further down."""
        return float(np.linalg.norm(projected(self.components, amplitudes)) / math.sqrt(self.level))


def projected(g, amplitudes) -> np.ndarray:
    g = np.array(g, dtype=float)
    g[(np.asarray(amplitudes) <= 0) & (g < 0)] = 0.0
    return g


class PolicyWithFlags:
    """Wraps a batch policy and derives violation flags from its transmit power."""

    def __init__(self, policy, inputs: ScenarioInputs):
        self.policy = policy
        self.inputs = inputs

    def controls(self, t, states):
        return self.policy.controls(t, states)

    def violations(self, t, states):
        if hasattr(self.policy, "violations"):
            return self.policy.violations(t, states)
        u = self.policy.controls(t, states)
        xi = self.inputs.fading.to_xi(np.clip(states[:, 2], 0.0, 1.0))
        phi = outage_proportion(u[:, 2], xi, self.inputs.user_dist, self.inputs.model)
        return (np.asarray(phi) >= self.inputs.qos.phi_th).astype(float)


class OptimalPolicy(FieldPolicy):
    def violations(self, t, states):
        return self.evaluate(t, states)[:, 7]


def _bridge_states(ens: PathEnsemble, t: float) -> np.ndarray:
    idx = int(np.searchsorted(ens.times, t))
    if idx < ens.times.size and ens.times[idx] == t:
        return ens.states[:, idx]
    return np.array([brownian_bridge_point(ens.path(m), t).as_array() for m in range(ens.m_paths)])


def estimate_subgradient(field_: CostToGoField | None, multiplier: MultiplierFunction, settings: SolverSettings,
                         seed: int, inputs: ScenarioInputs, policy=None, keep_ensemble: bool = False
                         ) -> SubgradientEstimate:
    """Monte Carlo estimate of the dual subgradient, left-endpoint rule with n_bar_t/level points per subinterval."""
    level = multiplier.level
    if settings.n_bar_t % level:
        raise ValueError(f"level {level} does not divide n_bar_t={settings.n_bar_t}")
    n_quad = settings.n_bar_t // level
    if policy is None:
        if field_ is None:
            raise ValueError("need a solved field or an explicit policy")
        policy = OptimalPolicy(field_, inputs, multiplier)
    elif not hasattr(policy, "violations"):
        policy = PolicyWithFlags(policy, inputs)
    ens = simulate_controlled_paths(policy, settings.m_sg, settings.n_bar_t, seed, inputs)
    T = inputs.horizon_hours
    eps = inputs.qos.epsilon
    edges = multiplier.breakpoints
    lengths = np.diff(edges)
    per_path = np.zeros((settings.m_sg, level))
    point_times = []
    point_means = []
    for i in range(level):
        h = lengths[i] / n_quad
        for n in range(n_quad):
            t = edges[i] + n * h
            flags = policy.violations(t, _bridge_states(ens, t))
            per_path[:, i] += (flags - eps) * h
            point_times.append(t)
            point_means.append(flags.mean())
    comps = per_path.mean(axis=0)
    se = per_path.std(axis=0, ddof=1) / math.sqrt(settings.m_sg) if settings.m_sg > 1 else np.zeros(level)
    lo, hi = -eps * lengths, (1.0 - eps) * lengths
    assert np.all(comps >= lo - 1e-9) and np.all(comps <= hi + 1e-9), "subgradient outside its bounds"
    return SubgradientEstimate(components=comps, stderr=se, m_paths=settings.m_sg, n_quad=n_quad, interval=lengths,
                               point_means=np.array(point_means), point_times=np.array(point_times), epsilon=eps,
                               ensemble=ens if keep_ensemble else None)


# ---------------------------------------------------------------------------
# evaluation oracle and trace

@dataclass
class Evaluation:
    amplitudes: np.ndarray
    value: float
    value_se: float
    subgradient: np.ndarray
    subgradient_se: np.ndarray
    norm: float
    estimate: SubgradientEstimate | None = None
    field: CostToGoField | None = None


@dataclass
class TraceRecord:
    stage: str
    level: int
    iteration: int
    amplitudes: tuple
    dual_value: float
    subgrad_norm: float
    seconds: float
    accepted: bool


@dataclass
class DualTrace:
    records: list = field(default_factory=list)
    converged: bool = False
    final_norm: float = float("nan")

    def add(self, rec: TraceRecord):
        self.records.append(rec)

    def best(self) -> TraceRecord:
        return max(self.records, key=lambda r: r.dual_value)

    def to_csv(self, path, provenance: str | None = None, include_seconds: bool = True):
        with open(path, "w", newline="") as fh:
            if provenance:
                fh.write(f"# {provenance}\n")
            wr = csv.writer(fh)
            wr.writerow(["level", "iter", "dual_value", "subgrad_norm", "amplitudes", "seconds", "stage", "accepted"])
            for r in self.records:
                wr.writerow([r.level, r.iteration, repr(r.dual_value), repr(r.subgrad_norm),
                             json.dumps(list(r.amplitudes)), f"{r.seconds:.3f}" if include_seconds else "",
                             r.stage, int(r.accepted)])


def level_seed(seed: int, level: int) -> int:
    """Seed of the common-random-number stream used at one multiplier level."""
    return int(np.random.SeedSequence(int(seed), spawn_key=(1000 + int(level),)).generate_state(1)[0])


class DualOracle:
    """Dual value and subgradient for a multiplier, by HJB solve plus Monte Carlo.

    Results are cached per amplitude vector; the field of the best point seen is kept."""

    def __init__(self, inputs: ScenarioInputs, grid: GridSpec, settings: SolverSettings, seed: int = 0):
        self.inputs = inputs
        self.grid = grid
        self.settings = settings
        self.seed = int(seed)
        self.cache: dict = {}
        self.best: Evaluation | None = None
        self.n_solves = 0

    def __call__(self, amplitudes) -> Evaluation:
        amps = tuple(float(a) for a in np.atleast_1d(amplitudes))
        if amps in self.cache:
            return self.cache[amps]
        mult = MultiplierFunction(amps, self.inputs.horizon_hours)
        fld = solve_hjb(mult, self.grid, self.inputs)
        self.n_solves += 1
        theta, se = dual_value(fld, self.inputs.a0, self.inputs, self.settings.n_init_samples, self.seed)
        est = estimate_subgradient(fld, mult, self.settings, level_seed(self.seed, mult.level), self.inputs)
        ev = Evaluation(np.array(amps), theta, se, est.components, est.stderr, est.projected_norm(amps), est, None)
        self.cache[amps] = ev
        if self.best is None or theta > self.best.value:
            ev.field = fld
            if self.best is not None:
                self.best.field = None
            self.best = ev
        return ev

    def field_for(self, amplitudes) -> CostToGoField:
        ev = self(amplitudes)
        if ev.field is None:
            ev.field = solve_hjb(MultiplierFunction(tuple(ev.amplitudes), self.inputs.horizon_hours),
                                 self.grid, self.inputs)
        return ev.field


def _record(trace: DualTrace | None, stage, ev: Evaluation, it, start, best_value):
    accepted = best_value is None or ev.value > best_value
    if trace is not None:
        trace.add(TraceRecord(stage, ev.amplitudes.size, it, tuple(ev.amplitudes.tolist()), ev.value, ev.norm,
                              time.perf_counter() - start, accepted))
    return accepted


# ---------------------------------------------------------------------------
# algorithms

class InitializationError(RuntimeError):
    pass


def initialize_amplitude(settings: SolverSettings, inputs: ScenarioInputs, seed: int = 0, oracle=None,
                         grid: GridSpec | None = None, trace: DualTrace | None = None) -> float:
    """Geometric search from 1 until the 1-D subgradient changes sign or is small."""
    oracle = oracle or DualOracle(inputs, grid or GridSpec(), settings, seed)
    eps = inputs.qos.epsilon
    tol = settings.tol_init * eps
    start = time.perf_counter()
    x = 1.0
    ev = oracle([x])
    _record(trace, "init", ev, 0, start, None)
    g = float(ev.subgradient[0])
    if abs(g) <= tol:
        return x
    up = g > 0
    for it in range(1, settings.init_cap + 1):
        x = x * settings.beta_f if up else x / settings.beta_f
        ev = oracle([x])
        _record(trace, "init", ev, it, start, None)
        g_new = float(ev.subgradient[0])
        if (g_new > 0) != up or abs(g_new) <= tol:
            return x
    raise InitializationError(
        f"no sign change of the subgradient after {settings.init_cap} factor-{settings.beta_f} steps "
        f"(last amplitude {x:.3g}); the optimal multiplier is typically of order 1/epsilon = {1 / eps:.3g} "
        "times the cost scale, try starting there")


def _prox_step(center, f_c, cuts, u, lower, upper):
    """Maximize min_j(f_c + b_j + g_j (x - center)) - u/2 (x - center)^2 on [lower, upper].

    Returns (x, model value at x)."""
    cands = [lower, upper, center]
    for b, g in cuts:
        cands.append(center + g / u)
    for i in range(len(cuts)):
        for j in range(i + 1, len(cuts)):
            bi, gi = cuts[i]
            bj, gj = cuts[j]
            if gi != gj:
                cands.append(center + (bj - bi) / (gi - gj))

    def model(x):
        return min(f_c + b + g * (x - center) for b, g in cuts)

    best_x, best_v = center, model(center)
    for x in cands:
        x = min(max(x, lower), upper)
        v = model(x) - 0.5 * u * (x - center) ** 2
        if v > best_v + 1e-15 * (1 + abs(best_v)):
            best_x, best_v = x, v
    return best_x, model(best_x)


def bundle_maximize(fun: Callable, start: float, params: BundleParams = BundleParams(), lower: float = 0.0,
                    max_iter: int | None = None):
    """Proximal bundle ascent for a concave 1-D function.

    `fun(x)` returns (value, subgradient, value_stderr).  Returns
    (best_x, best_value, history) with history a list of (x, value, slope)."""
    max_iter = params.max_iter if max_iter is None else max_iter
    f0, g0, se0 = fun(start)
    history = [(start, f0, g0)]
    center, f_c = start, f0
    best_x, best_f = start, f0
    points = [(start, f0, g0)]
    u = abs(g0) / max(1.0, abs(start)) if g0 != 0 else 1.0
    n_eval, small = 1, 0
    for _ in range(max_iter):
        cuts = []
        for x_j, f_j, g_j in points:
            lin = f_j + g_j * (center - x_j) - f_c       # >= 0 for exact concave data
            b = lin if lin >= 0 else max(lin, params.distance * u * (center - x_j) ** 2)
            cuts.append((b, g_j))
        radius = params.max_step * max(1.0, abs(center))
        x_new, m_new = _prox_step(center, f_c, cuts, u, max(lower, center - radius), center + radius)
        predicted = m_new - f_c
        if predicted <= params.tol_term * 1e-3 * (1.0 + abs(f_c)) or abs(x_new - center) <= 1e-12 * (1 + abs(center)):
            break
        if n_eval >= params.max_eval:
            break
        f_new, g_new, _ = fun(x_new)
        n_eval += 1
        history.append((x_new, f_new, g_new))
        points.append((x_new, f_new, g_new))
        if f_new > best_f:
            best_x, best_f = x_new, f_new
        if f_new - f_c >= params.line_search * predicted:
            small = small + 1 if abs(f_new - f_c) <= params.tol_f * 1e-3 * (1.0 + abs(f_c)) else 0
            if f_new - f_c >= 0.5 * predicted:
                u = max(u * 0.5, 1e-12)
            center, f_c = x_new, f_new
        else:
            u *= 2.0
            small = small + 1 if abs(f_new - f_c) <= params.tol_f * 1e-3 * (1.0 + abs(f_c)) else 0
        if small >= params.n_small:
            break
        if len(points) > 60:
            points = points[-60:]
    return best_x, best_f, history


def bundle_polish(start: float, settings: SolverSettings, inputs: ScenarioInputs, seed: int = 0, oracle=None,
                  grid: GridSpec | None = None, trace: DualTrace | None = None) -> float:
    """Polish the 1-D amplitude with the proximal bundle routine; returns the best-seen amplitude."""
    if start <= 0:
        raise ValueError("start must be positive")
    oracle = oracle or DualOracle(inputs, grid or GridSpec(), settings, seed)
    t0 = time.perf_counter()
    state = {"best": None, "it": 0}

    def fun(x):
        ev = oracle([x])
        acc = _record(trace, "bundle", ev, state["it"], t0, state["best"])
        state["it"] += 1
        if acc:
            state["best"] = ev.value
        return ev.value, float(ev.subgradient[0]), ev.value_se

    best_x, best_f, _ = bundle_maximize(fun, float(start), settings.bundle, max_iter=settings.n_lmbm_iter)
    return float(best_x)


@dataclass
class SSMResult:
    best: np.ndarray
    best_value: float
    converged: bool
    last_norm: float
    iterations: int


def ssm_optimize(start, settings: SolverSettings, inputs: ScenarioInputs, seed: int = 0, oracle=None,
                 grid: GridSpec | None = None, trace: DualTrace | None = None) -> SSMResult:
    """Projected stochastic subgradient ascent.

    step_rule "normalized": x <- max(0, x + step g/|g|) with step = C for the
    first n_bar_iter iterations and C/(k+1) afterwards.
    step_rule "adaptive": per-amplitude multiplicative steps in log space whose
    size grows while the subgradient sign persists and halves when it flips.

    Returns the highest-valued iterate among those meeting the tolerance, or
    the highest-valued iterate overall if none does."""
    x = np.asarray(start, dtype=float).copy()
    if np.any(x < 0):
        raise ValueError("start amplitudes must be nonnegative")
    oracle = oracle or DualOracle(inputs, grid or GridSpec(), settings, seed)
    tol = settings.tol * inputs.qos.epsilon
    c = settings.c_ssm if settings.c_ssm is not None else 0.05 * (np.linalg.norm(x) + 1.0)
    t0 = time.perf_counter()
    ev = oracle(x)
    best, best_value = x.copy(), ev.value
    ok_best, ok_value = (x.copy(), ev.value) if ev.norm <= tol else (None, -np.inf)
    _record(trace, "ssm", ev, 0, t0, None)
    log_step = np.full(x.size, settings.adaptive_step)
    g_prev = np.zeros(x.size)
    k = 0
    while ev.norm > tol and k < settings.max_iter:
        k += 1
        g = ev.subgradient
        gn = np.linalg.norm(g)
        if gn < 1e-14:
            break
        if settings.step_rule == "normalized":
            step = c if k <= settings.n_bar_iter else c / (k + 1)
            x = np.maximum(x + step * g / gn, 0.0)
        else:
            x = _adaptive_update(x, g, g_prev, log_step)
            g_prev = g
        ev = oracle(x)
        if _record(trace, "ssm", ev, k, t0, best_value):
            best, best_value = x.copy(), ev.value
        if ev.norm <= tol and ev.value > ok_value:
            ok_best, ok_value = x.copy(), ev.value
    if ok_best is not None:
        return SSMResult(best=ok_best, best_value=ok_value, converged=True, last_norm=ev.norm, iterations=k)
    return SSMResult(best=best, best_value=best_value, converged=False, last_norm=ev.norm, iterations=k)


def _adaptive_update(x, g, g_prev, log_step, grow=1.2, shrink=0.5, max_log_step=1.0):
    """Sign-based multiplicative step per amplitude; log_step is updated in place."""
    flip = g * g_prev < 0
    keep = g * g_prev > 0
    log_step[flip] *= shrink
    log_step[keep] = np.minimum(log_step[keep] * grow, max_log_step)
    scale = max(float(x.max()), 1.0)
    new = x.copy()
    active = g != 0
    # amplitudes at zero restart from a small positive seed when pushed upward
    revive = active & (x <= 0) & (g > 0)
    new[revive] = 1e-3 * scale
    move = active & ~revive
    new[move] = x[move] * np.exp(np.sign(g[move]) * log_step[move])
    new[new < 1e-9 * scale] = 0.0
    return new


def refine_multiplier(current: MultiplierFunction, n_bar_t: int | None = None) -> MultiplierFunction:
    """Double the number of pieces, copying each amplitude to both halves."""
    new_level = 2 * current.level
    if n_bar_t is not None and new_level > n_bar_t:
        raise ValueError(f"refinement to level {new_level} would exceed n_bar_t={n_bar_t}")
    return MultiplierFunction(tuple(np.repeat(current.as_array(), 2)), current.horizon)


@dataclass
class DualResult:
    field: CostToGoField
    multiplier: MultiplierFunction
    trace: DualTrace
    value: float
    value_se: float
    subgradient: SubgradientEstimate
    converged: bool
    n_solves: int
    norm: float = float("nan")    # projected, normalized subgradient norm at the result


def optimize_dual(settings: SolverSettings, inputs: ScenarioInputs, seed: int = 0, grid: GridSpec | None = None,
                  oracle=None) -> DualResult:
    """Initialization, bundle polish, then refine-and-SSM until the tolerance holds."""
    grid = grid or GridSpec()
    oracle = oracle or DualOracle(inputs, grid, settings, seed)
    trace = DualTrace()
    tol = settings.tol * inputs.qos.epsilon
    T = inputs.horizon_hours
    try:
        x0 = initialize_amplitude(settings, inputs, seed, oracle, trace=trace)
    except InitializationError as exc:
        # a subgradient that stays negative all the way down points at an inactive constraint
        ev0 = oracle([0.0])
        _record(trace, "init", ev0, settings.init_cap + 1, time.perf_counter(), None)
        if ev0.subgradient[0] > 0:
            raise InitializationError(f"[initialization] {exc}") from exc
        x0 = 0.0
    except Exception as exc:
        raise RuntimeError(f"[initialization] {exc}") from exc
    try:
        x1 = bundle_polish(x0, settings, inputs, seed, oracle, trace=trace) if x0 > 0 else 0.0
    except Exception as exc:
        raise RuntimeError(f"[bundle polish] {exc}") from exc
    mult = MultiplierFunction((x1,), T)
    converged = False
    cap = min(settings.level_cap, settings.n_bar_t)
    if cap <= 1:
        converged = oracle(mult.as_array()).norm <= tol
    while mult.level < cap:
        mult = refine_multiplier(mult, settings.n_bar_t)
        try:
            res = ssm_optimize(mult.as_array(), settings, inputs, seed, oracle, trace=trace)
        except Exception as exc:
            raise RuntimeError(f"[ssm level {mult.level}] {exc}") from exc
        mult = MultiplierFunction(tuple(res.best), T)
        ev = oracle(res.best)
        if ev.norm <= tol:
            finer = 2 * mult.level
            if finer > cap or settings.n_bar_t % finer or ev.estimate is None or \
                    ev.estimate.regrouped_norm(finer, np.repeat(ev.amplitudes, 2)) <= tol:
                converged = True
                break
    ev = oracle(mult.as_array())
    fld = oracle.field_for(mult.as_array())
    trace.converged = converged
    trace.final_norm = ev.norm
    return DualResult(field=fld, multiplier=mult, trace=trace, value=ev.value, value_se=ev.value_se,
                      subgradient=ev.estimate, converged=converged, n_solves=getattr(oracle, "n_solves", 0),
                      norm=ev.norm)
