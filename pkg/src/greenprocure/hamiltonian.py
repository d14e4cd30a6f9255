"""Per-cell minimization of the discretized Hamiltonian.

The objective at a cell is

    F1+ * D+ - F1- * D- + H(t, x, controls)

with F1 = -(battery flow)/A_max.  Writing the battery flow as
f = p_a + p_s - R, the battery part equals m_b * f where m_b = -D-/A_max on
the discharging side (f >= 0) and m_b = -D+/A_max on the charging side.  Each
side is handled separately; on a side the objective is convex in the transmit
power once the outage indicator is fixed, and the supply part (grid purchase,
sale, battery) has a closed form whose derivative is piecewise affine in the
demand.  The indicator splits the power axis at the QoS threshold power; a
single unconstrained 1-D minimization plus one evaluation at the threshold
decides between the QoS-satisfying and violating branches.
"""
from __future__ import annotations

import numpy as np
import numba as nb

from .model import GaussianUsers, ScenarioInputs, UniformUsers, battery_limits, traffic_count

# layout of the packed constant vector handed to the compiled kernels
C_SCAL, C_OFF, P_TX_MAX, A_MAX, W, C1, C2, P_R_MAX, DIST_KIND, Q_EXP, G_COEF, S_COEF, \
    PHI_TH, EPS, D5_BASE, P_CHG, P_DIS, RAMP, XI_FLOOR, XI_SPAN, MODE = range(21)
N_CONSTS = 21

MODE_RELAXED = 0.0
MODE_FORCED = 1.0

# branch margin: the satisfying branch starts slightly above the threshold power
# so that its outage proportion is strictly below phi_th
THRESHOLD_MARGIN = 1e-9
TIE_TOL = 1e-12


def pack_constants(inputs: ScenarioInputs, mode: float = MODE_RELAXED) -> np.ndarray:
    m, dist = inputs.model, inputs.user_dist
    if m.eta < 2.0:
        raise ValueError("the analytic minimizer requires a path-loss exponent eta >= 2")
    q = 2.0 / m.eta
    if isinstance(dist, GaussianUsers):
        kind, g = 1.0, 1.0 / (2.0 * dist.sigma_u ** 2)
        target = -np.log(inputs.qos.phi_th)
    elif isinstance(dist, UniformUsers):
        kind, g = 0.0, np.pi / dist.area
        target = 1.0 - inputs.qos.phi_th
    else:
        raise TypeError(f"unknown user distribution {dist!r}")
    s = m.kappa / m.snr_linear_noise
    c = np.zeros(N_CONSTS)
    c[C_SCAL], c[C_OFF], c[P_TX_MAX], c[A_MAX], c[W] = m.c_scal, m.c_offset, m.p_tx_max, m.a_max, m.w
    c[C1], c[C2], c[P_R_MAX] = m.c1_emission, m.c2_emission, m.p_r_max
    c[DIST_KIND], c[Q_EXP], c[G_COEF], c[S_COEF] = kind, q, g, s
    c[PHI_TH], c[EPS] = inputs.qos.phi_th, inputs.qos.epsilon
    c[D5_BASE] = (target / g) ** (1.0 / q) / s
    b = inputs.battery
    c[P_CHG], c[P_DIS], c[RAMP] = b.p_charge_max, b.p_discharge_max, b.ramp_fraction
    c[XI_FLOOR], c[XI_SPAN] = inputs.fading.xi_floor, inputs.fading.span
    c[MODE] = mode
    return c


@nb.njit(cache=True, inline="always")
def _battery_caps(a, consts):
    ramp = consts[RAMP]
    if ramp > 0.0:
        chg = consts[P_CHG] * min(1.0, (1.0 - a) / ramp)
        dis = consts[P_DIS] * min(1.0, a / ramp)
    else:
        chg = consts[P_CHG] if a < 1.0 else 0.0
        dis = consts[P_DIS] if a > 0.0 else 0.0
    return max(chg, 0.0), max(dis, 0.0)


@nb.njit(cache=True, inline="always")
def _revenue(P, amp, beta, q, kind, branch):
    """Revenue term -amp*(1 - outage) and its first two derivatives in P.

    For the uniform law `branch` pins the formula (0 unsaturated, 1 saturated,
    -1 automatic) so one-sided limits at the saturation kink can be taken."""
    if amp == 0.0:
        return 0.0, 0.0, 0.0
    if q == 1.0:
        x = beta * P
        x1 = beta
        x2 = 0.0
    else:
        Pe = P if P > 1e-300 else 1e-300
        x = beta * Pe ** q
        x1 = q * x / Pe
        x2 = (q - 1.0) * x1 / Pe
    if kind == 1.0:
        e = np.exp(-x)
        return -amp * (1.0 - e), -amp * e * x1, -amp * e * (x2 - x1 * x1)
    if branch == 0 or (branch == -1 and x < 1.0):
        return -amp * x, -amp * x1, -amp * x2
    return -amp, 0.0, 0.0


@nb.njit(cache=True, inline="always")
def _supply(D, R, L, U, mb, k1, k2, ks):
    """Cheapest way to cover demand D on one battery side.

    Returns (cost, p_f, p_s, flow, g0, g1) where the local derivative of the
    cost in D is g0 + g1*D on the piece containing D (right-continuous)."""
    if mb <= ks:
        if D <= R + U:
            ps = U - D + R
            pf = 0.0
            g0, g1 = ks, 0.0
        else:
            pf = D - R - U
            ps = 0.0
            g0, g1 = k1 - 2.0 * k2 * (R + U), 2.0 * k2
    else:
        if D < R + L:
            pf = 0.0
            ps = L - D + R
            g0, g1 = ks, 0.0
        else:
            ps = 0.0
            if k2 > 0.0:
                pst = (mb - k1) / (2.0 * k2)
            elif mb > k1:
                pst = np.inf
            else:
                pst = -np.inf
            shift = R + L if R + L > 0.0 else 0.0
            hi = D - shift
            lo_moving = D - R - U
            floor_pst = pst if pst > 0.0 else 0.0
            if pst > hi:
                pf = hi
                g0, g1 = k1 - 2.0 * k2 * shift, 2.0 * k2
            elif lo_moving >= floor_pst:
                pf = lo_moving
                g0, g1 = k1 - 2.0 * k2 * (R + U), 2.0 * k2
            else:
                pf = floor_pst
                g0, g1 = mb, 0.0
    flow = D - R - pf + ps
    cost = mb * flow + k1 * pf + k2 * pf * pf - ks * ps
    return cost, pf, ps, flow, g0, g1


@nb.njit(cache=True, inline="always")
def _next_node(left, d3, n0, n1, n2, n3, n4):
    """Smallest breakpoint strictly inside (left, d3), or d3."""
    best = d3
    if n0 > left and n0 < best:
        best = n0
    if n1 > left and n1 < best:
        best = n1
    if n2 > left and n2 < best:
        best = n2
    if n3 > left and n3 < best:
        best = n3
    if n4 > left and n4 < best:
        best = n4
    return best


@nb.njit(cache=True)
def _minimize_power(d1, c0, d3, R, L, U, mb, k1, k2, ks, amp, beta, q, kind):
    """argmin over [0, d3] of revenue(P) + supply(d1*P + c0) (convex in P).

    The supply derivative is affine between known breakpoints, so the pieces are
    scanned left to right until the derivative changes sign; the root inside a
    piece is found by safeguarded Newton, a sign change across a breakpoint
    returns the breakpoint itself."""
    if k2 > 0.0:
        pst = (mb - k1) / (2.0 * k2)
    elif mb > k1:
        pst = np.inf
    else:
        pst = -np.inf
    pos = pst if pst > 0.0 else 0.0
    shift = R + L if R + L > 0.0 else 0.0
    n0 = (R + U - c0) / d1
    n1 = (R + L - c0) / d1
    n2 = (shift + pst - c0) / d1 if pst > 0.0 else np.inf
    n3 = (R + U + pos - c0) / d1
    n4 = np.inf
    if kind == 0.0 and amp > 0.0 and beta > 0.0:
        n4 = beta ** (-1.0 / q)
    left = 0.0
    while left < d3:
        right = _next_node(left, d3, n0, n1, n2, n3, n4)
        mid = 0.5 * (left + right)
        g0, g1 = _supply(d1 * mid + c0, R, L, U, mb, k1, k2, ks)[4:6]
        lb = 0
        if kind == 0.0 and beta * mid ** q >= 1.0:
            lb = 1
        fl = _revenue(left, amp, beta, q, kind, lb)[1] + d1 * (g0 + g1 * (d1 * left + c0))
        if fl >= 0.0:
            return left
        fr = _revenue(right, amp, beta, q, kind, lb)[1] + d1 * (g0 + g1 * (d1 * right + c0))
        if fr > 0.0:
            a, b = left, right
            xk = left
            if kind == 1.0 and q == 1.0:
                # amp*beta*exp(-beta P) = d1 * S'(D): exact when S' is constant on
                # the piece, otherwise a starting point to the right of the root
                slope = d1 * (g0 + g1 * (d1 * left + c0))
                guess = np.log(amp * beta / slope) / beta if slope > 0.0 else right
                if g1 == 0.0 and guess > left and guess < right:
                    return guess
                if guess > left and guess < right:
                    xk = guess
            for _ in range(100):
                _, r1, r2 = _revenue(xk, amp, beta, q, kind, lb)
                f = r1 + d1 * (g0 + g1 * (d1 * xk + c0))
                df = r2 + d1 * d1 * g1
                if f < 0.0:
                    a = xk
                else:
                    b = xk
                if df > 0.0:
                    xn = xk - f / df
                    if not (xn > a and xn < b):
                        xn = 0.5 * (a + b)
                else:
                    xn = 0.5 * (a + b)
                if abs(xn - xk) <= 1e-14 * (1.0 + abs(xk)) or b - a <= 1e-15 * (1.0 + b):
                    xk = xn
                    break
                xk = xn
            return xk
        left = right
    return d3


@nb.njit(cache=True, inline="always")
def _objective(P, d1, c0, R, L, U, mb, k1, k2, ks, amp, beta, q, kind):
    cost, pf, ps, flow, g0, g1 = _supply(d1 * P + c0, R, L, U, mb, k1, k2, ks)
    rev = _revenue(P, amp, beta, q, kind, -1)[0]
    return cost + rev, pf, ps, flow


@nb.njit(cache=True)
def cell_minimize(nu, kb, ks_price, knet, lam, R, chg, dis, xi, dplus, dminus, consts):
    """Minimize the discretized Hamiltonian at one cell.

    Returns (p_tx, p_f, p_s, p_a, flow, value, running, violated) where value
    includes the battery term and running is the running cost alone."""
    w = consts[W]
    d1 = consts[C_SCAL] * nu
    c0 = consts[C_OFF]
    d3 = consts[P_TX_MAX] / nu
    k1 = w * kb + (1.0 - w) * consts[C1]
    k2 = (1.0 - w) * consts[C2]
    ks = w * ks_price
    amp = w * knet * nu
    q = consts[Q_EXP]
    kind = consts[DIST_KIND]
    eps = consts[EPS]
    beta = consts[G_COEF] * (xi * consts[S_COEF] if q == 1.0 else (xi * consts[S_COEF]) ** q)
    d5 = consts[D5_BASE] / xi if xi > 0.0 else np.inf
    forced = consts[MODE] == MODE_FORCED
    d5p = d5 * (1.0 + THRESHOLD_MARGIN)

    best = np.inf
    best_viol = 2.0
    out_p = out_pf = out_ps = out_flow = out_mb = 0.0
    for side in range(2):
        if side == 0:
            L, U, mb = 0.0, dis, -dminus / consts[A_MAX]
        else:
            L, U, mb = -chg, 0.0, -dplus / consts[A_MAX]
        if forced:
            P = d5
            val, pf, ps, flow = _objective(P, d1, c0, R, L, U, mb, k1, k2, ks, amp, beta, q, kind)
            viol = 0.0
            total = val - lam * eps
        else:
            pu = _minimize_power(d1, c0, d3, R, L, U, mb, k1, k2, ks, amp, beta, q, kind)
            val_u, pf_u, ps_u, fl_u = _objective(pu, d1, c0, R, L, U, mb, k1, k2, ks, amp, beta, q, kind)
            if pu >= d5p:
                P, pf, ps, flow, viol = pu, pf_u, ps_u, fl_u, 0.0
                total = val_u - lam * eps
            else:
                P, pf, ps, flow, viol = pu, pf_u, ps_u, fl_u, 1.0
                total = val_u + lam * (1.0 - eps)
                if d5p <= d3:
                    val5, pf5, ps5, fl5 = _objective(d5p, d1, c0, R, L, U, mb, k1, k2, ks, amp, beta, q, kind)
                    t5 = val5 - lam * eps
                    if t5 <= total + TIE_TOL * (1.0 + abs(total)):
                        P, pf, ps, flow, viol, total = d5p, pf5, ps5, fl5, 0.0, t5
        if total < best - TIE_TOL * (1.0 + abs(best)) or \
                (abs(total - best) <= TIE_TOL * (1.0 + abs(best)) and viol < best_viol):
            best, best_viol = total, viol
            out_p, out_pf, out_ps, out_flow, out_mb = P, pf, ps, flow, mb
    D = d1 * out_p + c0
    running = best - out_mb * out_flow
    return out_p, out_pf, out_ps, D - out_pf, out_flow, best, running, best_viol


@nb.njit(cache=True)
def cells_minimize(nu, kb, ks_price, knet, lam, a, r, chi, dplus, dminus, consts):
    """Vectorized cell_minimize over states (arrays of equal length)."""
    m = a.shape[0]
    out = np.empty((m, 8))
    for i in range(m):
        chg, dis = _battery_caps(a[i], consts)
        R = consts[P_R_MAX] * r[i]
        xi = consts[XI_FLOOR] + chi[i] * consts[XI_SPAN]
        res = cell_minimize(nu[i], kb[i], ks_price[i], knet[i], lam[i], R, chg, dis, xi,
                            dplus[i], dminus[i], consts)
        for c in range(8):
            out[i, c] = res[c]
    return out


# ---------------------------------------------------------------------------
# python-facing wrappers

def _time_coefficients(t, inputs: ScenarioInputs):
    pr = inputs.prices
    return (float(traffic_count(t, inputs.traffic)), float(pr.k_b(t)), float(pr.k_s(t)), float(pr.k_net(t)))


def hamiltonian_minimize(t, x, d_plus, d_minus, lambda_val, inputs: ScenarioInputs, forced=False):
    """Analytic minimizer at (t, x); returns (ControlVector, value)."""
    from .model import ControlVector
    consts = pack_constants(inputs, MODE_FORCED if forced else MODE_RELAXED)
    nu, kb, ks, knet = _time_coefficients(t, inputs)
    chg, dis = battery_limits(x.a, inputs.battery)
    R = inputs.model.p_r_max * x.r
    xi = float(inputs.fading.to_xi(x.chi))
    res = cell_minimize(nu, kb, ks, knet, float(lambda_val), R, chg, dis, xi,
                        float(d_plus), float(d_minus), consts)
    p, pf, ps, pa, flow, value, running, viol = res
    if not np.isfinite(value):
        raise ArithmeticError(f"no finite minimizer at t={t}, x={x}")
    return ControlVector(p_a=pa, p_f=pf, p_tx=p, p_s=ps), value


def lagrangian_objective(t, x, ctrl, d_plus, d_minus, lambda_val, inputs: ScenarioInputs):
    """Objective of the per-cell problem for arbitrary feasible controls."""
    from .model import running_cost
    m = inputs.model
    flow = ctrl.p_a + ctrl.p_s - m.p_r_max * x.r
    f1 = -flow / m.a_max
    battery = max(f1, 0.0) * d_plus - max(-f1, 0.0) * d_minus
    return battery + running_cost(t, x, ctrl, lambda_val, inputs)


def hamiltonian_oracle(t, x, d_plus, d_minus, lambda_val, inputs: ScenarioInputs, resolution=50):
    """Brute-force search over a grid of the feasible control set.

    Grid over (p_tx, p_f, p_s); p_a follows from the power balance and p_s is
    gridded over its feasible interval given (p_tx, p_f), which projects every
    candidate onto the constraint set."""
    from .model import ControlVector, outage_proportion
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    m, qos = inputs.model, inputs.qos
    nu, kb, ks, knet = _time_coefficients(t, inputs)
    chg, dis = battery_limits(x.a, inputs.battery)
    R = m.p_r_max * x.r
    xi = float(inputs.fading.to_xi(x.chi))
    d3 = m.p_tx_max / nu
    ptx = np.linspace(0.0, d3, resolution)
    D = m.c_scal * nu * ptx + m.c_offset
    frac = np.linspace(0.0, 1.0, resolution)
    pf = D[:, None] * frac[None, :]
    # battery flow f = D - R - pf + ps must lie in [-chg, dis]
    ps_lo = np.maximum(0.0, -chg - D[:, None] + R + pf)
    ps_hi = dis - D[:, None] + R + pf
    ok = ps_hi >= ps_lo
    ps = ps_lo[..., None] + (np.maximum(ps_hi - ps_lo, 0.0))[..., None] * frac[None, None, :]
    pf3 = np.broadcast_to(pf[..., None], ps.shape)
    D3 = np.broadcast_to(D[:, None, None], ps.shape)
    ptx3 = np.broadcast_to(ptx[:, None, None], ps.shape)
    flow = D3 - R - pf3 + ps
    f1 = -flow / m.a_max
    battery = np.maximum(f1, 0.0) * d_plus - np.maximum(-f1, 0.0) * d_minus
    phi = outage_proportion(ptx, xi, inputs.user_dist, m)
    phi3 = np.broadcast_to(np.asarray(phi)[:, None, None], ps.shape)
    fin = kb * pf3 - ks * ps - knet * nu * (1.0 - phi3)
    env = m.c1_emission * pf3 + m.c2_emission * pf3 ** 2
    ind = (phi3 >= qos.phi_th).astype(float)
    obj = battery + m.w * fin + (1.0 - m.w) * env + lambda_val * (ind - qos.epsilon)
    obj = np.where(ok[..., None], obj, np.inf)
    idx = np.unravel_index(np.argmin(obj), obj.shape)
    ctrl = ControlVector(p_a=float(D3[idx] - pf3[idx]), p_f=float(pf3[idx]),
                         p_tx=float(ptx3[idx]), p_s=float(ps[idx]))
    return ctrl, float(obj[idx])
