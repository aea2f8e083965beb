"""Independent maximizer for the short-horizon scheduling program.

Works directly on the per-slot (store, draw) variables under the battery
ledger constraints, with no threshold structure anywhere: multi-start
constrained gradient ascent along feasible directions, plus an
exhaustive grid cross-check on very short horizons. Its whole purpose is
to certify the threshold solvers, so it deliberately shares no logic
with them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .core import HarvestProfile, RealizedPolicy, StorageSpec
from .rates import RateFunction


@dataclass
class OracleResult:
    """Best feasible point found by the numeric search."""

    s: np.ndarray  # per-slot stored power (W)
    u: np.ndarray  # per-slot drawn power (W)
    policy: RealizedPolicy
    utility: float  # average utility over the horizon
    certified: bool  # all restarts converged and agreed
    restart_utilities: np.ndarray


def _forward_repair(s, u, h, delta, eta, e_max, e0):
    """Pull a candidate point onto the feasible set, walking forward.

    Box-clips both variables, cancels any simultaneous store/draw (which
    never helps when eta <= 1), then caps each slot by what the battery
    can actually absorb or supply at that moment. Clamped slots land
    exactly on the bound.
    """
    s = np.clip(s, 0.0, h)
    u = np.maximum(u, 0.0)
    m = np.minimum(s, u)
    s = s - m
    u = u - m
    n = h.size
    e = np.empty(n + 1)
    level = float(e0)
    e[0] = level
    for k in range(n):
        if u[k] > 0.0:
            if u[k] * delta >= level:
                u[k] = level / delta
                level = 0.0
            else:
                level -= delta * u[k]
        elif s[k] > 0.0 and eta > 0.0:
            inflow = eta * delta * s[k]
            room = e_max - level
            if inflow >= room:
                s[k] = room / (eta * delta)
                level = e_max
            else:
                level += inflow
        e[k + 1] = level
    return s, u, e


def _constraint_rows(h, delta, eta, e_max, e0):
    """All feasibility constraints as rows of A z <= b with z = (s, u).

    Rows: battery-nonnegative prefixes, battery-capacity prefixes (only
    when bounded), and the box faces s >= 0, s <= h, u >= 0. The draw has
    no explicit upper box; the prefix rows already bound it.
    """
    n = h.size
    tri = np.tril(np.ones((n, n)))
    ledger_lo = np.concatenate([-eta * delta * tri, delta * tri], axis=1)
    eye = np.eye(n)
    zero = np.zeros((n, n))
    rows = [ledger_lo]
    rhs = [np.full(n, e0)]
    if math.isfinite(e_max):
        rows.append(-ledger_lo)
        rhs.append(np.full(n, e_max - e0))
    rows.append(np.concatenate([-eye, zero], axis=1))
    rhs.append(np.zeros(n))
    rows.append(np.concatenate([eye, zero], axis=1))
    rhs.append(h.astype(float))
    rows.append(np.concatenate([zero, -eye], axis=1))
    rhs.append(np.zeros(n))
    return np.vstack(rows), np.concatenate(rhs)


def _golden_max(f, hi, iters=60):
    """Maximum of a concave scalar function on [0, hi]; returns (x, f(x))."""
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = 0.0, hi
    c = b - inv * (b - a)
    d = a + inv * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def _ascend(s0, u0, h, delta, eta, e_max, e_init, rate, grad_tol, max_iter):
    """Constrained gradient ascent from one starting point.

    Iterates stay feasible throughout: the gradient is reduced against
    the active constraint faces (non-negative multipliers via NNLS), the
    step runs along that feasible direction up to the first blocking
    face, and a concave line search picks the step length. A plain
    clip-to-feasible retraction is not enough here: it can only cut an
    overdraft, never trade it for extra storage earlier, so it jams at
    non-stationary boundary points. The reduced-gradient norm doubles as
    the convergence certificate.
    """
    n = h.size
    s, u, e = _forward_repair(np.asarray(s0, float), np.asarray(u0, float),
                              h, delta, eta, e_max, e_init)
    z = np.concatenate([s, u])
    a_mat, b_vec = _constraint_rows(h, delta, eta, e_max, e_init)
    row_scale = np.maximum(np.linalg.norm(a_mat, axis=1), 1.0)
    eps_act = 1e-9 * max(1.0, e_init, delta * float(h.sum()), float(h.max()))
    g_scale = max(float(rate.derivative(0.0)) / n, 1e-30)
    tol_dir = grad_tol * max(1.0, g_scale)

    def util_of(zv):
        return float(np.mean(rate.rate(h - zv[:n] + zv[n:])))

    val = util_of(z)
    converged = False
    for _ in range(max_iter):
        d = np.asarray(rate.derivative(h - z[:n] + z[n:]), dtype=float) / n
        g = np.concatenate([-d, d])
        slack = b_vec - a_mat @ z
        active = slack <= eps_act * row_scale
        if np.any(active):
            lam, _ = nnls(a_mat[active].T, g)
            direction = g - a_mat[active].T @ lam
        else:
            direction = g
        if float(np.max(np.abs(direction))) <= tol_dir:
            converged = True
            break
        advance = a_mat @ direction
        blocking = advance > 1e-15 * row_scale
        if np.any(blocking):
            tau_max = float(
                np.min(np.maximum(slack[blocking], 0.0) / advance[blocking])
            )
        else:
            tau_max = 1e6 * max(float(h.max()), e_init / delta, 1.0) / float(
                np.max(np.abs(direction))
            )
        if tau_max <= 0.0:
            break
        tau, v_in = _golden_max(lambda t: util_of(z + t * direction), tau_max)
        v_end = util_of(z + tau_max * direction)
        if v_end > v_in:
            tau, v_in = tau_max, v_end
        if v_in <= val + 1e-16 * max(1.0, abs(val)):
            break
        z = z + tau * direction
        val = v_in
    s, u, e = _forward_repair(z[:n], z[n:], h, delta, eta, e_max, e_init)
    return s, u, e, util_of(np.concatenate([s, u])), converged


def _net_axis(h_k, draw_cap, step):
    """Signed net-draw candidates for one slot: negative = store (down to
    -h_k), positive = draw (up to the energy available on entry)."""
    down = -np.arange(1, int(math.floor(h_k / step)) + 1, dtype=float)[::-1] * step
    up = np.arange(0, int(math.floor(draw_cap / step)) + 1, dtype=float) * step
    return np.unique(np.concatenate([down, up, [-h_k, 0.0, draw_cap]]))


def _grid_search(h, delta, eta, e_max, e0, rate, step_rel=1e-3):
    """Exhaustive search over net actions for horizons of at most 3 slots.

    The last slot always drains whatever remains (the rate is increasing,
    so leftover energy is pure waste), which leaves at most two free
    axes. Transmit power per slot is simply h_k plus the net draw.
    """
    n = h.size
    scale = max(float(h.max()), e0 / delta, 1e-12)
    step = step_rel * scale
    tol = 1e-12 * max(1.0, e0, float(h.max()) * delta)

    def finish(x_free):
        s = np.maximum(-x_free, 0.0)
        u = np.maximum(x_free, 0.0)
        level = e0
        for k in range(n - 1):
            level = min(e_max, level + delta * (eta * s[k] - u[k]))
        u_last = max(level, 0.0) / delta
        return (np.append(s, 0.0), np.append(u, u_last))

    if n == 1:
        s, u = finish(np.empty(0))
        return float(np.mean(rate.rate(h + u - s))), s, u

    cap0 = min(e_max, e0) / delta
    x0 = _net_axis(h[0], cap0, step)
    s0 = np.maximum(-x0, 0.0)
    u0 = np.maximum(x0, 0.0)
    e1 = e0 + delta * (eta * s0 - u0)
    ok0 = (e1 >= -tol) & (e1 <= e_max + tol)
    e1 = np.clip(e1, 0.0, e_max)
    r0 = rate.rate(h[0] + x0)

    if n == 2:
        util = (r0 + rate.rate(h[1] + e1 / delta)) / 2.0
        util[~ok0] = -math.inf
        j = int(np.argmax(util))
        s, u = finish(x0[j : j + 1])
        return float(util[j]), s, u

    cap1 = min(e_max, e0 + eta * delta * h[0]) / delta
    x1 = _net_axis(h[1], cap1, step)
    flow1 = delta * (eta * np.maximum(-x1, 0.0) - np.maximum(x1, 0.0))
    r1 = rate.rate(h[1] + x1)
    best_val = -math.inf
    best_pair = (0.0, 0.0)
    for a in range(0, x0.size, 256):
        b = min(a + 256, x0.size)
        e2 = e1[a:b, None] + flow1[None, :]
        ok = ok0[a:b, None] & (e2 >= -tol) & (e2 <= e_max + tol)
        u2 = np.clip(e2, 0.0, e_max) / delta
        util = (r0[a:b, None] + r1[None, :] + rate.rate(h[2] + u2)) / 3.0
        util[~ok] = -math.inf
        i, j = np.unravel_index(int(np.argmax(util)), util.shape)
        if util[i, j] > best_val:
            best_val = float(util[i, j])
            best_pair = (float(x0[a + i]), float(x1[j]))
    s, u = finish(np.asarray(best_pair))
    return best_val, s, u


def solve_convex_oracle(
    profile: HarvestProfile,
    storage: StorageSpec,
    rate: RateFunction,
    *,
    restarts: int = 5,
    seed: int = 0,
    grad_tol: float = 1e-8,
    max_iter: int = 4000,
) -> OracleResult:
    """Numerically maximize average utility over per-slot (store, draw).

    Runs the ascent from an all-passive start plus `restarts` random
    feasible points; the problem is concave over a convex set, so all
    runs should meet at one value. `certified` records that they agreed
    within 1e-6 relative and the best run converged; on horizons of at
    most 3 slots an exhaustive grid additionally has to confirm the
    result. Intended for short horizons only (cost grows fast with K).
    """
    h = np.asarray(profile.h, dtype=float)
    n = h.size
    delta = profile.delta
    eta = storage.eta
    e_max = storage.e_max
    e0 = storage.e_init
    p_scale = max(float(h.max()), e0 / delta, 1e-12)

    rng = np.random.default_rng(seed)
    runs = []
    for i in range(restarts + 1):
        if i == 0:
            s0 = np.zeros(n)
            u0 = np.zeros(n)
        else:
            s0 = rng.uniform(0.0, 1.0, n) * h
            u0 = rng.uniform(0.0, p_scale, n)
        runs.append(_ascend(s0, u0, h, delta, eta, e_max, e0, rate,
                            grad_tol, max_iter))

    utilities = np.array([r[3] for r in runs])
    best = int(np.argmax(utilities))
    s, u, e, val, converged = runs[best]
    spread = float(utilities.max() - utilities.min())
    certified = converged and spread <= 1e-6 * max(1.0, abs(float(utilities.max())))

    if n <= 3:
        g_val, g_s, g_u = _grid_search(h, delta, eta, e_max, e0, rate)
        if g_val > val + 1e-6 * max(1.0, abs(val)):
            certified = False
            if g_val > val:
                s, u, e = _forward_repair(g_s, g_u, h, delta, eta, e_max, e0)
                val = float(np.mean(rate.rate(h - s + u)))

    realized = RealizedPolicy(delta, h - s + u, s, u, e, 0)
    return OracleResult(s, u, realized, float(val), certified, utilities)
