"""Causal policies: discounted dynamic programming over (battery, harvest)
and the fixed-threshold rule that balances store and draw probabilities.

The DP treats the harvest as i.i.d. across slots, so the state collapses
to the current battery level and harvest draw. The Bellman update is

    V(E, h) = max_a r(a) * delta + beta * E_h'[ V(E'(a), h') ]

with E'(a) the clamped battery recursion, solved on an (E, h) grid with
linear interpolation in E and equal-probability harvest quantiles, so the
expectation is a plain mean over the h axis.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import brentq

from .core import HarvestProfile, RealizedPolicy, StorageSpec
from .rates import RateFunction, companion_threshold

# ---------------------------------------------------------------------------
# Harvest distributions
# ---------------------------------------------------------------------------


class HarvestDistribution:
    """I.i.d. per-slot harvested-power law (W). Subclasses fill in the
    probability accessors; everything here is exact, no sampling."""

    def mean(self) -> float:
        raise NotImplementedError

    def median(self) -> float:
        raise NotImplementedError

    def support_top(self) -> float:
        raise NotImplementedError

    def cdf(self, x: float) -> float:
        """P(h <= x)."""
        raise NotImplementedError

    def below_prob(self, x: float) -> float:
        """P(h < x), strict."""
        raise NotImplementedError

    def tail_prob(self, x: float) -> float:
        """P(h > x), strict."""
        return 1.0 - self.cdf(x)

    def partial_mean_above(self, x: float) -> float:
        """E[(h - x)+], the expected storable excess above level x."""
        raise NotImplementedError

    def partial_mean_below(self, x: float) -> float:
        """E[(x - h)+], the expected draw needed to hold level x."""
        raise NotImplementedError

    def quantile_levels(self, n: int) -> np.ndarray:
        """n equal-probability representative levels (quantile midpoints)."""
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class UniformHarvest(HarvestDistribution):
    """Uniform on [lo, hi] watts; lo == hi degenerates to a point mass."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo <= self.hi) or not math.isfinite(self.hi):
            raise ValueError(f"need 0 <= lo <= hi < inf, got [{self.lo}, {self.hi}]")

    def mean(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def median(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def support_top(self) -> float:
        return self.hi

    def cdf(self, x: float) -> float:
        if self.hi == self.lo:
            return 1.0 if x >= self.lo else 0.0
        return float(np.clip((x - self.lo) / (self.hi - self.lo), 0.0, 1.0))

    def below_prob(self, x: float) -> float:
        if self.hi == self.lo:
            return 1.0 if x > self.lo else 0.0
        return self.cdf(x)

    def partial_mean_above(self, x: float) -> float:
        if x <= self.lo:
            return self.mean() - x
        if x >= self.hi or self.hi == self.lo:
            return 0.0
        return (self.hi - x) ** 2 / (2.0 * (self.hi - self.lo))

    def partial_mean_below(self, x: float) -> float:
        if x <= self.lo:
            return 0.0
        if x >= self.hi:
            return x - self.mean()
        return (x - self.lo) ** 2 / (2.0 * (self.hi - self.lo))

    def quantile_levels(self, n: int) -> np.ndarray:
        q = (np.arange(n) + 0.5) / n
        return self.lo + (self.hi - self.lo) * q

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size)


@dataclass(frozen=True)
class DiscreteHarvest(HarvestDistribution):
    """Finite support {values} with point masses {probs} (normalized)."""

    values: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        p = np.asarray(self.probs, dtype=float)
        if v.ndim != 1 or v.shape != p.shape or v.size == 0:
            raise ValueError("values and probs must be matching non-empty 1-d arrays")
        if np.any(v < 0.0) or np.any(p < 0.0):
            raise ValueError("support and masses must be non-negative")
        total = p.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"masses sum to {total}, not 1")
        order = np.argsort(v)
        object.__setattr__(self, "values", v[order])
        object.__setattr__(self, "probs", p[order] / total)

    @staticmethod
    def from_samples(samples) -> "DiscreteHarvest":
        v, counts = np.unique(np.asarray(samples, dtype=float), return_counts=True)
        return DiscreteHarvest(v, counts / counts.sum())

    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))

    def median(self) -> float:
        return float(self.values[np.searchsorted(np.cumsum(self.probs), 0.5)])

    def support_top(self) -> float:
        return float(self.values[-1])

    def cdf(self, x: float) -> float:
        return float(self.probs[self.values <= x].sum())

    def below_prob(self, x: float) -> float:
        return float(self.probs[self.values < x].sum())

    def partial_mean_above(self, x: float) -> float:
        gap = np.maximum(self.values - x, 0.0)
        return float(np.dot(gap, self.probs))

    def partial_mean_below(self, x: float) -> float:
        gap = np.maximum(x - self.values, 0.0)
        return float(np.dot(gap, self.probs))

    def quantile_levels(self, n: int) -> np.ndarray:
        q = (np.arange(n) + 0.5) / n
        idx = np.searchsorted(np.cumsum(self.probs), q)
        return self.values[np.minimum(idx, self.values.size - 1)]

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.values, size=size, p=self.probs)


# ---------------------------------------------------------------------------
# Fixed-threshold rule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FixedThresholds:
    """A time-invariant (p_u, p_s) pair, coupled as r'(p_s) = eta * r'(p_u)."""

    p_u: float
    p_s: float


def solve_fixed_thresholds(
    dist: HarvestDistribution,
    rate: RateFunction,
    eta: float,
    *,
    balance: str = "probability",
) -> FixedThresholds:
    """Thresholds whose store and draw regimes balance in distribution.

    The default criterion equates the probability of storing with the
    probability of drawing: P(h > p_s) = P(h < p_u) with p_s coupled to
    p_u. The residual is non-increasing in p_u, so a bracketed root solve
    finds it. eta = 0 returns (0, +inf); eta = 1 returns the median twice.

    balance = "energy" is a variant that equates the expected recoverable
    energy stored with the expected energy drawn per slot,
    eta * E[(h - p_s)+] = E[(p_u - h)+]; same structure, different root.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if balance not in ("probability", "energy"):
        raise ValueError(f"unknown balance criterion {balance!r}")
    if eta == 0.0:
        return FixedThresholds(0.0, math.inf)
    if eta == 1.0 and rate.strictly_concave and balance == "probability":
        m = dist.median()
        return FixedThresholds(m, m)

    def residual(p_u: float) -> float:
        p_s = companion_threshold(p_u, eta, rate)
        if balance == "probability":
            stored = dist.tail_prob(p_s) if math.isfinite(p_s) else 0.0
            return stored - dist.below_prob(p_u)
        stored = dist.partial_mean_above(p_s) if math.isfinite(p_s) else 0.0
        return eta * stored - dist.partial_mean_below(p_u)

    top = dist.support_top()
    if top <= 0.0 or residual(0.0) <= 0.0:
        return FixedThresholds(0.0, companion_threshold(0.0, eta, rate))
    p_u = float(brentq(residual, 0.0, top, xtol=1e-15, rtol=8.9e-16))
    return FixedThresholds(p_u, companion_threshold(p_u, eta, rate))


# ---------------------------------------------------------------------------
# Dynamic programming
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DpConfig:
    """Grid and convergence dials for the discounted value iteration.

    delta          : slot length (s)
    energy_points  : battery grid size over [0, e_max]
    harvest_points : number of equal-probability harvest levels
    action_points  : uniform action grid size (exact per-state actions
                     {0, h, h + E/delta} are always appended)
    beta           : discount factor in (0, 1)
    tol            : absolute Bellman-residual stop; None picks
                     1e-6 * r(mean) * delta / (1 - beta)
    max_iter       : cap on Bellman-operator applications
    action_span    : top of the uniform action grid; None picks twice the
                     largest harvest level
    eval_sweeps    : fixed-policy refinement sweeps run after each Bellman
                     sweep (0 recovers plain value iteration; the fixed
                     point is the same, reached in far fewer sweeps)
    """

    delta: float
    energy_points: int = 201
    harvest_points: int = 41
    action_points: int = 201
    beta: float = 0.999
    tol: Optional[float] = None
    max_iter: int = 2000
    action_span: Optional[float] = None
    eval_sweeps: int = 100

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if min(self.energy_points, self.harvest_points, self.action_points) < 2:
            raise ValueError("all grids need at least 2 points")
        if self.delta <= 0.0:
            raise ValueError("delta must be positive")
        if self.eval_sweeps < 0 or self.max_iter < 1:
            raise ValueError("eval_sweeps must be >= 0 and max_iter >= 1")


@dataclass
class DpSolution:
    """Converged value and action tables on the (E, h) grid."""

    e_grid: np.ndarray
    h_grid: np.ndarray
    v: np.ndarray
    phi: np.ndarray
    config: DpConfig
    residuals: np.ndarray

    def save(self, path) -> None:
        cfg = {k: getattr(self.config, k) for k in (
            "delta", "energy_points", "harvest_points", "action_points",
            "beta", "tol", "max_iter", "action_span", "eval_sweeps")}
        np.savez(
            path,
            e_grid=self.e_grid,
            h_grid=self.h_grid,
            v=self.v,
            phi=self.phi,
            residuals=self.residuals,
            config_json=np.frombuffer(json.dumps(cfg).encode(), dtype=np.uint8),
        )

    @staticmethod
    def load(path) -> "DpSolution":
        with np.load(path) as data:
            cfg = json.loads(bytes(data["config_json"]).decode())
            return DpSolution(
                data["e_grid"], data["h_grid"], data["v"], data["phi"],
                DpConfig(**cfg), data["residuals"],
            )


def _dp_tensors(storage: StorageSpec, dist, rate, cfg: DpConfig):
    """The interpolated MDP shared by the solver and any cross-checker:
    grids, per-state action candidates, slot rewards, and the linear
    interpolation (index, weight) of the successor battery level."""
    e_grid = np.linspace(0.0, storage.e_max, cfg.energy_points)
    h_grid = np.asarray(dist.quantile_levels(cfg.harvest_points), dtype=float)
    span = cfg.action_span if cfg.action_span is not None else 2.0 * float(h_grid.max())
    span = max(span, float(h_grid.max()))
    base = np.linspace(0.0, span, cfg.action_points)

    ee = e_grid[:, None, None]
    hh = h_grid[None, :, None]
    a_max = hh + ee / cfg.delta
    extras = np.concatenate(
        [np.zeros_like(a_max), np.broadcast_to(hh, a_max.shape), a_max], axis=2
    )
    actions = np.concatenate(
        [np.broadcast_to(base, (cfg.energy_points, cfg.harvest_points, base.size)), extras],
        axis=2,
    )
    actions = np.minimum(actions, a_max)

    flow = storage.eta * np.maximum(hh - actions, 0.0) - np.maximum(actions - hh, 0.0)
    e_next = np.clip(ee + cfg.delta * flow, 0.0, storage.e_max)
    step = e_grid[1] - e_grid[0]
    pos = e_next / step
    idx = np.minimum(pos.astype(np.int32), cfg.energy_points - 2)
    frac = pos - idx
    r_delta = rate.rate(actions) * cfg.delta
    return e_grid, h_grid, actions, r_delta, idx, frac


def value_iterate(
    storage: StorageSpec, dist: HarvestDistribution, rate: RateFunction, cfg: DpConfig
) -> DpSolution:
    """Solve the discounted Bellman fixed point on the (E, h) grid.

    Starts from V = 0 (below the fixed point, so iterates increase
    monotonically) and alternates one Bellman sweep with cfg.eval_sweeps
    cheap fixed-policy refinements. Stops once the Bellman residual
    ||TV - V||_inf drops below tol; raises if max_iter sweeps cannot
    get there.
    """
    if not storage.bounded:
        raise ValueError("value iteration needs a finite battery capacity")
    e_grid, h_grid, actions, r_delta, idx, frac = _dp_tensors(storage, dist, rate, cfg)
    tol = cfg.tol
    if tol is None:
        scale = float(rate.rate(dist.mean())) * cfg.delta / (1.0 - cfg.beta)
        tol = 1e-6 * max(scale, 1e-300)

    v = np.zeros((cfg.energy_points, cfg.harvest_points))
    residuals = []
    for _ in range(cfg.max_iter):
        v_bar = v.mean(axis=1)
        cand = r_delta + cfg.beta * (
            v_bar[idx] * (1.0 - frac) + v_bar[idx + 1] * frac
        )
        best = np.argmax(cand, axis=2)
        v_new = np.take_along_axis(cand, best[:, :, None], axis=2)[:, :, 0]
        res = float(np.max(np.abs(v_new - v)))
        residuals.append(res)
        v = v_new
        if res <= tol:
            phi = np.take_along_axis(actions, best[:, :, None], axis=2)[:, :, 0]
            return DpSolution(e_grid, h_grid, v, phi, cfg, np.asarray(residuals))
        if cfg.eval_sweeps:
            r_pi = np.take_along_axis(r_delta, best[:, :, None], axis=2)[:, :, 0]
            i_pi = np.take_along_axis(idx, best[:, :, None], axis=2)[:, :, 0]
            f_pi = np.take_along_axis(frac, best[:, :, None], axis=2)[:, :, 0]
            for _ in range(cfg.eval_sweeps):
                v_bar = v.mean(axis=1)
                v = r_pi + cfg.beta * (v_bar[i_pi] * (1.0 - f_pi) + v_bar[i_pi + 1] * f_pi)
    raise RuntimeError(
        f"value iteration did not reach tolerance {tol:.3e} within "
        f"{cfg.max_iter} sweeps; last residual {residuals[-1]:.3e}"
    )


def dp_action(sol: DpSolution, energy: float, h: float) -> float:
    """Action lookup: nearest harvest row, linear interpolation along the
    battery axis, then the feasibility clamp to [0, h + E/delta].

    When the table's action for the row sits on the transmit-the-harvest
    band (within one action-grid step of the row's own harvest level), the
    actual h is returned instead of the discretized level. The band is
    exact in the underlying policy, and snapping to it avoids pointless
    battery churn for harvests that fall between grid rows.
    """
    e_max = float(sol.e_grid[-1])
    e = float(np.clip(energy, 0.0, e_max))
    row = int(np.argmin(np.abs(sol.h_grid - h)))
    a = float(np.interp(e, sol.e_grid, sol.phi[:, row]))
    cfg = sol.config
    span = cfg.action_span if cfg.action_span is not None else 2.0 * float(sol.h_grid.max())
    step = max(span, float(sol.h_grid.max())) / (cfg.action_points - 1)
    if abs(a - float(sol.h_grid[row])) <= 1.01 * step:
        a = h
    return float(np.clip(a, 0.0, h + e / cfg.delta))


def dp_policy(sol: DpSolution) -> Callable[[float, float], float]:
    """The solution as a causal policy (E, h) -> transmit power."""
    return lambda energy, h: dp_action(sol, energy, h)


def threshold_policy(p_u: float, p_s: float) -> Callable[[float, float], float]:
    """Double-threshold rule as a causal policy: clamp(h, p_u, p_s)."""
    return lambda energy, h: min(max(h, p_u), p_s)


# ---------------------------------------------------------------------------
# Causal execution
# ---------------------------------------------------------------------------


def simulate_online(
    profile: HarvestProfile,
    storage: StorageSpec,
    policy: Callable[[float, float], float],
    rate: RateFunction,
) -> tuple[RealizedPolicy, float]:
    """Run a causal policy slot by slot; it sees only (battery, harvest).

    The same feasibility clamps as the offline simulator apply: draws are
    cut to the available energy and unstorable surplus is transmitted.
    Returns the realized policy and its average utility.
    """
    n = profile.n_slots
    delta = profile.delta
    eta = storage.eta
    e_max = storage.e_max
    h_arr = profile.h
    p = np.empty(n)
    s = np.empty(n)
    u = np.empty(n)
    e = np.empty(n + 1)
    level = float(storage.e_init)
    e[0] = level
    for k in range(n):
        h = float(h_arr[k])
        try:
            a = float(policy(level, h))
        except Exception as exc:
            raise RuntimeError(f"online policy raised at slot {k}") from exc
        if not (math.isfinite(a) and a >= 0.0):
            raise ValueError(f"online policy returned invalid power {a} at slot {k}")
        s_t = max(h - a, 0.0)
        u_t = max(a - h, 0.0)
        if u_t > 0.0:
            s_k = 0.0
            if u_t * delta >= level:
                u_k = level / delta
                level = 0.0
            else:
                u_k = u_t
                level -= delta * u_t
        else:
            u_k = 0.0
            s_k = s_t
            if eta > 0.0 and s_t > 0.0:
                inflow = eta * s_t * delta
                if inflow >= e_max - level:
                    s_k = (e_max - level) / (eta * delta)
                    level = e_max
                else:
                    level += inflow
        p[k] = h - s_k + u_k
        s[k] = s_k
        u[k] = u_k
        e[k + 1] = level
    realized = RealizedPolicy(delta, p, s, u, e, 0)
    return realized, realized.average_utility(rate)
