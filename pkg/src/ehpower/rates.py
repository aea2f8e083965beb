"""Concave power-to-utility maps and the threshold-coupling relation.

Two concrete families are provided: the single-user AWGN rate
``B * log2(1 + p * g / (N0 * B))`` in bits per second, and the two-user
degraded Gaussian broadcast weighted sum-rate obtained by maximizing
``a * r1 + r2`` over the superposition power split. Both expose value,
derivative, and inverse derivative, which is all the scheduling layers
need from a utility function.

The storage efficiency couples the two policy thresholds through

    r'(p_s) = eta * r'(p_u)

and ``companion_threshold`` solves this for p_s.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import EPS_POWER_REL

_LN2 = math.log(2.0)
# Finite-difference step scale, ~6.1e-6: balances truncation vs roundoff
# for a second-order stencil.
_FD_STEP = float(np.cbrt(np.finfo(float).eps))


def db_to_linear(db: float) -> float:
    """Convert a dB quantity (e.g. path loss -100 dB) to a linear factor."""
    return 10.0 ** (db / 10.0)


class RateFunction:
    """Non-decreasing continuous concave map from power (W) to bits/s.

    Subclasses implement ``rate``; ``derivative`` and ``inverse_derivative``
    have generic numerical fallbacks but concrete families override them
    with closed forms. ``strictly_concave`` marks a strictly decreasing
    derivative, which collapses the eta = 1 threshold pair to a point.
    """

    strictly_concave: bool = True

    def rate(self, p):
        """Utility at transmit power p >= 0 (vectorized)."""
        raise NotImplementedError

    def derivative(self, p):
        """dr/dp, non-increasing and positive. Fallback: central difference."""
        p = np.asarray(p, dtype=float)
        h = _FD_STEP * (np.abs(p) + 1.0)
        lo = np.maximum(p - h, 0.0)
        d = (self.rate(p + h) - self.rate(lo)) / (p + h - lo)
        return d if d.ndim else float(d)

    def inverse_derivative(self, y: float, side: str = "low") -> float:
        """Smallest (side="low") or largest (side="high") p with r'(p) = y.

        The two sides differ only when r' has flat stretches; for a
        strictly concave rate they coincide. Returns 0 when y >= r'(0).
        Fallback implementation: bracketing bisection on r'.
        """
        if not (y > 0.0):
            raise ValueError(f"inverse derivative needs a positive slope, got {y}")
        if side not in ("low", "high"):
            raise ValueError(f"side must be 'low' or 'high', got {side!r}")

        def hit(p: float) -> bool:
            d = float(self.derivative(p))
            return d <= y if side == "low" else d < y

        if side == "low" and hit(0.0):
            return 0.0
        hi = 1.0
        while not hit(hi):
            hi *= 2.0
            if hi > 1e30:
                raise ValueError(f"no power with derivative {y} below 1e30 W")
        lo = 0.0
        for _ in range(200):
            if hi - lo <= EPS_POWER_REL * max(1.0, hi):
                break
            mid = 0.5 * (lo + hi)
            if hit(mid):
                hi = mid
            else:
                lo = mid
        return hi if side == "low" else lo


# ---------------------------------------------------------------------------
# Single-user AWGN
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AwgnLink:
    """Physical single-user link.

    bandwidth     : B (Hz)
    noise_density : N0 (W/Hz)
    gain          : linear path gain (e.g. 1e-10 for a -100 dB loss)
    """

    bandwidth: float
    noise_density: float
    gain: float

    def __post_init__(self):
        if self.bandwidth <= 0.0 or self.noise_density <= 0.0 or self.gain <= 0.0:
            raise ValueError("bandwidth, noise density, and gain must all be positive")

    @property
    def snr_per_watt(self) -> float:
        """Received SNR per watt of transmit power: g / (N0 * B)."""
        return self.gain / (self.noise_density * self.bandwidth)


class AwgnRate(RateFunction):
    """r(p) = B * log2(1 + gamma * p) bits/s with gamma = g / (N0 * B)."""

    strictly_concave = True

    def __init__(self, link: AwgnLink):
        self.link = link
        self._gamma = link.snr_per_watt
        self._b = link.bandwidth

    def rate(self, p):
        p = np.asarray(p, dtype=float)
        r = self._b * np.log1p(self._gamma * p) / _LN2
        return r if r.ndim else float(r)

    def derivative(self, p):
        # Scalar fast path: the offline searches call this per bisection
        # probe, where ndarray boxing would dominate the arithmetic.
        if type(p) is float or type(p) is int:
            return self._b * self._gamma / (_LN2 * (1.0 + self._gamma * p))
        p = np.asarray(p, dtype=float)
        d = self._b * self._gamma / (_LN2 * (1.0 + self._gamma * p))
        return d if d.ndim else float(d)

    def inverse_derivative(self, y, side: str = "low"):
        if type(y) is float or type(y) is int:
            if y <= 0.0:
                raise ValueError("inverse derivative needs a positive slope")
            p = self._b / (_LN2 * y) - 1.0 / self._gamma
            return p if p > 0.0 else 0.0
        if np.any(np.asarray(y) <= 0.0):
            raise ValueError("inverse derivative needs a positive slope")
        y = np.asarray(y, dtype=float)
        p = np.maximum(self._b / (_LN2 * y) - 1.0 / self._gamma, 0.0)
        return p if p.ndim else float(p)


def normalized_log_rate() -> AwgnRate:
    """Unit link: r(p) = log2(1 + p), r'(p) = 1 / (ln2 * (1 + p))."""
    return AwgnRate(AwgnLink(1.0, 1.0, 1.0))


def companion_threshold(p_u: float, eta: float, rate: RateFunction) -> float:
    """Upper threshold paired with p_u: solves r'(p_s) = eta * r'(p_u).

    eta = 0 returns the +inf sentinel (the store branch never pays for
    itself); eta = 1 with a strictly concave rate returns p_u itself.
    When r' has plateaus the largest qualifying power is returned.
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"eta must lie in [0, 1], got {eta}")
    if not (math.isfinite(p_u) and p_u >= 0.0):
        raise ValueError(f"p_u must be finite and non-negative, got {p_u}")
    if eta == 0.0:
        return math.inf
    if eta == 1.0 and rate.strictly_concave:
        return float(p_u)
    target = eta * float(rate.derivative(p_u))
    if target <= 0.0:
        return math.inf
    return float(rate.inverse_derivative(target, side="high"))


# ---------------------------------------------------------------------------
# Two-user degraded Gaussian broadcast
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BroadcastSpec:
    """Two-receiver superposition setup, user 1 the stronger receiver.

    sigma1_sq, sigma2_sq : effective noise levels after folding path gains,
                           i.e. N0*B/g_j (W); sigma1_sq <= sigma2_sq
    weight               : a >= 0 in the objective a*r1 + r2
    scale                : rate prefactor; 0.5 gives the textbook
                           0.5*log2 region, a bandwidth in Hz gives bits/s
    """

    sigma1_sq: float
    sigma2_sq: float
    weight: float
    scale: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.sigma1_sq <= self.sigma2_sq):
            raise ValueError("need 0 < sigma1_sq <= sigma2_sq (user 1 is stronger)")
        if self.weight < 0.0 or not math.isfinite(self.weight):
            raise ValueError(f"weight must be finite and >= 0, got {self.weight}")
        if self.scale <= 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def _bc_rates(alpha, p, spec: BroadcastSpec):
    """Per-user rates of the split alpha: user 1 decodes last, user 2 treats
    user 1's layer as noise. r2 uses log(s2+p) - log(s2+alpha*p), which is
    exact at p = 0 where the naive ratio form would lose digits."""
    r1 = spec.scale * np.log1p(alpha * p / spec.sigma1_sq) / _LN2
    r2 = spec.scale * (np.log(spec.sigma2_sq + p) - np.log(spec.sigma2_sq + alpha * p)) / _LN2
    return r1, r2


def bc_weighted_sum_rate(p, spec: BroadcastSpec):
    """Maximize a*r1 + r2 over the power split alpha in [0, 1].

    Returns (value, alpha, r1, r2); all four vectorize with p. The
    objective is unimodal in alpha (its alpha-derivative changes sign at
    most once), so a golden-section search converges; ties are resolved
    toward the largest maximizing alpha by snapping to the boundaries
    whenever they are within 1e-12 relative of the search optimum.
    """
    p_in = np.asarray(p, dtype=float)
    if np.any(p_in < 0.0) or not np.all(np.isfinite(p_in)):
        raise ValueError("transmit power must be finite and non-negative")
    scalar = p_in.ndim == 0
    p = np.atleast_1d(p_in)
    a = spec.weight

    def value(alpha):
        r1, r2 = _bc_rates(alpha, p, spec)
        return a * r1 + r2

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    lo = np.zeros_like(p)
    hi = np.ones_like(p)
    for _ in range(48):
        gap = inv_phi * (hi - lo)
        x1 = hi - gap
        x2 = lo + gap
        keep_left = value(x1) >= value(x2)
        hi = np.where(keep_left, x2, hi)
        lo = np.where(keep_left, lo, x1)
    alpha = 0.5 * (lo + hi)
    best = value(alpha)

    one = np.ones_like(p)
    zero = np.zeros_like(p)
    snap_tol = 1e-12 * np.maximum(1.0, np.abs(best))
    at_one = value(one) >= best - snap_tol
    alpha = np.where(at_one, one, alpha)
    at_zero = ~at_one & (value(zero) >= best - snap_tol)
    alpha = np.where(at_zero, zero, alpha)

    r1, r2 = _bc_rates(alpha, p, spec)
    val = a * r1 + r2
    if scalar:
        return float(val[0]), float(alpha[0]), float(r1[0]), float(r2[0])
    return val, alpha, r1, r2


def bc_rate_derivative(p, spec: BroadcastSpec):
    """Slope of the weighted sum-rate envelope by finite differences.

    Second-order stencils with one Richardson pass; the step scales with
    p + sigma2_sq so the relative accuracy is uniform over the power
    range. Points too close to 0 for a central stencil use the one-sided
    three-point formula. Cross-validated against the closed form carried
    by BroadcastWeightedRate.
    """
    p_in = np.asarray(p, dtype=float)
    if np.any(p_in < 0.0) or not np.all(np.isfinite(p_in)):
        raise ValueError("transmit power must be finite and non-negative")
    scalar = p_in.ndim == 0
    p = np.atleast_1d(p_in)

    def f(q):
        return bc_weighted_sum_rate(q, spec)[0]

    h = _FD_STEP * (p + spec.sigma2_sq)
    central_ok = p >= h
    p_safe = np.where(central_ok, p, h)  # keeps the unused stencil in range

    def central(step):
        return (f(p_safe + step) - f(p_safe - step)) / (2.0 * step)

    def one_sided(step):
        return (-3.0 * f(p) + 4.0 * f(p + step) - f(p + 2.0 * step)) / (2.0 * step)

    d_central = (4.0 * central(0.5 * h) - central(h)) / 3.0
    d_edge = (4.0 * one_sided(0.5 * h) - one_sided(h)) / 3.0
    d = np.where(central_ok, d_central, d_edge)
    return float(d[0]) if scalar else d


class BroadcastWeightedRate(RateFunction):
    """The weighted sum-rate envelope as a RateFunction.

    The envelope's slope has a closed form: at the maximizing split the
    cross terms cancel and

        f'(p) = (scale / ln2) * max(a / (sigma1_sq + p), 1 / (sigma2_sq + p)),

    the left branch active where the split saturates at alpha = 1 and the
    right branch elsewhere. Both branches decrease strictly, so the
    envelope is strictly concave and the inverse slope is the larger of
    the two per-branch inverses, floored at zero.
    """

    strictly_concave = True

    def __init__(self, spec: BroadcastSpec):
        self.spec = spec

    def rate(self, p):
        return bc_weighted_sum_rate(p, self.spec)[0]

    def derivative(self, p):
        p = np.asarray(p, dtype=float)
        s = self.spec
        d = (s.scale / _LN2) * np.maximum(
            s.weight / (s.sigma1_sq + p), 1.0 / (s.sigma2_sq + p)
        )
        return d if d.ndim else float(d)

    def inverse_derivative(self, y, side: str = "low"):
        if np.any(np.asarray(y) <= 0.0):
            raise ValueError("inverse derivative needs a positive slope")
        y = np.asarray(y, dtype=float)
        s = self.spec
        c = s.scale / _LN2
        p = np.maximum.reduce(
            [c * s.weight / y - s.sigma1_sq, c / y - s.sigma2_sq, np.zeros_like(y)]
        )
        return p if p.ndim else float(p)
