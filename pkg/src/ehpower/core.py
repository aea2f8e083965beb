"""Slotted battery simulation for an energy-harvesting transmitter.

Model: in each slot of length ``delta`` seconds the transmitter harvests
``h_k`` watts, stores ``s_k`` of it, draws ``u_k`` from the battery, and
radiates ``p_k = h_k - s_k + u_k``. Storing is lossy: only a fraction
``eta`` of stored energy is recoverable, so the battery level follows

    e_{k+1} = e_k + delta * (eta * s_k - u_k)

and must stay inside ``[0, e_max]``. Crossings of either bound inside a
slot are located exactly (the level is linear per slot); the crossing slot
itself is clamped so that the recorded per-slot policy stays feasible:
an unavailable draw is cut to the remaining energy (raising nothing, the
transmitter just sends ``h + available``), and an unstorable surplus is
redirected into transmit power.

Units: powers in watts, energies in joules, times in seconds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, Sequence

import numpy as np

# Relative tolerance on powers and thresholds.
EPS_POWER_REL = 1e-9
# Block size for the vectorised battery scan.
_BLOCK = 4096


def energy_tolerance(profile: "HarvestProfile", extra: float = 0.0) -> float:
    """Absolute energy tolerance: 1e-9 of max(1 J, total energy in play)."""
    return 1e-9 * max(1.0, profile.total_harvest + extra)


# ---------------------------------------------------------------------------
# Input types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HarvestProfile:
    """A harvested-power trace sampled on a uniform slot grid.

    delta : slot length (s)
    h     : per-slot harvested power (W), length K
    """

    delta: float
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        if h.ndim != 1 or h.size == 0:
            raise ValueError("harvest profile must be a non-empty 1-d array")
        if not np.all(np.isfinite(h)) or np.any(h < 0.0):
            raise ValueError("harvested powers must be finite and non-negative")
        if not (math.isfinite(self.delta) and self.delta > 0.0):
            raise ValueError("slot length delta must be positive and finite")
        object.__setattr__(self, "h", h)

    @property
    def n_slots(self) -> int:
        return self.h.shape[0]

    @property
    def horizon(self) -> float:
        """Total transmission time T (s)."""
        return self.n_slots * self.delta

    @property
    def total_harvest(self) -> float:
        """Total harvested energy over the horizon (J)."""
        return float(self.h.sum()) * self.delta

    def slot_times(self) -> np.ndarray:
        return np.arange(self.n_slots) * self.delta

    def tail(self, start_slot: int) -> "HarvestProfile":
        if not 0 <= start_slot < self.n_slots:
            raise ValueError(f"start_slot {start_slot} outside [0, {self.n_slots})")
        return HarvestProfile(self.delta, self.h[start_slot:])

    # -- file ingestion ----------------------------------------------------

    @staticmethod
    def from_csv(path, delta: float) -> "HarvestProfile":
        """Read columns (slot_index, h_watts); the CSV carries no slot length."""
        rows = []
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if header is None:
                raise ValueError(f"{path}: empty harvest CSV")
            for row in reader:
                if not row:
                    continue
                rows.append((int(row[0]), float(row[1])))
        if not rows:
            raise ValueError(f"{path}: no harvest samples")
        rows.sort()
        return HarvestProfile(delta, np.array([v for _, v in rows]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["slot_index", "h_watts"])
            for k, v in enumerate(self.h):
                writer.writerow([k, repr(float(v))])

    @staticmethod
    def from_json(path) -> "HarvestProfile":
        """Read an object with keys delta_seconds and h (array of watts)."""
        with open(path) as f:
            obj = json.load(f)
        try:
            return HarvestProfile(float(obj["delta_seconds"]), np.asarray(obj["h"], dtype=float))
        except KeyError as exc:
            raise ValueError(f"{path}: missing key {exc} in harvest JSON") from exc

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump({"delta_seconds": self.delta, "h": [float(v) for v in self.h]}, f)


@dataclass(frozen=True)
class StorageSpec:
    """Battery parameters: storage efficiency, capacity, initial level.

    eta    : recoverable fraction of stored energy, in [0, 1]
    e_max  : capacity (J); math.inf for an unbounded battery
    e_init : level at t = 0 (J)
    """

    eta: float
    e_max: float = math.inf
    e_init: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if math.isnan(self.e_max) or self.e_max <= 0.0:
            raise ValueError("e_max must be positive (math.inf for unbounded)")
        if not (math.isfinite(self.e_init) and 0.0 <= self.e_init <= self.e_max):
            raise ValueError("e_init must be finite and inside [0, e_max]")

    @property
    def bounded(self) -> bool:
        return math.isfinite(self.e_max)


class EventKind(Enum):
    EMPTY = "empty"
    FULL = "full"


@dataclass(frozen=True)
class BatteryEvent:
    """First boundary touch of the battery level: kind and exact time (s)."""

    kind: EventKind
    time: float


@dataclass
class RealizedPolicy:
    """A feasible slot-by-slot realization.

    p, s, u : transmit / stored / drawn power per slot (W), length n
    e       : battery level at slot boundaries (J), length n + 1
    start_slot : index of the first slot relative to the parent profile
    """

    delta: float
    p: np.ndarray
    s: np.ndarray
    u: np.ndarray
    e: np.ndarray
    start_slot: int = 0

    @property
    def n_slots(self) -> int:
        return self.p.shape[0]

    @property
    def horizon(self) -> float:
        return self.n_slots * self.delta

    def average_utility(self, rate) -> float:
        """Time-average reward (1/T) * sum r(p_k) * delta = mean of r(p_k)."""
        return float(np.mean(rate.rate(self.p)))

    def total_utility(self, rate) -> float:
        return float(np.sum(rate.rate(self.p))) * self.delta


class ViolationKind(Enum):
    CAUSALITY = "causality"
    OVERFLOW = "overflow"
    STORAGE_EXCEEDS_HARVEST = "storage_exceeds_harvest"
    SIMULTANEOUS_CHARGE_DISCHARGE = "simultaneous_charge_discharge"
    POWER_BALANCE = "power_balance"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    slot: int
    detail: str = ""


# ---------------------------------------------------------------------------
# Core battery scan
# ---------------------------------------------------------------------------


def _clamped_scan(h, s_tgt, u_tgt, eta, delta, e0, e_max, stop_at_event):
    """Run the clamped battery recursion over target flows (s_tgt, u_tgt).

    Requires s_tgt * u_tgt == 0 per slot (a slot either stores or draws).
    Returns (s, u, e, n_done, event): effective flows after clamping, the
    boundary-level array (length n_done + 1), the number of slots consumed,
    and the first boundary event (kind, local time) or None. With
    stop_at_event the scan halts right after the event slot; otherwise it
    runs to the end and still reports the first event it saw.

    The "initially stuck" rule: a touch of 0 only counts as an event once
    the level has been strictly positive at some earlier instant of this
    scan; symmetrically for e_max. Stretches pinned at a bound are skipped
    analytically, which both enforces that rule and keeps the scan O(K).
    """
    n = h.shape[0]
    if np.any(s_tgt * u_tgt > 0.0):
        raise ValueError("a slot cannot both store and draw")
    net = eta * s_tgt - u_tgt
    s = s_tgt.copy()
    u = u_tgt.copy()
    e = np.empty(n + 1)
    e[0] = e0
    charge_idx = np.flatnonzero(net > 0.0)
    drain_idx = np.flatnonzero(u_tgt > 0.0)
    bounded = math.isfinite(e_max)
    event = None
    k = 0
    ek = float(e0)
    while k < n:
        if ek <= 0.0 and net[k] <= 0.0:
            # Pinned empty until the next charging slot: draws unavailable.
            pos = np.searchsorted(charge_idx, k)
            j = int(charge_idx[pos]) if pos < charge_idx.size else n
            u[k:j] = 0.0
            e[k + 1 : j + 1] = 0.0
            ek = 0.0
            k = j
            continue
        if bounded and ek >= e_max and net[k] >= 0.0:
            # Pinned full until the next drawing slot: stores bounce off.
            pos = np.searchsorted(drain_idx, k)
            j = int(drain_idx[pos]) if pos < drain_idx.size else n
            if eta > 0.0:
                blk = s[k:j]
                blk[s_tgt[k:j] > 0.0] = 0.0
            e[k + 1 : j + 1] = e_max
            ek = e_max
            k = j
            continue
        b = min(k + _BLOCK, n)
        cum = ek + delta * np.cumsum(net[k:b])
        under = (cum <= 0.0) & (u_tgt[k:b] > 0.0)
        if bounded:
            trig = under | ((cum >= e_max) & (eta * s_tgt[k:b] > 0.0))
        else:
            trig = under
        if not trig.any():
            e[k + 1 : b + 1] = cum
            ek = float(cum[-1])
            k = b
            continue
        i = int(np.argmax(trig))
        if i > 0:
            e[k + 1 : k + i + 1] = cum[:i]
            ec = float(cum[i - 1])
        else:
            ec = ek
        g = k + i
        if under[i]:
            kind = EventKind.EMPTY
            t_in = min(ec / u_tgt[g], delta) if ec > 0.0 else 0.0
            u[g] = ec / delta
            ek = 0.0
        else:
            kind = EventKind.FULL
            inflow = eta * s_tgt[g]
            t_in = min((e_max - ec) / inflow, delta) if e_max > ec else 0.0
            s[g] = (e_max - ec) / (eta * delta)
            ek = e_max
        e[g + 1] = ek
        if event is None:
            event = BatteryEvent(kind, g * delta + t_in)
        k = g + 1
        if stop_at_event:
            break
    n_done = k
    return s[:n_done], u[:n_done], e[: n_done + 1], n_done, event


def _check_thresholds(p_u: float, p_s: float) -> None:
    if math.isnan(p_u) or math.isnan(p_s) or math.isinf(p_u):
        raise ValueError(f"thresholds must be finite (p_s may be +inf): ({p_u}, {p_s})")
    if p_u < 0.0 or p_s == -math.inf:
        raise ValueError(f"thresholds must be non-negative: ({p_u}, {p_s})")
    if p_s < p_u:
        raise ValueError(f"need p_u <= p_s, got ({p_u}, {p_s})")


def simulate_thresholds(
    profile: HarvestProfile,
    storage: StorageSpec,
    p_u: float,
    p_s: float,
    start_slot: int = 0,
    start_energy: Optional[float] = None,
    *,
    stop_at_event: bool = True,
) -> tuple[RealizedPolicy, Optional[BatteryEvent]]:
    """Run the double-threshold policy: store above p_s, draw below p_u.

    Per slot the targeted transmit power is clamp(h_k, p_u, p_s); feasibility
    clamps then apply (see module docstring). p_s = +inf is the "never
    store" sentinel. Returns the realized fragment from start_slot up to the
    first battery event (or the horizon) together with that event; event
    times are absolute seconds and exact within the slot.
    """
    _check_thresholds(p_u, p_s)
    e0 = storage.e_init if start_energy is None else float(start_energy)
    if not (0.0 <= e0 <= storage.e_max):
        raise ValueError(f"start_energy {e0} outside [0, {storage.e_max}]")
    h = profile.tail(start_slot).h
    s_tgt = np.maximum(h - p_s, 0.0)
    u_tgt = np.maximum(p_u - h, 0.0)
    s, u, e, n_done, event = _clamped_scan(
        h, s_tgt, u_tgt, storage.eta, profile.delta, e0, storage.e_max, stop_at_event
    )
    p = h[:n_done] - s + u
    if event is not None:
        event = BatteryEvent(event.kind, event.time + start_slot * profile.delta)
    return RealizedPolicy(profile.delta, p, s, u, e, start_slot), event


def simulate_policy(
    profile: HarvestProfile,
    storage: StorageSpec,
    actions: Sequence[float],
) -> RealizedPolicy:
    """Execute an arbitrary per-slot transmit-power sequence with clamps.

    Each action p_k >= 0 splits into s_k = max(h_k - p_k, 0) and
    u_k = max(p_k - h_k, 0) before the battery clamps run, so the recorded
    power may differ from the action where the battery bound it.
    """
    a = np.asarray(actions, dtype=float)
    if a.shape != profile.h.shape:
        raise ValueError(f"need {profile.n_slots} actions, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or np.any(a < 0.0):
        raise ValueError("actions must be finite and non-negative")
    s_tgt = np.maximum(profile.h - a, 0.0)
    u_tgt = np.maximum(a - profile.h, 0.0)
    s, u, e, n_done, _ = _clamped_scan(
        profile.h, s_tgt, u_tgt, storage.eta, profile.delta, storage.e_init,
        storage.e_max, stop_at_event=False,
    )
    p = profile.h - s + u
    return RealizedPolicy(profile.delta, p, s, u, e, 0)


def validate_policy(
    policy: RealizedPolicy,
    profile: HarvestProfile,
    storage: StorageSpec,
) -> Optional[Violation]:
    """Check every feasibility invariant of a realized policy.

    Returns None when clean, else the first violation (by check order:
    power balance, storage vs harvest, simultaneous charge/discharge,
    energy causality, overflow). The battery array is checked both against
    its bounds and against the flow ledger; a ledger break is reported as
    a causality violation at the offending slot.
    """
    n = policy.n_slots
    h = profile.h[policy.start_slot : policy.start_slot + n]
    if h.shape[0] != n or policy.e.shape[0] != n + 1:
        raise ValueError("policy shape does not match the profile slice")
    d = policy.delta
    eps_e = energy_tolerance(profile, storage.e_init)
    p_scale = max(1.0, float(np.max(policy.p, initial=0.0)), float(np.max(h, initial=0.0)))
    eps_p = EPS_POWER_REL * p_scale

    bal = np.abs(policy.p - (h - policy.s + policy.u))
    bad = np.flatnonzero(bal > eps_p)
    if bad.size:
        k = int(bad[0])
        return Violation(ViolationKind.POWER_BALANCE, k, f"|p-(h-s+u)| = {bal[k]:.3e}")

    bad = np.flatnonzero((policy.s < -eps_p) | (policy.s > h + eps_p))
    if bad.size:
        k = int(bad[0])
        return Violation(ViolationKind.STORAGE_EXCEEDS_HARVEST, k,
                         f"s = {policy.s[k]:.6g} with h = {h[k]:.6g}")

    bad = np.flatnonzero((policy.s > eps_p) & (policy.u > eps_p))
    if bad.size:
        k = int(bad[0])
        return Violation(ViolationKind.SIMULTANEOUS_CHARGE_DISCHARGE, k,
                         f"s = {policy.s[k]:.6g}, u = {policy.u[k]:.6g}")

    if np.any(policy.u < -eps_p):
        k = int(np.flatnonzero(policy.u < -eps_p)[0])
        return Violation(ViolationKind.CAUSALITY, k, f"negative draw u = {policy.u[k]:.6g}")

    # Ledger: the recorded battery array must follow the flow recursion.
    ledger = policy.e[0] + d * np.concatenate(([0.0], np.cumsum(storage.eta * policy.s - policy.u)))
    drift = np.abs(policy.e - ledger)
    bad = np.flatnonzero(drift > eps_e)
    if bad.size:
        k = max(int(bad[0]) - 1, 0)
        return Violation(ViolationKind.CAUSALITY, k,
                         f"battery array departs from the flow ledger by {drift[bad[0]]:.3e} J")

    bad = np.flatnonzero(policy.e < -eps_e)
    if bad.size:
        k = max(int(bad[0]) - 1, 0)
        return Violation(ViolationKind.CAUSALITY, k, f"battery at {policy.e[bad[0]]:.3e} J")

    if storage.bounded:
        bad = np.flatnonzero(policy.e > storage.e_max + eps_e)
        if bad.size:
            k = max(int(bad[0]) - 1, 0)
            return Violation(ViolationKind.OVERFLOW, k,
                             f"battery at {policy.e[bad[0]]:.6g} J > e_max")
    return None


def concat_policies(fragments: Sequence[RealizedPolicy]) -> RealizedPolicy:
    """Stitch contiguous fragments into one policy (boundary levels shared)."""
    if not fragments:
        raise ValueError("nothing to concatenate")
    delta = fragments[0].delta
    expected = fragments[0].start_slot
    e_parts = [np.asarray([fragments[0].e[0]])]
    p_parts, s_parts, u_parts = [], [], []
    for frag in fragments:
        if frag.delta != delta or frag.start_slot != expected:
            raise ValueError("fragments are not contiguous")
        p_parts.append(frag.p)
        s_parts.append(frag.s)
        u_parts.append(frag.u)
        e_parts.append(frag.e[1:])
        expected += frag.n_slots
    return RealizedPolicy(
        delta,
        np.concatenate(p_parts),
        np.concatenate(s_parts),
        np.concatenate(u_parts),
        np.concatenate(e_parts),
        fragments[0].start_slot,
    )
