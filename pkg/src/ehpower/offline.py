"""Offline-optimal threshold schedules from a fully known harvest trace.

With the whole trace in hand, the optimal transmit policy is a double
threshold pair (p_u, p_s) that is piecewise constant in time: thresholds
may rise only at instants the battery empties and (with a finite battery)
fall only at instants it fills, the pair always coupled through
r'(p_s) = eta * r'(p_u), and the battery must end the horizon empty.
The solvers here recover that schedule segment by segment with
one-dimensional searches over p_u.

The searches run candidate pairs through the physically clamped battery:
store requests are cut to what fits under e_max and draw requests to what
the battery holds, so a slot that tops the battery out transmits the
excess instead of losing it and the level lands exactly on a bound at a
slot boundary. An event is such an arrival at 0 or e_max (intervals that
merely sit pinned on a bound do not count), and a single trajectory may
brush one bound and travel on to the other. The segment candidates from a
given state come in two families indexed by the slot boundary the event
lands on: for each achievable empty boundary, the smallest p_u arriving
there, and for each full boundary strictly inside the horizon, the
largest p_u filling there, each timed at its first arrival on that bound
even when the other bound was touched on the way. A continuation test
past the arrival (the next event must be of the opposite kind, or a
depleting candidate may coast out to the horizon) filters the families;
when more than one candidate survives, the solver completes each branch
and keeps the best schedule.

Raising p_u (p_s coupled along it) weakens every store and strengthens
every draw, so the clamped level drops pointwise in p_u and both
candidate searches reduce to bisections, except for one wrinkle: from an
empty start the trajectory only leaves the bound at its first storing
slot, which jumps when the companion threshold passes a running-record
value of the remaining harvest. That cuts the threshold axis into a
handful of stretches, with the level monotone in p_u inside each, and the
searches scan stretches in order with one bisection inside the stretch
that qualifies. The scan arithmetic matches the clamped simulator block
for block, so an accepted candidate realizes exactly the event the
search found.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    EPS_POWER_REL,
    BatteryEvent,
    EventKind,
    HarvestProfile,
    RealizedPolicy,
    StorageSpec,
    concat_policies,
    simulate_thresholds,
)
from .rates import RateFunction, companion_threshold

_LOG = logging.getLogger(__name__)

_MAX_BISECT = 200
# Matches the clamped scan's block size so pre-crossing ledger levels agree
# with the simulator bit for bit (same summation grouping).
_BLOCK = 4096


@dataclass(frozen=True)
class ScheduleSegment:
    """One constant-threshold stretch: active from t_start (s) onward."""

    t_start: float
    p_u: float
    p_s: float


@dataclass
class ThresholdSchedule:
    """Piecewise-constant threshold pairs covering [0, horizon)."""

    segments: list
    horizon: float

    def thresholds_at(self, t: float) -> tuple[float, float]:
        if not 0.0 <= t <= self.horizon:
            raise ValueError(f"t = {t} outside [0, {self.horizon}]")
        current = self.segments[0]
        for seg in self.segments:
            if seg.t_start <= t:
                current = seg
            else:
                break
        return current.p_u, current.p_s

    def to_json_obj(self) -> dict:
        return {
            "horizon_s": self.horizon,
            "segments": [
                {
                    "t_start_s": seg.t_start,
                    "p_u_w": seg.p_u,
                    "p_s_w": None if math.isinf(seg.p_s) else seg.p_s,
                }
                for seg in self.segments
            ],
        }

    @staticmethod
    def from_json_obj(obj: dict) -> "ThresholdSchedule":
        segs = [
            ScheduleSegment(
                float(s["t_start_s"]),
                float(s["p_u_w"]),
                math.inf if s["p_s_w"] is None else float(s["p_s_w"]),
            )
            for s in obj["segments"]
        ]
        return ThresholdSchedule(segs, float(obj["horizon_s"]))

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_obj(), f, indent=2)

    @staticmethod
    def load(path) -> "ThresholdSchedule":
        with open(path) as f:
            return ThresholdSchedule.from_json_obj(json.load(f))


def realize_schedule(
    profile: HarvestProfile, storage: StorageSpec, schedule: ThresholdSchedule
) -> RealizedPolicy:
    """Replay a threshold schedule through the clamped simulator."""
    bounds = []
    for seg in schedule.segments:
        k = seg.t_start / profile.delta
        k_int = int(round(k))
        if abs(k - k_int) > 1e-6:
            raise ValueError(f"segment start {seg.t_start} is not slot-aligned")
        bounds.append(k_int)
    bounds.append(profile.n_slots)
    frags = []
    energy = storage.e_init
    for seg, a, b in zip(schedule.segments, bounds[:-1], bounds[1:]):
        if b <= a:
            raise ValueError("schedule segments must be ordered and non-empty")
        piece = HarvestProfile(profile.delta, profile.h[a:b])
        pol, _ = simulate_thresholds(
            piece, storage, seg.p_u, seg.p_s, 0, energy, stop_at_event=False
        )
        pol.start_slot = a
        energy = float(pol.e[-1])
        frags.append(pol)
    return concat_policies(frags)


# ---------------------------------------------------------------------------
# Clamped-trajectory primitives
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Event:
    """A physical battery event: the clamped level's arrival on a bound,
    always at a slot boundary. boundary is the absolute boundary index
    (1..n_slots); time is boundary * delta in seconds."""

    kind: EventKind
    boundary: int
    time: float


def _event_walk(h, delta, eta, e_max, p_u, p_s, e_start, start_slot,
                stop_empty, stop_full):
    """First wanted battery event of the clamped threshold policy over h.

    Walks the physically clamped level: per-slot flows eta*(h - p_s)^+ -
    (p_u - h)^+ with stores cut to fit under e_max and draws cut to what
    the level holds, intervals pinned on a bound skipped analytically. An
    event is the arrival on a bound after having been strictly inside
    (sitting pinned does not count). Arrivals whose kind is not flagged as
    wanted are scanned straight through; the first wanted one is returned,
    or None when no wanted event occurs by the end of h.

    Returns (event, pinned). The flag marks a slot spent pinned on a
    bound against a strictly desired flow after the level first left the
    bound it started on. An opening pinned stretch is fine (the effective
    threshold there drifts into the pair from the harvest side), and so
    is a slot that sits on a bound with the harvest inside the pair, but
    once the level has travelled, a pinned-against-desire slot means the
    pair is miscalibrated for this stretch of the profile and the walk
    cannot stand as one segment of an optimal schedule.

    The block arithmetic mirrors the clamped simulator, so levels agree
    bit for bit.
    """
    n = h.shape[0]
    bounded = math.isfinite(e_max)
    net = eta * np.maximum(h - p_s, 0.0) - np.maximum(p_u - h, 0.0)
    # Index arrays for the pinned-interval skips, built only when a walk
    # actually sits on a bound (most never do).
    charge_idx = drain_idx = None
    ek = float(e_start)
    k = 0
    departed = 0.0 < ek and not (bounded and ek >= e_max)
    pinned = False
    while k < n:
        if ek <= 0.0 and net[k] <= 0.0:
            # Pinned empty until the next charging slot: draws unavailable.
            if charge_idx is None:
                charge_idx = np.flatnonzero(net > 0.0)
                drain_idx = np.flatnonzero(net < 0.0)
            pos = np.searchsorted(charge_idx, k)
            nxt = int(charge_idx[pos]) if pos < charge_idx.size else n
            if departed and np.searchsorted(drain_idx, k) < np.searchsorted(
                drain_idx, nxt
            ):
                pinned = True
            if nxt >= n:
                return None, pinned
            k = nxt
            ek = 0.0
            continue
        if bounded and ek >= e_max and net[k] >= 0.0:
            # Pinned full until the next drawing slot: stores bounce off.
            if charge_idx is None:
                charge_idx = np.flatnonzero(net > 0.0)
                drain_idx = np.flatnonzero(net < 0.0)
            pos = np.searchsorted(drain_idx, k)
            nxt = int(drain_idx[pos]) if pos < drain_idx.size else n
            if departed and np.searchsorted(charge_idx, k) < np.searchsorted(
                charge_idx, nxt
            ):
                pinned = True
            if nxt >= n:
                return None, pinned
            k = nxt
            ek = e_max
            continue
        # The slot at k moves the level strictly off any bound it sits on.
        departed = True
        b = min(k + _BLOCK, n)
        seg = net[k:b]
        cum = ek + delta * np.cumsum(seg)
        trig = (cum <= 0.0) & (seg < 0.0)
        if bounded:
            trig |= (cum >= e_max) & (seg > 0.0)
        if not trig.any():
            ek = float(cum[-1])
            k = b
            continue
        i = int(np.argmax(trig))
        g = k + i
        if float(seg[i]) < 0.0:
            if stop_empty:
                t = start_slot + g + 1
                return _Event(EventKind.EMPTY, t, t * delta), pinned
            ek = 0.0
        else:
            if stop_full:
                t = start_slot + g + 1
                return _Event(EventKind.FULL, t, t * delta), pinned
            ek = e_max
        k = g + 1
    return None, pinned


# ---------------------------------------------------------------------------
# Segment search machinery
# ---------------------------------------------------------------------------


class _Search:
    """Per-solve context: clamped first-event walks over the remaining
    tail plus the stretch-wise bisections that resolve the edges of the
    event map on the threshold axis."""

    def __init__(self, profile, storage, rate):
        self.profile = profile
        self.storage = storage
        self.rate = rate
        self.eta = storage.eta
        self.t_total = profile.horizon
        self.k_total = profile.n_slots

    def companion(self, p_u: float) -> float:
        return companion_threshold(p_u, self.eta, self.rate)

    def store_edge(self, x: float) -> float:
        """Largest representable p_u whose companion threshold sits strictly
        below x, so a slot harvesting x still stores there; -1.0 when no
        threshold stores x. Bisects on the companion itself so the boundary
        agrees bitwise with the comparisons the event ledger makes."""
        if self.eta == 0.0 or x <= 0.0:
            return -1.0
        if not self.companion(0.0) < x:
            return -1.0
        guess = float(self.rate.derivative(x)) / self.eta
        if guess >= float(self.rate.derivative(0.0)):
            lo = 0.0
        else:
            lo = float(self.rate.inverse_derivative(guess, side="low"))
        if not self.companion(lo) < x:
            lo = 0.0
        hi = 2.0 * lo + 1.0
        while self.companion(hi) < x:
            hi = 2.0 * hi + 1.0
        for _ in range(_MAX_BISECT):
            mid = 0.5 * (lo + hi)
            if not lo < mid < hi:
                break
            if self.companion(mid) < x:
                lo = mid
            else:
                hi = mid
        return lo

    def coast_threshold(self, start_slot) -> float:
        """Smallest p_u whose companion clears every remaining harvest
        value. Such a pair never stores, so with nothing banked the clamped
        policy rides p = h to the horizon with the battery flat at zero."""
        edge = self.store_edge(float(np.max(self.profile.h[start_slot:])))
        if edge < 0.0:
            return 0.0
        return float(np.nextafter(edge, np.inf))

    def drain_cap(self, start_slot, e_start) -> float:
        """A p_u guaranteed to sit inside the depleting region whenever the
        start level is strictly positive (it drains the bank within a slot
        and out-draws every harvest value)."""
        base = e_start / self.profile.delta + float(
            np.max(self.profile.h[start_slot:])
        )
        return base + max(1.0, base)

    def first_event(self, p_u, start_slot, e_start) -> Optional[_Event]:
        """First battery event of either kind for the coupled pair at p_u,
        or None when the clamped level stays off the bounds (pinned
        intervals aside) through the horizon."""
        return self._walk(p_u, start_slot, e_start, True, True)[0]

    def first_empty(self, p_u, start_slot, e_start):
        """First arrival at an empty battery as (event, pinned), scanning
        straight through any full-battery touches on the way; pinned flags
        a mid-walk slot stuck against a desired flow before the event."""
        return self._walk(p_u, start_slot, e_start, True, False)

    def first_full(self, p_u, start_slot, e_start):
        """First arrival at a full battery as (event, pinned), scanning
        straight through any empty-battery touches on the way; pinned
        flags a mid-walk slot stuck against a desired flow before it."""
        return self._walk(p_u, start_slot, e_start, False, True)

    def _walk(self, p_u, start_slot, e_start, stop_empty, stop_full):
        return _event_walk(
            self.profile.h[start_slot:],
            self.profile.delta,
            self.eta,
            self.storage.e_max,
            p_u,
            self.companion(p_u),
            e_start,
            start_slot,
            stop_empty,
            stop_full,
        )

    def run(self, p_u, start_slot, e_start):
        p_s = self.companion(p_u)
        return simulate_thresholds(
            self.profile, self.storage, p_u, p_s, start_slot, e_start
        )

    def run_until(self, p_u, start_slot, e_start, want: Optional[EventKind]):
        """Clamped run from the state to the first event of the wanted
        kind, straight through touches of the other kind (those stay
        inside the segment: thresholds only move at events of the kind the
        candidate was accepted on). want None runs to the first event of
        either kind, as the plain simulator does."""
        frags = []
        slot, level = start_slot, e_start
        event = None
        while slot < self.k_total:
            frag, event = self.run(p_u, slot, level)
            frags.append(frag)
            slot += frag.n_slots
            if event is None or want is None or event.kind is want:
                break
            level = self.storage.e_max if event.kind is EventKind.FULL else 0.0
        if len(frags) == 1:
            return frags[0], event
        return concat_policies(frags), event

    # -- stretch decomposition and edge searches --------------------------------

    def _stretches(self, start_slot, e_start, lo, hi) -> list:
        """Ascending closed p_u intervals within [lo, hi] on which the
        pinned prefix slot of first_event is constant, so the first-event
        kind is monotone (Full low, Empty high) on each interval.

        From an empty start the prefix ends at the first store, which
        jumps only when the companion threshold passes a running-maximum
        record of the tail; from a full start it ends at the first draw,
        jumping at running-minimum records. Interior starts have no prefix
        and yield a single interval. Threshold ranges with no inward flow
        at all (no events possible) are omitted.
        """
        if lo > hi:
            return []
        tail = self.profile.h[start_slot:]
        if e_start <= 0.0:
            run_max = np.maximum.accumulate(tail)
            prev = np.concatenate(([-np.inf], run_max[:-1]))
            heights = tail[tail > prev]
            out = []
            a = 0.0
            for x in heights:
                b = self.store_edge(float(x))
                if b < 0.0:
                    # No threshold stores x; the record never ends a prefix.
                    continue
                lo_i = max(a, lo)
                hi_i = min(b, hi)
                if lo_i <= hi_i:
                    out.append((lo_i, hi_i))
                a = float(np.nextafter(b, np.inf))
            return out
        if self.storage.bounded and e_start >= self.storage.e_max:
            run_min = np.minimum.accumulate(tail)
            prev = np.concatenate(([np.inf], run_min[:-1]))
            heights = tail[tail < prev]
            out = []
            b = hi
            for x in heights:
                lo_i = max(np.nextafter(float(x), np.inf), lo)
                hi_i = min(b, hi)
                if lo_i <= hi_i:
                    out.append((lo_i, hi_i))
                b = float(x)
            out.reverse()
            return out
        return [(lo, hi)]

    def smallest_depleting(self, start_slot, e_start, lo, hi):
        """Smallest p_u in [lo, hi] that depletes cleanly, with its
        first-empty event, or None when nothing in range does. Depleting
        means the clamped level reaches 0 at some boundary by the horizon;
        full touches on the way are allowed but a slot spent pinned full
        against a desired store disqualifies (only an opening pinned
        stretch is sound). Within a stretch the level drops pointwise in
        p_u and pinned slots thin out as p_u grows, so the clean depleting
        set is its upper part."""

        def empties(probe):
            ev, stuck = probe
            return ev is not None and not stuck

        for a, b in self._stretches(start_slot, e_start, lo, hi):
            probe_b = self.first_empty(b, start_slot, e_start)
            if not empties(probe_b):
                continue
            probe_a = self.first_empty(a, start_slot, e_start)
            if empties(probe_a):
                return a, probe_a[0]
            p_lo, p_hi, ev_hi = a, b, probe_b[0]
            for _ in range(_MAX_BISECT):
                mid = 0.5 * (p_lo + p_hi)
                if not p_lo < mid < p_hi:
                    break
                probe = self.first_empty(mid, start_slot, e_start)
                if empties(probe):
                    p_hi, ev_hi = mid, probe[0]
                else:
                    p_lo = mid
            return p_hi, ev_hi
        return None

    def largest_filling(self, start_slot, e_start, lo, hi):
        """Largest p_u in [lo, hi] that fills cleanly strictly inside the
        horizon, with its first-full event, or None. Empty touches on the
        way are allowed but a slot spent pinned empty against a desired
        draw disqualifies (opening stretch aside); a fill on the final
        boundary is excluded since it strands a full battery at T. Within
        a stretch the level drops pointwise in p_u and pinned slots thin
        out as p_u falls, so the clean filling set is its lower part and
        fill boundaries only move later as p_u grows."""

        def fills(probe):
            ev, stuck = probe
            return ev is not None and not stuck and ev.boundary < self.k_total

        for a, b in reversed(self._stretches(start_slot, e_start, lo, hi)):
            probe_a = self.first_full(a, start_slot, e_start)
            if not fills(probe_a):
                continue
            probe_b = self.first_full(b, start_slot, e_start)
            if fills(probe_b):
                return b, probe_b[0]
            p_lo, ev_lo, p_hi = a, probe_a[0], b
            for _ in range(_MAX_BISECT):
                mid = 0.5 * (p_lo + p_hi)
                if not p_lo < mid < p_hi:
                    break
                probe = self.first_full(mid, start_slot, e_start)
                if fills(probe):
                    p_lo, ev_lo = mid, probe[0]
                else:
                    p_hi = mid
            return p_lo, ev_lo
        return None

    def depleting_candidates(self, start_slot, e_start, lo, hi, cap_n=8):
        """Per-boundary depleting candidates in [lo, hi], ascending in
        p_u: for each achievable first-empty boundary (latest first), the
        smallest clean p_u landing there. The first entry is the overall
        smallest clean depleting threshold; later entries drain harder and
        land on earlier boundaries. Within a stretch the level drops
        pointwise in p_u, so the landing boundary only moves earlier as
        p_u grows and each edge is a clean bisection."""
        out = []
        bound = self.k_total + 1
        for a, b in self._stretches(start_slot, e_start, lo, hi):
            probe_b = self.first_empty(b, start_slot, e_start)
            if probe_b[0] is None or probe_b[1]:
                continue
            probe_a = self.first_empty(a, start_slot, e_start)
            if probe_a[0] is not None and not probe_a[1]:
                p0, ev0 = a, probe_a[0]
            else:
                p_lo, p_hi, ev_hi = a, b, probe_b[0]
                for _ in range(_MAX_BISECT):
                    mid = 0.5 * (p_lo + p_hi)
                    if not p_lo < mid < p_hi:
                        break
                    ev, stuck = self.first_empty(mid, start_slot, e_start)
                    if ev is not None and not stuck:
                        p_hi, ev_hi = mid, ev
                    else:
                        p_lo = mid
                p0, ev0 = p_hi, ev_hi
            if ev0.boundary < bound:
                out.append((p0, ev0))
                bound = ev0.boundary
            # Ladder onto earlier landings within the stretch: above p0
            # everything is clean, so only the boundary bisections remain.
            floor_b = probe_b[0].boundary
            p_prev = p0
            while bound > floor_b and len(out) < cap_n:
                p_lo, p_hi, ev_hi = p_prev, b, probe_b[0]
                for _ in range(_MAX_BISECT):
                    mid = 0.5 * (p_lo + p_hi)
                    if not p_lo < mid < p_hi:
                        break
                    ev, _ = self.first_empty(mid, start_slot, e_start)
                    if ev is not None and ev.boundary < bound:
                        p_hi, ev_hi = mid, ev
                    else:
                        p_lo = mid
                out.append((p_hi, ev_hi))
                bound = ev_hi.boundary
                p_prev = p_hi
            if len(out) >= cap_n:
                break
        return out

    def filling_candidates(self, start_slot, e_start, lo, hi, cap_n=8):
        """Per-boundary filling candidates in [lo, hi], descending in
        p_u: for each achievable first-full boundary strictly inside the
        horizon (latest first), the largest clean p_u filling there. The
        first entry is the overall largest clean filling threshold; later
        entries store harder and fill on earlier boundaries."""
        out = []
        bound = self.k_total
        for a, b in reversed(self._stretches(start_slot, e_start, lo, hi)):
            probe_a = self.first_full(a, start_slot, e_start)
            ev_a, stuck_a = probe_a
            if ev_a is None or stuck_a or ev_a.boundary >= bound:
                continue
            probe_b = self.first_full(b, start_slot, e_start)
            if (
                probe_b[0] is not None
                and not probe_b[1]
                and probe_b[0].boundary < bound
            ):
                q0, ev0 = b, probe_b[0]
            else:
                p_lo, ev_lo, p_hi = a, ev_a, b
                for _ in range(_MAX_BISECT):
                    mid = 0.5 * (p_lo + p_hi)
                    if not p_lo < mid < p_hi:
                        break
                    ev, stuck = self.first_full(mid, start_slot, e_start)
                    if ev is not None and not stuck and ev.boundary < bound:
                        p_lo, ev_lo = mid, ev
                    else:
                        p_hi = mid
                q0, ev0 = p_lo, ev_lo
            out.append((q0, ev0))
            bound = ev0.boundary
            # Ladder onto earlier fills within the stretch: below q0
            # everything is clean, so only the boundary bisections remain.
            floor_b = ev_a.boundary
            q_prev = q0
            while bound > floor_b and len(out) < cap_n:
                p_lo, ev_lo, p_hi = a, ev_a, q_prev
                for _ in range(_MAX_BISECT):
                    mid = 0.5 * (p_lo + p_hi)
                    if not p_lo < mid < p_hi:
                        break
                    ev, _ = self.first_full(mid, start_slot, e_start)
                    if ev is not None and ev.boundary < bound:
                        p_lo, ev_lo = mid, ev
                    else:
                        p_hi = mid
                out.append((p_lo, ev_lo))
                bound = ev_lo.boundary
                q_prev = p_lo
            if len(out) >= cap_n:
                break
        return out

    def continuation_passes(self, p_u, ev: _Event) -> bool:
        """Consistency test deciding whether a candidate may end a segment.

        Extended past its own event, the candidate's next battery event
        must be of the opposite kind. A depleting candidate may instead
        coast event-free to the horizon or refill right on its final
        boundary, and one whose depletion lands on the final boundary is
        the ideal ending; a filling candidate must drain back to empty by
        the horizon, else nothing below it could land the battery empty.
        """
        at_full = ev.kind is EventKind.FULL
        if ev.boundary >= self.k_total:
            return not at_full
        after = self.first_event(
            p_u, ev.boundary, self.storage.e_max if at_full else 0.0
        )
        if at_full:
            return after is not None and after.kind is EventKind.EMPTY
        if after is None or after.kind is EventKind.FULL:
            return True
        return after.boundary >= self.k_total


def find_smallest_depleting_threshold(
    profile: HarvestProfile,
    storage: StorageSpec,
    rate: RateFunction,
    start_slot: int = 0,
    start_energy: Optional[float] = None,
) -> tuple[float, float, Optional[BatteryEvent]]:
    """Smallest p_u from the given state that depletes the battery.

    Depleting means the clamped trajectory reaches an empty battery at
    some slot boundary by the horizon; brushing a full battery on the way
    is allowed and stays inside the segment, but thresholds whose walk
    sits pinned full against a desired store (past any opening pinned
    stretch) are skipped as miscalibrated. Returns (p_u, p_s, event) with
    the first arrival at empty; a depletion flush with the horizon is the
    ideal terminal and is reported like any other. When no threshold
    depletes cleanly (nothing banked and anything stored could never be
    drawn back out in time), the smallest coasting threshold is returned
    with event None, and the clamped policy rides p = h.
    """
    e0 = storage.e_init if start_energy is None else float(start_energy)
    search = _Search(profile, storage, rate)
    hit = search.smallest_depleting(
        start_slot, e0, 0.0, search.drain_cap(start_slot, e0)
    )
    if hit is None:
        p_c = search.coast_threshold(start_slot)
        return p_c, search.companion(p_c), None
    p_u, cr = hit
    return p_u, search.companion(p_u), BatteryEvent(EventKind.EMPTY, cr.time)


def find_candidates(
    profile: HarvestProfile,
    storage: StorageSpec,
    rate: RateFunction,
    start_slot: int = 0,
    start_energy: Optional[float] = None,
) -> dict:
    """Both finite-battery segment candidates from the given state.

    empty_candidate: smallest p_u whose clamped trajectory reaches an
    empty battery by the horizon, as (p_u, p_s, t1) with t1 its first
    arrival at empty; full_candidate: largest p_u whose trajectory reaches
    a full battery strictly inside the horizon, as (p_u, p_s, t1_bar).
    Touch-and-leave contacts with the opposite bound do not disqualify
    either, but a slot spent pinned there against a desired flow (past an
    opening pinned stretch) does. Either entry is None when no threshold
    in range gets there cleanly in time.
    """
    if not storage.bounded:
        raise ValueError("finite-battery candidates need a finite e_max")
    e0 = storage.e_init if start_energy is None else float(start_energy)
    search = _Search(profile, storage, rate)
    cap = search.drain_cap(start_slot, e0)
    out = {"empty_candidate": None, "full_candidate": None}
    hit = search.smallest_depleting(start_slot, e0, 0.0, cap)
    if hit is not None:
        p_u, cr = hit
        out["empty_candidate"] = (p_u, search.companion(p_u), cr.time)
    filled = search.largest_filling(start_slot, e0, 0.0, cap)
    if filled is not None:
        q, cr_q = filled
        out["full_candidate"] = (q, search.companion(q), cr_q.time)
    return out


def _assemble(profile, rate, pieces):
    """Fold accepted (start_slot, p_u, p_s, fragment) pieces into outputs,
    merging consecutive segments whose thresholds agree to tolerance."""
    segments = []
    for start_slot, p_u, p_s, _ in pieces:
        if segments and abs(segments[-1].p_u - p_u) <= EPS_POWER_REL * max(1.0, p_u):
            continue
        segments.append(ScheduleSegment(start_slot * profile.delta, p_u, p_s))
    policy = concat_policies([frag for _, _, _, frag in pieces])
    schedule = ThresholdSchedule(segments, profile.horizon)
    utility = policy.average_utility(rate)
    return schedule, policy, utility


def solve_infinite(
    profile: HarvestProfile, storage: StorageSpec, rate: RateFunction
) -> tuple[ThresholdSchedule, RealizedPolicy, float]:
    """Unbounded-battery optimum: repeat the smallest-depleting search from
    every depletion instant; thresholds are non-decreasing and the battery
    finishes the horizon empty."""
    if storage.bounded:
        raise ValueError("solve_infinite needs an unbounded battery (e_max = inf)")
    search = _Search(profile, storage, rate)
    pieces = []
    slot = 0
    energy = storage.e_init
    p_floor = 0.0
    while slot < profile.n_slots:
        cap = max(search.drain_cap(slot, energy), p_floor)
        hit = search.smallest_depleting(slot, energy, p_floor, cap)
        if hit is None:
            # Nothing above the floor can bank energy and drain it back by
            # the deadline, so coast out passively with the battery flat.
            p_c = max(p_floor, search.coast_threshold(slot))
            frag, _ = search.run(p_c, slot, energy)
            pieces.append((slot, p_c, search.companion(p_c), frag))
            break
        p_u, _ = hit
        frag, event = search.run_until(p_u, slot, energy, EventKind.EMPTY)
        pieces.append((slot, p_u, search.companion(p_u), frag))
        slot += frag.n_slots
        energy = 0.0
        p_floor = p_u
        if event is None:
            break
    return _assemble(profile, rate, pieces)


def solve_finite(
    profile: HarvestProfile, storage: StorageSpec, rate: RateFunction
) -> tuple[ThresholdSchedule, RealizedPolicy, float]:
    """Finite-battery optimum via per-boundary segment candidates.

    Per segment: enumerate the depleting candidates (smallest clean p_u
    per achievable empty boundary) and the filling candidates (largest
    clean p_u per full boundary inside the horizon), extend each past its
    own event, and keep those whose continuation is consistent (depleting
    candidate: next event Full, or none until the horizon; filling
    candidate: next event Empty within the horizon). A segment may brush
    the opposite bound on the way to its event (the slot that lands there
    transmits the excess the battery cannot take or give); thresholds rise
    only where the battery runs empty, fall only where it fills, and the
    last segment lands the battery empty at T.

    In continuous time an ordering argument leaves exactly one consistent
    candidate; slotted clamped time can leave several with genuinely
    different thresholds. The local tests cannot tell those apart, so the
    solver completes each surviving branch and keeps the highest-scoring
    schedule, under a shared fork budget.
    """
    if not storage.bounded:
        raise ValueError("solve_finite needs a finite e_max")
    search = _Search(profile, storage, rate)
    pieces = _finite_pieces(
        search, 0, storage.e_init, 0.0, math.inf, [_FORK_BUDGET]
    )
    return _assemble(profile, rate, pieces)


# Each state with several consistent candidates forks the remaining solve
# once per extra candidate. The budget is shared across the whole solve
# (a one-element list threaded through the recursion); past it the first
# candidate in depleting-then-filling order stands alone. Randomized
# probes stayed under ~300 forks on 60000-slot traces and under ~1800 on
# short traces with batteries a few slots deep, so this cap leaves the
# explored tree exact in practice while bounding adversarial blowup.
_FORK_BUDGET = 4096


def _branch_score(rate, pieces) -> float:
    """Total utility (slot sum) accrued by a piece list; fragments all have
    the same slot length so this ranks branches over a common tail."""
    return float(sum(rate.rate(frag.p).sum() for _, _, _, frag in pieces))


def _finite_pieces(search, slot, energy, lo_dom, hi_dom, budget):
    """Build the (start_slot, p_u, p_s, fragment) list covering slots
    slot..K for the finite-battery solve, recursing only where several
    consistent candidates force a comparison of completed branches."""
    pieces = []
    while slot < search.k_total:
        # After a Full boundary the previous threshold caps the range and is
        # itself guaranteed to deplete (its continuation test proved it), so
        # the cap must not clip below it.
        if math.isfinite(hi_dom):
            cap = max(hi_dom, lo_dom)
        else:
            cap = max(search.drain_cap(slot, energy), lo_dom)
        cands = [
            (p, ev, EventKind.EMPTY)
            for p, ev in search.depleting_candidates(slot, energy, lo_dom, cap)
        ]
        cands += [
            (q, ev, EventKind.FULL)
            for q, ev in search.filling_candidates(slot, energy, lo_dom, cap)
        ]
        if not cands:
            # Nothing in range reaches either bound cleanly: storing more
            # could never pay off, so coast out passively to the horizon.
            p_c = max(lo_dom, search.coast_threshold(slot))
            frag, _ = search.run(p_c, slot, energy)
            pieces.append((slot, p_c, search.companion(p_c), frag))
            break
        live = []
        for p, ev, kind in cands:
            if any(
                math.isclose(p, o[0], rel_tol=1e-6, abs_tol=1e-12)
                for o in live
            ):
                continue
            if search.continuation_passes(p, ev):
                live.append((p, ev, kind))
        if not live:
            if cands[0][2] is EventKind.EMPTY:
                # The depleting candidate stands even if its continuation
                # drains again: the next segment absorbs that by carrying
                # the threshold forward.
                warnings.warn(
                    f"no segment candidate passes the continuation test at "
                    f"slot {slot}; keeping the smallest depleting one",
                    RuntimeWarning,
                )
                pick, _, want = cands[0]
            else:
                # Only filling candidates and none can drain again by the
                # horizon; banked energy would strand, so coast instead.
                p_c = max(lo_dom, search.coast_threshold(slot))
                frag, _ = search.run(p_c, slot, energy)
                pieces.append((slot, p_c, search.companion(p_c), frag))
                break
        elif len(live) == 1:
            pick, _, want = live[0]
        else:
            _LOG.info(
                "segment candidates at slot %d both pass the continuation "
                "test (p_u %s); comparing completions",
                slot,
                ", ".join(f"{p:.6g}" for p, _, _ in live),
            )
            pick, _, want = live[0]
            if budget[0] > 0:
                budget[0] -= len(live) - 1
                best = None
                best_score = -math.inf
                for p, _, kind in live:
                    branch = _finite_branch(search, p, kind, slot, energy, budget)
                    score = _branch_score(search.rate, branch)
                    if score > best_score:
                        best, best_score = branch, score
                pieces.extend(best)
                return pieces
            # Out of forking budget: the first candidate stands.

        frag, event = search.run_until(pick, slot, energy, want)
        pieces.append((slot, pick, search.companion(pick), frag))
        slot += frag.n_slots
        if event is None:
            break
        if event.kind is EventKind.EMPTY:
            energy = 0.0
            lo_dom, hi_dom = pick, math.inf
        else:
            energy = search.storage.e_max
            lo_dom, hi_dom = 0.0, pick
    return pieces


def _finite_branch(search, pick, want, slot, energy, budget):
    """Commit one candidate as the next segment and complete the schedule
    from the state its event leaves behind."""
    frag, event = search.run_until(pick, slot, energy, want)
    head = (slot, pick, search.companion(pick), frag)
    nxt = slot + frag.n_slots
    if event is None or nxt >= search.k_total:
        return [head]
    if event.kind is EventKind.EMPTY:
        tail = _finite_pieces(search, nxt, 0.0, pick, math.inf, budget)
    else:
        tail = _finite_pieces(
            search, nxt, search.storage.e_max, 0.0, pick, budget
        )
    return [head] + tail
