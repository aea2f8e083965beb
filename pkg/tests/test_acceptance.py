"""Acceptance gate: ten end-to-end checks, one test per criterion.

Run with ``pytest tests/test_acceptance.py -v`` for one pass/fail line per
criterion, or add ``-s`` to also see the measured numbers.  The heavy desk
fixtures (full-length sweeps on the shipped configs) are shared across
criteria and built once per session.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from ehpower import (
    AwgnLink,
    AwgnRate,
    DpConfig,
    HarvestProfile,
    StorageSpec,
    UniformHarvest,
    energy_tolerance,
    load_config,
    normalized_log_rate,
    solve_convex_oracle,
    solve_finite,
    solve_fixed_thresholds,
    solve_infinite,
    sweep_eta,
    trace_region,
    value_iterate,
)

RATE = normalized_log_rate()
CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

# Desk-scale link: 1 MHz, -170 dBm/Hz noise floor, -100 dB path loss,
# so snr_per_watt = 1e3.
DESK_RATE = AwgnRate(AwgnLink(1e6, 1e-19, 1e-10))


def _solve(profile, storage, rate=RATE):
    solver = solve_finite if storage.bounded else solve_infinite
    return solver(profile, storage, rate)


def _report(n, text):
    print(f"\ncriterion {n:02d}: {text}")


# ---------------------------------------------------------------------------
# Shared instance batches


@pytest.fixture(scope="module")
def random_batch():
    """200 random instances (up to 50 slots, eta in [0.05, 1], bounded and
    unbounded batteries, zero and nonzero initial charge), solved offline."""
    rng = np.random.default_rng(20260815)
    out = []
    t0 = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(2, 51))
        profile = HarvestProfile(1.0, rng.uniform(0.0, 2.0, n))
        eta = float(rng.uniform(0.05, 1.0))
        e_max = math.inf if rng.random() < 0.5 else float(rng.uniform(0.1, 1.5))
        if rng.random() < 0.4:
            e_init = float(rng.uniform(0.0, min(e_max, 0.8)))
        else:
            e_init = 0.0
        storage = StorageSpec(eta=eta, e_max=e_max, e_init=e_init)
        schedule, realized, utility = _solve(profile, storage)
        out.append((profile, storage, schedule, realized, utility))
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_sweep():
    config = load_config(CONFIG_DIR / "desk_single_user.json")
    t0 = time.perf_counter()
    rows = sweep_eta(config, jobs=2)
    return config, rows, time.perf_counter() - t0


@pytest.fixture(scope="module")
def desk_region():
    config = load_config(CONFIG_DIR / "desk_broadcast.json")
    t0 = time.perf_counter()
    rows = trace_region(config)
    return config, rows, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 1. Two-slot closed form


def test_criterion_01_two_slot_closed_form():
    profile = HarvestProfile(1.0, [2.0, 0.0])
    storage = StorageSpec(eta=0.5, e_max=math.inf, e_init=0.0)
    t0 = time.perf_counter()
    schedule, realized, utility = solve_infinite(profile, storage, RATE)
    elapsed = time.perf_counter() - t0

    assert utility == pytest.approx(0.821928, abs=1e-4)
    assert len(schedule.segments) == 1
    seg = schedule.segments[0]
    assert seg.p_u == pytest.approx(0.25, abs=1e-6)
    assert seg.p_s == pytest.approx(1.5, abs=1e-6)
    assert elapsed < 1.0
    _report(1, f"utility {utility:.6f}, thresholds ({seg.p_u:.6f}, "
               f"{seg.p_s:.6f}), {elapsed * 1e3:.1f} ms")


# ---------------------------------------------------------------------------
# 2. Threshold coupling on a random batch


def test_criterion_02_threshold_coupling(random_batch):
    batch, elapsed = random_batch
    worst = 0.0
    for profile, storage, schedule, realized, utility in batch:
        for seg in schedule.segments:
            du = RATE.derivative(seg.p_u)
            ds = 0.0 if math.isinf(seg.p_s) else RATE.derivative(seg.p_s)
            err = abs(ds - storage.eta * du)
            assert err <= 1e-6 * du
            worst = max(worst, err / du)
    assert elapsed < 30.0
    _report(2, f"200 instances solved in {elapsed:.2f} s, worst relative "
               f"coupling error {worst:.3g}")


# ---------------------------------------------------------------------------
# 3. Terminal depletion


def test_criterion_03_terminal_depletion(random_batch):
    batch, _ = random_batch
    worst = 0.0
    for profile, storage, schedule, realized, utility in batch:
        tol = energy_tolerance(profile, storage.e_init)
        leftover = abs(float(realized.e[-1]))
        assert leftover <= tol
        worst = max(worst, leftover)
    _report(3, f"largest terminal battery level {worst:.3g} J")


# ---------------------------------------------------------------------------
# 4. Threshold monotonicity tied to battery events


def test_criterion_04_threshold_moves_match_events(random_batch):
    batch, _ = random_batch
    n_up = n_down = 0
    for profile, storage, schedule, realized, utility in batch:
        segs = schedule.segments
        tol = energy_tolerance(profile, storage.e_init)
        for prev, cur in zip(segs[:-1], segs[1:]):
            step = cur.p_u - prev.p_u
            if not storage.bounded:
                assert step >= -1e-9 * max(1.0, prev.p_u)
                continue
            k = int(round(cur.t_start / profile.delta))
            level = float(realized.e[k])
            if step > 1e-9 * max(1.0, prev.p_u):
                assert level <= tol
                n_up += 1
            elif step < -1e-9 * max(1.0, prev.p_u):
                assert level >= storage.e_max - tol
                n_down += 1
    _report(4, f"checked {n_up} upward moves at empty, {n_down} downward "
               f"moves at full")


# ---------------------------------------------------------------------------
# 5. Oracle equivalence on small instances


def test_criterion_05_matches_certified_oracle():
    rng = np.random.default_rng(20260816)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(2, 9))
        profile = HarvestProfile(1.0, rng.uniform(0.0, 2.0, n))
        eta = float(rng.uniform(0.05, 1.0))
        e_max = math.inf if rng.random() < 0.4 else float(rng.uniform(0.1, 1.2))
        if rng.random() < 0.5:
            e_init = float(rng.uniform(0.0, min(e_max, 1.0)))
        else:
            e_init = 0.0
        storage = StorageSpec(eta=eta, e_max=e_max, e_init=e_init)
        _, _, utility = _solve(profile, storage)
        oracle = solve_convex_oracle(profile, storage, RATE, seed=i)
        assert oracle.certified, f"oracle not certified on instance {i}"
        scale = max(1.0, abs(oracle.utility))
        gap = abs(utility - oracle.utility) / scale
        assert gap <= 1e-4, f"instance {i}: {utility} vs {oracle.utility}"
        worst = max(worst, gap)
    elapsed = time.perf_counter() - t0
    assert elapsed < 120.0
    _report(5, f"100 instances in {elapsed:.1f} s, worst relative gap "
               f"{worst:.3g}")


# ---------------------------------------------------------------------------
# 6. Lossless and dead-battery limits


def test_criterion_06_eta_limits():
    rng = np.random.default_rng(4242)
    for _ in range(25):
        n = int(rng.integers(2, 31))
        profile = HarvestProfile(1.0, rng.uniform(0.0, 2.0, n))
        e_max = math.inf if rng.random() < 0.5 else float(rng.uniform(0.2, 1.5))

        # Dead battery: storing returns nothing, so the optimum rides the
        # harvest exactly (matching the spend-immediately baseline).
        dead = StorageSpec(eta=0.0, e_max=e_max, e_init=0.0)
        _, realized, _ = _solve(profile, dead)
        assert np.max(np.abs(realized.p - profile.h)) <= 1e-9

        # Lossless battery: both thresholds coincide in every segment.
        lossless = StorageSpec(eta=1.0, e_max=e_max, e_init=0.0)
        schedule, _, _ = _solve(profile, lossless)
        for seg in schedule.segments:
            assert seg.p_s == pytest.approx(seg.p_u, rel=1e-9, abs=1e-12)
    _report(6, "eta=0 rides the harvest, eta=1 collapses the thresholds")


# ---------------------------------------------------------------------------
# 7. Trained DP policy has double-threshold structure


def test_criterion_07_dp_policy_structure():
    dist = UniformHarvest(0.0, 0.02)
    storage = StorageSpec(eta=0.5, e_max=0.1)
    config = DpConfig(delta=0.01)
    t0 = time.perf_counter()
    solution = value_iterate(storage, dist, DESK_RATE, config)
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0

    h = solution.h_grid
    top = dist.support_top()
    span = config.action_span if config.action_span else 2.0 * top
    step = max(span, top) / (config.action_points - 1)
    margin = 2.0 * step

    worst_fit = 0.0
    coupled_rows = 0
    worst_coupling = 0.0
    for row in range(solution.phi.shape[0]):
        phi = solution.phi[row]
        drawing = phi > h + margin
        storing = phi < h - margin
        p_u = float(np.median(phi[drawing])) if drawing.any() else 0.0
        p_s = float(np.median(phi[storing])) if storing.any() else math.inf
        fitted = np.clip(h, p_u, p_s)
        fit_err = float(np.max(np.abs(phi - fitted)))
        assert fit_err <= margin + 1e-12
        worst_fit = max(worst_fit, fit_err)
        if drawing.any() and storing.any():
            coupled_rows += 1
            du = DESK_RATE.derivative(p_u)
            ds = DESK_RATE.derivative(p_s)
            err = abs(ds - storage.eta * du) / (storage.eta * du)
            assert err <= 0.05
            worst_coupling = max(worst_coupling, err)
    assert coupled_rows > 0
    _report(7, f"trained in {elapsed:.1f} s; worst clamp fit {worst_fit:.3g} W "
               f"(grid step {step:.3g}), worst coupling error "
               f"{worst_coupling:.3g} over {coupled_rows} rows")


# ---------------------------------------------------------------------------
# 8. Fixed online thresholds, closed forms


def test_criterion_08_fixed_threshold_closed_forms():
    dist = UniformHarvest(0.0, 2.0)

    half = solve_fixed_thresholds(dist, RATE, 0.5)
    assert half.p_u == pytest.approx(1.0 / 3.0, abs=1e-6)
    assert half.p_s == pytest.approx(5.0 / 3.0, abs=1e-6)

    lossless = solve_fixed_thresholds(dist, RATE, 1.0)
    assert lossless.p_u == pytest.approx(1.0, abs=1e-6)
    assert lossless.p_s == pytest.approx(1.0, abs=1e-6)

    dead = solve_fixed_thresholds(dist, RATE, 0.0)
    assert dead.p_u == 0.0
    assert math.isinf(dead.p_s)
    _report(8, f"eta=0.5 gives ({half.p_u:.6f}, {half.p_s:.6f}), eta=1 gives "
               f"the median, eta=0 never touches the battery")


# ---------------------------------------------------------------------------
# 9. Desk-scale policy ordering


def test_criterion_09_desk_policy_ordering(desk_sweep):
    config, rows, elapsed = desk_sweep
    assert elapsed < 900.0
    assert all(r["error"] is None for r in rows)

    cells = {}
    for r in rows:
        cells.setdefault((r["policy"], r["eta"]), []).append(
            (r["seed"], r["avg_rate_bps"]))
    means = {}
    for (policy, eta), pairs in cells.items():
        assert len(pairs) == config.seeds
        means[(policy, eta)] = float(np.mean([v for _, v in pairs]))

    for eta in config.eta_list:
        off = means[("offline", eta)]
        dp = means[("dp", eta)]
        fixed = means[("fixed", eta)]
        hasty = means[("hasty", eta)]
        const = means[("constant", eta)]
        tiny = 1e-9 * off
        assert off >= dp - tiny, f"eta={eta}: offline {off} < dp {dp}"
        assert dp >= fixed - tiny, f"eta={eta}: dp {dp} < fixed {fixed}"
        assert fixed >= 0.99 * max(hasty, const), (
            f"eta={eta}: fixed {fixed} under 99% of best baseline "
            f"{max(hasty, const)}")

    # The spend-immediately baseline never touches the battery, so its rate
    # must be bit-identical across eta for each seed.
    by_seed = {}
    for r in rows:
        if r["policy"] == "hasty":
            by_seed.setdefault(r["seed"], set()).add(r["avg_rate_bps"])
    assert all(len(vals) == 1 for vals in by_seed.values())

    # With a dead battery the offline optimum degenerates to spending
    # immediately.
    for r in rows:
        if r["eta"] == 0.0 and r["policy"] == "offline":
            hasty_val = next(
                x["avg_rate_bps"] for x in rows
                if x["policy"] == "hasty" and x["eta"] == 0.0
                and x["seed"] == r["seed"])
            assert r["avg_rate_bps"] == pytest.approx(hasty_val, rel=1e-9)

    gaps = {eta: means[("offline", eta)] / means[("hasty", eta)]
            for eta in config.eta_list}
    _report(9, f"sweep in {elapsed:.0f} s; offline/hasty ratio spans "
               f"{min(gaps.values()):.4f} to {max(gaps.values()):.4f}")


# ---------------------------------------------------------------------------
# 10. Broadcast rate region


def test_criterion_10_broadcast_region(desk_region):
    config, rows, elapsed = desk_region
    assert elapsed < 900.0
    assert all(r["error"] is None for r in rows)

    corner1 = next(r for r in rows if r["point"] == "corner_user1")
    corner2 = next(r for r in rows if r["point"] == "corner_user2")
    assert corner1["r2_bps"] == 0.0
    assert corner2["r1_bps"] == 0.0
    c1 = corner1["r1_bps"]
    c2 = corner2["r2_bps"]
    assert c1 > 0.0 and c2 > 0.0

    offline_trace = [r for r in rows
                     if r["point"] == "trace" and r["policy"] == "offline"]
    fixed_trace = [r for r in rows
                   if r["point"] == "trace" and r["policy"] == "fixed"]
    assert len(offline_trace) == 25
    assert len(fixed_trace) == 25

    # Corners bound the trace.
    for r in offline_trace:
        assert r["r1_bps"] <= c1 * (1.0 + 1e-9)
        assert r["r2_bps"] <= c2 * (1.0 + 1e-9)

    # The traced boundary is concave: walk it in normalized coordinates
    # from the user-2 corner to the user-1 corner and require right turns.
    pts = sorted(
        [(r["r1_bps"] / c1, r["r2_bps"] / c2) for r in offline_trace])
    pts = [(0.0, 1.0)] + pts + [(1.0, 0.0)]
    for (x0, y0), (x1, y1), (x2, y2) in zip(pts[:-2], pts[1:-1], pts[2:]):
        cross = (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1)
        assert cross <= 1e-9

    # Per weight, the offline schedule dominates the fixed-threshold rule
    # in the weighted sum it was asked to maximize.
    fixed_by_weight = {r["weight_a"]: r for r in fixed_trace}
    for r in offline_trace:
        a = r["weight_a"]
        f = fixed_by_weight[a]
        lhs = a * r["r1_bps"] + r["r2_bps"]
        rhs = a * f["r1_bps"] + f["r2_bps"]
        assert lhs >= rhs - 1e-9 * max(1.0, abs(lhs))

    _report(10, f"region traced in {elapsed:.0f} s; corners "
                f"({c1:.4g}, {c2:.4g}) bps, 25 boundary points concave")
