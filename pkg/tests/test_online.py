"""Causal-side machinery: harvest distributions, the balanced fixed
thresholds, the discounted DP, and the slot-by-slot executor."""

import math

import numpy as np
import pytest

from ehpower import (
    DiscreteHarvest,
    DpConfig,
    DpSolution,
    HarvestProfile,
    StorageSpec,
    UniformHarvest,
    companion_threshold,
    dp_action,
    dp_policy,
    normalized_log_rate,
    simulate_online,
    simulate_thresholds,
    solve_fixed_thresholds,
    threshold_policy,
    value_iterate,
)
from ehpower.online import _dp_tensors

RATE = normalized_log_rate()


# -- harvest distributions ----------------------------------------------------


def test_uniform_harvest_stats():
    d = UniformHarvest(0.0, 2.0)
    assert d.mean() == 1.0
    assert d.median() == 1.0
    assert d.support_top() == 2.0
    assert d.cdf(0.5) == 0.25
    assert d.tail_prob(1.5) == 0.25
    # E[(h-x)+] = (2-x)^2/4 and E[(x-h)+] = x^2/4 on [0, 2].
    assert d.partial_mean_above(0.5) == pytest.approx(2.25 / 4)
    assert d.partial_mean_below(0.5) == pytest.approx(0.25 / 4)
    np.testing.assert_allclose(d.quantile_levels(4), [0.25, 0.75, 1.25, 1.75])


def test_uniform_harvest_point_mass():
    d = UniformHarvest(1.0, 1.0)
    assert d.cdf(1.0) == 1.0
    assert d.below_prob(1.0) == 0.0
    assert d.partial_mean_above(1.0) == 0.0
    np.testing.assert_allclose(d.quantile_levels(3), [1.0, 1.0, 1.0])
    with pytest.raises(ValueError):
        UniformHarvest(2.0, 1.0)


def test_discrete_harvest_stats():
    d = DiscreteHarvest(np.array([2.0, 0.0, 1.0]), np.array([0.25, 0.25, 0.5]))
    np.testing.assert_allclose(d.values, [0.0, 1.0, 2.0])  # sorted on entry
    assert d.mean() == pytest.approx(1.0)
    assert d.median() == 1.0
    # cdf is inclusive at an atom, below_prob is strict.
    assert d.cdf(1.0) == pytest.approx(0.75)
    assert d.below_prob(1.0) == pytest.approx(0.25)
    assert d.partial_mean_above(0.5) == pytest.approx(0.5 * 0.5 + 1.5 * 0.25)
    np.testing.assert_allclose(d.quantile_levels(4), [0.0, 1.0, 1.0, 2.0])


def test_discrete_harvest_from_samples_and_validation():
    d = DiscreteHarvest.from_samples([1.0, 1.0, 3.0, 1.0])
    np.testing.assert_allclose(d.values, [1.0, 3.0])
    np.testing.assert_allclose(d.probs, [0.75, 0.25])
    with pytest.raises(ValueError):
        DiscreteHarvest(np.array([1.0, 2.0]), np.array([0.5]))
    with pytest.raises(ValueError):
        DiscreteHarvest(np.array([1.0, 2.0]), np.array([0.9, 0.2]))


# -- balanced fixed thresholds ------------------------------------------------


def test_fixed_thresholds_uniform_probability_balance():
    # Uniform [0, 2]: P(h > p_s) = P(h < p_u) with p_s = 2 p_u + 1 gives
    # (2 - p_s)/2 = p_u/2, so p_u = 1/3 and p_s = 5/3.
    fixed = solve_fixed_thresholds(UniformHarvest(0.0, 2.0), RATE, 0.5)
    assert fixed.p_u == pytest.approx(1.0 / 3.0, abs=1e-9)
    assert fixed.p_s == pytest.approx(5.0 / 3.0, abs=1e-9)


def test_fixed_thresholds_eta_extremes():
    d = UniformHarvest(0.0, 2.0)
    lossless = solve_fixed_thresholds(d, RATE, 1.0)
    assert lossless.p_u == lossless.p_s == pytest.approx(d.median())
    dead = solve_fixed_thresholds(d, RATE, 0.0)
    assert dead.p_u == 0.0 and math.isinf(dead.p_s)
    with pytest.raises(ValueError):
        solve_fixed_thresholds(d, RATE, 1.5)


def test_fixed_thresholds_energy_balance_variant():
    # eta*E[(h-p_s)+] = E[(p_u-h)+] on uniform [0, 2] with eta = 0.5:
    # 0.5 (1 - 2p)^2 = p^2, positive root p = 1 - sqrt(2)/2.
    fixed = solve_fixed_thresholds(
        UniformHarvest(0.0, 2.0), RATE, 0.5, balance="energy"
    )
    assert fixed.p_u == pytest.approx(1.0 - math.sqrt(2.0) / 2.0, abs=1e-9)
    with pytest.raises(ValueError):
        solve_fixed_thresholds(UniformHarvest(0.0, 2.0), RATE, 0.5, balance="median")


def test_fixed_thresholds_degenerate_support():
    # A point mass inside the passive band balances trivially at p_u = 0.
    fixed = solve_fixed_thresholds(UniformHarvest(1.0, 1.0), RATE, 0.5)
    assert fixed.p_u == 0.0
    assert fixed.p_s == pytest.approx(companion_threshold(0.0, 0.5, RATE))


def test_fixed_thresholds_discrete_median():
    d = DiscreteHarvest(np.array([0.0, 1.0, 2.0]), np.array([0.25, 0.5, 0.25]))
    fixed = solve_fixed_thresholds(d, RATE, 1.0)
    assert fixed.p_u == fixed.p_s == 1.0


# -- discounted DP ------------------------------------------------------------


def exact_policy_iteration(storage, dist, rate, cfg):
    """Exact fixed point of the same interpolated finite MDP the solver
    uses, via policy iteration with direct linear solves."""
    e_grid, h_grid, actions, r_delta, idx, frac = _dp_tensors(storage, dist, rate, cfg)
    n_e, n_h, _ = actions.shape
    n_s = n_e * n_h
    rows = np.arange(n_s)
    v = np.zeros((n_e, n_h))
    prev = None
    for _ in range(100):
        v_bar = v.mean(axis=1)
        cand = r_delta + cfg.beta * (v_bar[idx] * (1.0 - frac) + v_bar[idx + 1] * frac)
        best = np.argmax(cand, axis=2)
        if prev is not None and np.array_equal(best, prev):
            return v
        prev = best
        r_pi = np.take_along_axis(r_delta, best[..., None], axis=2)[..., 0].ravel()
        i_pi = np.take_along_axis(idx, best[..., None], axis=2)[..., 0].ravel()
        f_pi = np.take_along_axis(frac, best[..., None], axis=2)[..., 0].ravel()
        p_mat = np.zeros((n_s, n_s))
        for j2 in range(n_h):
            np.add.at(p_mat, (rows, i_pi * n_h + j2), (1.0 - f_pi) / n_h)
            np.add.at(p_mat, (rows, (i_pi + 1) * n_h + j2), f_pi / n_h)
        v = np.linalg.solve(np.eye(n_s) - cfg.beta * p_mat, r_pi).reshape(n_e, n_h)
    raise AssertionError("policy iteration did not stabilize")


@pytest.mark.parametrize("eval_sweeps", [0, 50])
def test_value_iteration_matches_exact_fixed_point(eval_sweeps):
    storage = StorageSpec(eta=0.7, e_max=0.6, e_init=0.0)
    dist = UniformHarvest(0.0, 2.0)
    cfg = DpConfig(
        delta=1.0,
        energy_points=5,
        harvest_points=3,
        action_points=9,
        beta=0.9,
        tol=1e-11,
        max_iter=5000,
        eval_sweeps=eval_sweeps,
    )
    sol = value_iterate(storage, dist, RATE, cfg)
    v_exact = exact_policy_iteration(storage, dist, RATE, cfg)
    np.testing.assert_allclose(sol.v, v_exact, atol=1e-8)
    assert sol.residuals[-1] <= 1e-11


def test_plain_value_iteration_contracts():
    storage = StorageSpec(eta=0.5, e_max=0.5, e_init=0.0)
    cfg = DpConfig(
        delta=1.0,
        energy_points=4,
        harvest_points=3,
        action_points=7,
        beta=0.8,
        tol=1e-10,
        eval_sweeps=0,
    )
    sol = value_iterate(storage, UniformHarvest(0.0, 2.0), RATE, cfg)
    res = sol.residuals
    assert np.all(res[1:] <= cfg.beta * res[:-1] + 1e-14)


def test_value_iteration_guards():
    cfg = DpConfig(delta=1.0, energy_points=4, harvest_points=3, action_points=7)
    with pytest.raises(ValueError):
        value_iterate(StorageSpec(eta=0.5), UniformHarvest(0.0, 2.0), RATE, cfg)
    tiny = DpConfig(
        delta=1.0,
        energy_points=4,
        harvest_points=3,
        action_points=7,
        tol=1e-300,
        max_iter=2,
        eval_sweeps=0,
    )
    with pytest.raises(RuntimeError, match="did not reach tolerance"):
        value_iterate(StorageSpec(eta=0.5, e_max=0.5), UniformHarvest(0.0, 2.0), RATE, tiny)
    with pytest.raises(ValueError):
        DpConfig(delta=1.0, beta=1.0)
    with pytest.raises(ValueError):
        DpConfig(delta=0.0)
    with pytest.raises(ValueError):
        DpConfig(delta=1.0, energy_points=1)


def test_dp_solution_roundtrip(tmp_path):
    storage = StorageSpec(eta=0.7, e_max=0.6, e_init=0.0)
    cfg = DpConfig(
        delta=1.0, energy_points=5, harvest_points=3, action_points=9,
        beta=0.9, tol=1e-8,
    )
    sol = value_iterate(storage, UniformHarvest(0.0, 2.0), RATE, cfg)
    path = tmp_path / "dp.npz"
    sol.save(path)
    back = DpSolution.load(path)
    np.testing.assert_array_equal(back.v, sol.v)
    np.testing.assert_array_equal(back.phi, sol.phi)
    np.testing.assert_array_equal(back.e_grid, sol.e_grid)
    assert back.config == sol.config


def _manual_solution(phi_col0, phi_col1):
    cfg = DpConfig(
        delta=1.0, energy_points=2, harvest_points=2, action_points=21,
        beta=0.9, action_span=2.0,
    )
    return DpSolution(
        e_grid=np.array([0.0, 1.0]),
        h_grid=np.array([0.5, 1.5]),
        v=np.zeros((2, 2)),
        phi=np.column_stack([phi_col0, phi_col1]),
        config=cfg,
        residuals=np.array([0.0]),
    )


def test_dp_action_snaps_to_passive_band():
    # Table rows whose action equals the row's own harvest level stand for
    # the transmit-the-harvest band; the actual h comes back, not the
    # discretized level.
    sol = _manual_solution([0.5, 0.5], [1.5, 1.5])
    assert dp_action(sol, 0.4, 0.77) == 0.77
    assert dp_action(sol, 0.0, 1.4) == 1.4
    assert dp_policy(sol)(0.4, 0.77) == 0.77


def test_dp_action_clamps_to_feasible_power():
    sol = _manual_solution([5.0, 5.0], [5.0, 5.0])
    # Draw capped by the battery: at most h + E/delta can be transmitted.
    assert dp_action(sol, 0.2, 0.3) == pytest.approx(0.5)
    sol2 = _manual_solution([0.9, 0.9], [1.5, 1.5])
    assert dp_action(sol2, 1.0, 0.77) == pytest.approx(0.9)


# -- causal execution ---------------------------------------------------------


def test_threshold_policy_matches_clamped_simulation():
    rng = np.random.default_rng(77)
    for eta, e_max, e0 in [(0.6, 0.8, 0.3), (1.0, 0.5, 0.0), (0.0, 1.0, 0.7)]:
        profile = HarvestProfile(0.5, rng.uniform(0.0, 2.0, 60))
        storage = StorageSpec(eta=eta, e_max=e_max, e_init=e0)
        p_u = 0.4
        p_s = companion_threshold(p_u, eta, RATE)
        ref, _ = simulate_thresholds(
            profile, storage, p_u, p_s, stop_at_event=False
        )
        out, util = simulate_online(
            profile, storage, threshold_policy(p_u, p_s), RATE
        )
        np.testing.assert_allclose(out.p, ref.p, atol=1e-12)
        np.testing.assert_allclose(out.s, ref.s, atol=1e-12)
        np.testing.assert_allclose(out.u, ref.u, atol=1e-12)
        np.testing.assert_allclose(out.e, ref.e, atol=1e-12)
        assert util == pytest.approx(ref.average_utility(RATE), rel=1e-12)


def test_simulate_online_rejects_bad_policies():
    profile = HarvestProfile(1.0, [1.0, 1.0])
    storage = StorageSpec(eta=0.5, e_max=1.0)
    with pytest.raises(ValueError, match="invalid power"):
        simulate_online(profile, storage, lambda e, h: -1.0, RATE)

    def broken(e, h):
        raise KeyError("boom")

    with pytest.raises(RuntimeError, match="raised at slot 0"):
        simulate_online(profile, storage, broken, RATE)
