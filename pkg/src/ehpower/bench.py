"""Seeded experiment harness: efficiency sweeps, broadcast rate regions,
and single-instance solution dumps, all driven by a JSON config.

Layout of the config (units carried in the field names, dB converted at
ingestion):

    {
      "channel": {"kind": "awgn", "bandwidth_hz": 1e6,
                  "n0_w_per_hz": 1e-19, "path_loss_db": -100.0},
      "storage": {"eta": 0.5, "e_max_mj": 100.0, "e_init_mj": 0.0},
      "harvest": {"source": "uniform", "lo_mw": 0.0, "hi_mw": 40.0},
      "horizon": {"t_seconds": 600.0, "delta_seconds": 0.01},
      "policies": ["offline", "dp", "fixed", "hasty", "constant"],
      "eta_list": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
      "seeds": 5,
      "master_seed": 20260815,
      "dp": {"energy_points": 151, "harvest_points": 31,
             "action_points": 151, "beta": 0.999, "tol_rel": 3e-5}
    }

The broadcast channel kind replaces path_loss_db with per-user fields
(path_loss_db_user1/2) and enables trace_region with "weight_a_list"
(default 25 log-spaced points in [1/16, 16]).

Determinism: every cell derives its RNG stream from (master_seed, stream
tag, seed index), and the harvest profile for seed index i is the same
across eta values and worker counts.
"""

from __future__ import annotations

import csv
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import HarvestProfile, StorageSpec, simulate_thresholds, validate_policy
from .offline import solve_finite, solve_infinite
from .online import (
    DiscreteHarvest,
    DpConfig,
    UniformHarvest,
    dp_policy,
    simulate_online,
    solve_fixed_thresholds,
    value_iterate,
)
from .rates import (
    AwgnLink,
    AwgnRate,
    BroadcastSpec,
    BroadcastWeightedRate,
    bc_weighted_sum_rate,
    db_to_linear,
)

SWEEP_COLUMNS = ["policy", "eta", "seed", "avg_rate_bps", "runtime_s", "error"]
REGION_COLUMNS = [
    "policy", "point", "weight_a", "seed", "r1_bps", "r2_bps", "runtime_s", "error",
]

_PROFILE_STREAM = 101  # harvest realizations; independent of eta and policy


class ConfigError(ValueError):
    """A problem in the experiment config; message carries the field path."""


def _require(section: dict, key: str, path: str):
    if key not in section:
        raise ConfigError(f"{path}.{key}: missing required field")
    return section[key]


def _number(section: dict, key: str, path: str, default=None):
    if key not in section:
        if default is None:
            raise ConfigError(f"{path}.{key}: missing required field")
        return default
    value = section[key]
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise ConfigError(f"{path}.{key}: expected a number, got {value!r}")
    return float(value)


@dataclass
class ExperimentConfig:
    """Parsed experiment description; see the module docstring for units."""

    channel: dict
    storage: StorageSpec
    harvest: dict
    delta: float  # s
    n_slots: int
    policies: list
    eta_list: list
    weight_a_list: list
    n_seeds: int
    master_seed: int
    dp_options: dict = field(default_factory=dict)

    # -- channel objects ------------------------------------------------------

    def awgn_link(self) -> AwgnLink:
        ch = self.channel
        return AwgnLink(
            bandwidth=ch["bandwidth_hz"],
            noise_density=ch["n0_w_per_hz"],
            gain=db_to_linear(ch["path_loss_db"]),
        )

    def broadcast_spec(self, weight: float) -> BroadcastSpec:
        ch = self.channel
        floor = ch["n0_w_per_hz"] * ch["bandwidth_hz"]
        return BroadcastSpec(
            sigma1_sq=floor / db_to_linear(ch["path_loss_db_user1"]),
            sigma2_sq=floor / db_to_linear(ch["path_loss_db_user2"]),
            weight=weight,
            scale=ch["bandwidth_hz"],
        )

    def rate(self, weight: Optional[float] = None):
        if self.channel["kind"] == "awgn":
            return AwgnRate(self.awgn_link())
        return BroadcastWeightedRate(
            self.broadcast_spec(1.0 if weight is None else weight)
        )

    # -- harvest --------------------------------------------------------------

    def profile(self, seed_index: int) -> HarvestProfile:
        return generate_harvest(
            self.harvest,
            self.n_slots,
            self.delta,
            [self.master_seed, _PROFILE_STREAM, seed_index],
        )

    def distribution(self):
        src = self.harvest
        if src["source"] == "uniform":
            return UniformHarvest(src["lo_w"], src["hi_w"])
        if src["source"] == "solar":
            return DiscreteHarvest.from_samples(
                _solar_curve(src["peak_w"], self.n_slots)
            )
        return DiscreteHarvest.from_samples(self.profile(0).h)

    # -- DP -------------------------------------------------------------------

    def dp_config(self, rate, dist) -> DpConfig:
        opts = dict(self.dp_options)
        tol_rel = opts.pop("tol_rel", None)
        if tol_rel is not None:
            beta = opts.get("beta", 0.999)
            scale = float(rate.rate(dist.mean())) * self.delta / (1.0 - beta)
            opts["tol"] = max(tol_rel * scale, 1e-15 * max(scale, 1.0))
        return DpConfig(delta=self.delta, **opts)


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a config dict and convert units; raises ConfigError."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")

    ch_raw = _require(raw, "channel", "config")
    kind = _require(ch_raw, "kind", "channel")
    channel = {"kind": kind}
    if kind == "awgn":
        channel["bandwidth_hz"] = _number(ch_raw, "bandwidth_hz", "channel")
        channel["n0_w_per_hz"] = _number(ch_raw, "n0_w_per_hz", "channel")
        channel["path_loss_db"] = _number(ch_raw, "path_loss_db", "channel")
    elif kind == "broadcast":
        channel["bandwidth_hz"] = _number(ch_raw, "bandwidth_hz", "channel")
        channel["n0_w_per_hz"] = _number(ch_raw, "n0_w_per_hz", "channel")
        channel["path_loss_db_user1"] = _number(ch_raw, "path_loss_db_user1", "channel")
        channel["path_loss_db_user2"] = _number(ch_raw, "path_loss_db_user2", "channel")
    else:
        raise ConfigError(f"channel.kind: unknown kind {kind!r}")

    st_raw = _require(raw, "storage", "config")
    eta = _number(st_raw, "eta", "storage")
    if not 0.0 <= eta <= 1.0:
        raise ConfigError(f"storage.eta: must lie in [0, 1], got {eta}")
    e_max_mj = _number(st_raw, "e_max_mj", "storage", default=math.inf)
    e_init_mj = _number(st_raw, "e_init_mj", "storage", default=0.0)
    storage = StorageSpec(eta=eta, e_max=e_max_mj * 1e-3, e_init=e_init_mj * 1e-3)

    hz_raw = _require(raw, "horizon", "config")
    t_total = _number(hz_raw, "t_seconds", "horizon")
    delta = _number(hz_raw, "delta_seconds", "horizon")
    if delta <= 0.0 or t_total < delta:
        raise ConfigError("horizon: need delta_seconds > 0 and t_seconds >= delta_seconds")
    n_slots = int(round(t_total / delta))

    hv_raw = _require(raw, "harvest", "config")
    source = _require(hv_raw, "source", "harvest")
    harvest = {"source": source}
    if source == "uniform":
        harvest["lo_w"] = _number(hv_raw, "lo_mw", "harvest") * 1e-3
        harvest["hi_w"] = _number(hv_raw, "hi_mw", "harvest") * 1e-3
        if not 0.0 <= harvest["lo_w"] <= harvest["hi_w"]:
            raise ConfigError("harvest: need 0 <= lo_mw <= hi_mw")
    elif source == "solar":
        harvest["peak_w"] = _number(hv_raw, "peak_mw", "harvest") * 1e-3
    elif source == "file":
        harvest["path"] = _require(hv_raw, "path", "harvest")
        harvest["format"] = hv_raw.get("format", "csv")
        if harvest["format"] not in ("csv", "json"):
            raise ConfigError(f"harvest.format: unknown format {harvest['format']!r}")
    else:
        raise ConfigError(f"harvest.source: unknown source {source!r}")

    policies = raw.get("policies", ["offline", "dp", "fixed", "hasty", "constant"])
    known = {"offline", "dp", "fixed", "hasty", "constant"}
    for name in policies:
        if name not in known:
            raise ConfigError(f"policies: unknown policy {name!r}")
    if not policies:
        raise ConfigError("policies: list must be nonempty")

    eta_list = raw.get("eta_list", [eta])
    if not eta_list:
        raise ConfigError("eta_list: list must be nonempty")
    for value in eta_list:
        if not 0.0 <= float(value) <= 1.0:
            raise ConfigError(f"eta_list: values must lie in [0, 1], got {value}")

    weight_a_list = raw.get(
        "weight_a_list", [float(a) for a in np.geomspace(1.0 / 16.0, 16.0, 25)]
    )
    if not weight_a_list:
        raise ConfigError("weight_a_list: list must be nonempty")

    n_seeds = int(raw.get("seeds", 1))
    if n_seeds < 1:
        raise ConfigError("seeds: need at least one seed")
    master_seed = int(raw.get("master_seed", 0))

    dp_options = dict(raw.get("dp", {}))
    allowed_dp = {
        "energy_points", "harvest_points", "action_points", "beta",
        "tol_rel", "eval_sweeps", "max_iter", "action_span",
    }
    for key in dp_options:
        if key not in allowed_dp:
            raise ConfigError(f"dp.{key}: unknown option")

    return ExperimentConfig(
        channel=channel,
        storage=storage,
        harvest=harvest,
        delta=delta,
        n_slots=n_slots,
        policies=list(policies),
        eta_list=[float(v) for v in eta_list],
        weight_a_list=[float(v) for v in weight_a_list],
        n_seeds=n_seeds,
        master_seed=master_seed,
        dp_options=dp_options,
    )


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    return parse_config(raw)


# ---------------------------------------------------------------------------
# Harvest generation
# ---------------------------------------------------------------------------


def _solar_curve(peak: float, n: int) -> np.ndarray:
    """Deterministic day curve: a main noon lobe plus an afternoon shoulder,
    both clipped sinusoids, scaled to the requested peak. Illustrative
    shape only; nothing downstream depends on its details."""
    x = (np.arange(n) + 0.5) / n
    main = np.maximum(0.0, np.sin(np.pi * (x - 0.08) / 0.84))
    shoulder = np.maximum(0.0, np.sin(np.pi * (x - 0.55) / 0.35))
    return peak * np.clip(main**2 + 0.3 * shoulder**2, 0.0, 1.0)


def generate_harvest(source: dict, n_slots: int, delta: float, seed) -> HarvestProfile:
    """Seeded harvest realization for one experiment cell.

    source is the parsed harvest section: uniform draws i.i.d. levels,
    solar evaluates a fixed day curve (deterministic regardless of seed),
    file loads a stored profile as-is.
    """
    tag = source.get("source")
    if tag == "uniform":
        rng = np.random.default_rng(seed)
        return HarvestProfile(delta, rng.uniform(source["lo_w"], source["hi_w"], n_slots))
    if tag == "solar":
        return HarvestProfile(delta, _solar_curve(source["peak_w"], n_slots))
    if tag == "file":
        try:
            if source.get("format", "csv") == "json":
                return HarvestProfile.from_json(source["path"])
            return HarvestProfile.from_csv(source["path"], delta)
        except FileNotFoundError:
            raise ConfigError(f"harvest.path: file not found: {source['path']}") from None
        except ValueError as exc:
            raise ConfigError(f"harvest.path: {exc}") from None
    raise ConfigError(f"harvest.source: unknown source {tag!r}")


# ---------------------------------------------------------------------------
# Policy execution
# ---------------------------------------------------------------------------


def _run_offline(profile, storage, rate):
    solver = solve_finite if storage.bounded else solve_infinite
    _, realized, utility = solver(profile, storage, rate)
    return realized, utility


def _run_named(name, profile, storage, rate, dist, dp_solution):
    """Execute one policy on one realized profile; returns (policy, utility)."""
    if name == "offline":
        return _run_offline(profile, storage, rate)
    if name == "dp":
        if dp_solution is None:
            raise RuntimeError("dp policy requested but no trained solution")
        return simulate_online(profile, storage, dp_policy(dp_solution), rate)
    if name == "fixed":
        ft = solve_fixed_thresholds(dist, rate, storage.eta)
        realized, _ = simulate_thresholds(
            profile, storage, ft.p_u, ft.p_s, stop_at_event=False
        )
        return realized, realized.average_utility(rate)
    if name == "hasty":
        realized, _ = simulate_thresholds(
            profile, storage, 0.0, math.inf, stop_at_event=False
        )
        return realized, realized.average_utility(rate)
    if name == "constant":
        level = dist.mean()
        realized, _ = simulate_thresholds(
            profile, storage, level, level, stop_at_event=False
        )
        return realized, realized.average_utility(rate)
    raise ConfigError(f"policies: unknown policy {name!r}")


def _checked_cell(name, profile, storage, rate, dist, dp_solution):
    """One result cell: utility, wall time, and an error string (empty when
    the run succeeded and the realized policy validates)."""
    start = time.perf_counter()
    try:
        realized, utility = _run_named(name, profile, storage, rate, dist, dp_solution)
        violation = validate_policy(realized, profile, storage)
        if violation is not None:
            return None, time.perf_counter() - start, f"invalid policy: {violation}", None
        return utility, time.perf_counter() - start, "", realized
    except Exception as exc:  # keep the sweep alive; the row records the failure
        return None, time.perf_counter() - start, f"{type(exc).__name__}: {exc}", None


# ---------------------------------------------------------------------------
# Efficiency sweep
# ---------------------------------------------------------------------------


def _sweep_group(raw_config: dict, eta_index: int) -> list:
    """All rows for one eta value (worker unit: the DP trains once here)."""
    cfg = parse_config(raw_config)
    eta = cfg.eta_list[eta_index]
    storage = StorageSpec(eta=eta, e_max=cfg.storage.e_max, e_init=cfg.storage.e_init)
    rate = cfg.rate()
    dist = cfg.distribution()

    dp_solution = None
    dp_error = ""
    if "dp" in cfg.policies:
        try:
            dp_solution = value_iterate(storage, dist, rate, cfg.dp_config(rate, dist))
        except Exception as exc:
            dp_error = f"{type(exc).__name__}: {exc}"

    rows = []
    for seed_index in range(cfg.n_seeds):
        profile = cfg.profile(seed_index)
        for name in cfg.policies:
            if name == "dp" and dp_solution is None:
                rows.append({
                    "policy": name, "eta": eta, "seed": seed_index,
                    "avg_rate_bps": None, "runtime_s": 0.0, "error": dp_error,
                })
                continue
            utility, runtime, err, _ = _checked_cell(
                name, profile, storage, rate, dist, dp_solution
            )
            rows.append({
                "policy": name, "eta": eta, "seed": seed_index,
                "avg_rate_bps": utility, "runtime_s": runtime, "error": err,
            })
    return rows


def sweep_eta(config: ExperimentConfig, jobs: int = 1) -> list:
    """Fig.-5-style study: every policy at every (eta, seed) cell.

    Row order and contents are independent of the worker count; only the
    runtime column varies between runs.
    """
    raw = _config_roundtrip(config)
    indices = range(len(config.eta_list))
    if jobs <= 1:
        groups = [_sweep_group(raw, i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            groups = list(pool.map(_sweep_group, [raw] * len(config.eta_list), indices))
    return [row for group in groups for row in group]


# ---------------------------------------------------------------------------
# Broadcast rate region
# ---------------------------------------------------------------------------


def _split_rates(realized, spec: BroadcastSpec):
    """Average per-user rates of a realized schedule under the weighted
    broadcast split that the rate function itself maximizes."""
    _, _, r1, r2 = bc_weighted_sum_rate(realized.p, spec)
    return float(np.mean(r1)), float(np.mean(r2))


def _corner_rate(cfg: ExperimentConfig, storage, profile, user: int):
    """Single-user corner of the region: all power to one user, which is a
    plain point-to-point link at that user's noise level."""
    ch = cfg.channel
    loss_key = "path_loss_db_user1" if user == 1 else "path_loss_db_user2"
    link = AwgnLink(
        bandwidth=ch["bandwidth_hz"],
        noise_density=ch["n0_w_per_hz"],
        gain=db_to_linear(ch[loss_key]),
    )
    _, utility = _run_offline(profile, storage, AwgnRate(link))
    return utility


def _region_group(raw_config: dict, seed_index: int) -> list:
    cfg = parse_config(raw_config)
    if cfg.channel["kind"] != "broadcast":
        raise ConfigError("channel.kind: trace_region needs a broadcast channel")
    storage = cfg.storage
    dist = cfg.distribution()
    profile = cfg.profile(seed_index)
    rows = []

    for user in (1, 2):
        start = time.perf_counter()
        try:
            top = _corner_rate(cfg, storage, profile, user)
            r1, r2 = (top, 0.0) if user == 1 else (0.0, top)
            rows.append({
                "policy": "offline", "point": f"corner_user{user}", "weight_a": None,
                "seed": seed_index, "r1_bps": r1, "r2_bps": r2,
                "runtime_s": time.perf_counter() - start, "error": "",
            })
        except Exception as exc:
            rows.append({
                "policy": "offline", "point": f"corner_user{user}", "weight_a": None,
                "seed": seed_index, "r1_bps": None, "r2_bps": None,
                "runtime_s": time.perf_counter() - start,
                "error": f"{type(exc).__name__}: {exc}",
            })

    for weight in cfg.weight_a_list:
        spec = cfg.broadcast_spec(weight)
        rate = BroadcastWeightedRate(spec)
        dp_solution = None
        if "dp" in cfg.policies:
            try:
                dp_solution = value_iterate(storage, dist, rate, cfg.dp_config(rate, dist))
            except Exception:
                dp_solution = None
        for name in cfg.policies:
            utility, runtime, err, realized = _checked_cell(
                name, profile, storage, rate, dist, dp_solution
            )
            if realized is not None:
                r1, r2 = _split_rates(realized, spec)
            else:
                r1 = r2 = None
            rows.append({
                "policy": name, "point": "trace", "weight_a": weight,
                "seed": seed_index, "r1_bps": r1, "r2_bps": r2,
                "runtime_s": runtime, "error": err,
            })
    return rows


def trace_region(config: ExperimentConfig, jobs: int = 1) -> list:
    """Fig.-6-style study: weighted-sum boundary plus single-user corners."""
    raw = _config_roundtrip(config)
    indices = range(config.n_seeds)
    if jobs <= 1:
        groups = [_region_group(raw, i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            groups = list(pool.map(_region_group, [raw] * config.n_seeds, indices))
    return [row for group in groups for row in group]


# ---------------------------------------------------------------------------
# Single solve and validation
# ---------------------------------------------------------------------------


def solve_one(config: ExperimentConfig, seed_index: int = 0) -> dict:
    """Solve one realized instance and dump everything needed to plot it."""
    profile = config.profile(seed_index)
    storage = config.storage
    rate = config.rate()
    solver = solve_finite if storage.bounded else solve_infinite
    schedule, realized, utility = solver(profile, storage, rate)
    return {
        "eta": storage.eta,
        "e_max_j": storage.e_max if storage.bounded else None,
        "e_init_j": storage.e_init,
        "delta_s": profile.delta,
        "n_slots": profile.n_slots,
        "utility_bps": utility,
        "segments": schedule.to_json_obj()["segments"],
        "policy": {
            "p_w": realized.p.tolist(),
            "s_w": realized.s.tolist(),
            "u_w": realized.u.tolist(),
            "e_j": realized.e.tolist(),
        },
    }


# ---------------------------------------------------------------------------
# Output plumbing
# ---------------------------------------------------------------------------


def _config_roundtrip(config: ExperimentConfig) -> dict:
    """Re-encode a parsed config into the raw dict shape workers re-parse.
    Keeping workers on the raw form makes process pools trivially safe."""
    ch = dict(config.channel)
    storage = {
        "eta": config.storage.eta,
        "e_init_mj": config.storage.e_init * 1e3,
    }
    if config.storage.bounded:
        storage["e_max_mj"] = config.storage.e_max * 1e3
    harvest = {"source": config.harvest["source"]}
    if harvest["source"] == "uniform":
        harvest["lo_mw"] = config.harvest["lo_w"] * 1e3
        harvest["hi_mw"] = config.harvest["hi_w"] * 1e3
    elif harvest["source"] == "solar":
        harvest["peak_mw"] = config.harvest["peak_w"] * 1e3
    else:
        harvest["path"] = config.harvest["path"]
        harvest["format"] = config.harvest["format"]
    return {
        "channel": ch,
        "storage": storage,
        "harvest": harvest,
        "horizon": {
            "t_seconds": config.n_slots * config.delta,
            "delta_seconds": config.delta,
        },
        "policies": config.policies,
        "eta_list": config.eta_list,
        "weight_a_list": config.weight_a_list,
        "seeds": config.n_seeds,
        "master_seed": config.master_seed,
        "dp": config.dp_options,
    }


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".12g")
    return str(value)


def write_rows(rows: list, columns: list, fh) -> None:
    """CSV with the documented fixed column order."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format_cell(row.get(col)) for col in columns])


def rows_to_json(rows: list) -> str:
    return json.dumps(rows, indent=2)
