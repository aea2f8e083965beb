"""Transmit power scheduling for energy-harvesting transmitters whose
battery stores energy lossily: only a fraction eta of every stored joule
comes back out.

The package covers the offline problem (full harvest trace known ahead of
time, solved by threshold schedules), online operation (dynamic
programming over battery and harvest state, plus fixed-threshold rules),
baseline policies, a convex-program oracle for certifying small cases,
and a benchmark harness with a command line front end.
"""

from .core import (
    BatteryEvent,
    EventKind,
    HarvestProfile,
    RealizedPolicy,
    StorageSpec,
    Violation,
    ViolationKind,
    concat_policies,
    energy_tolerance,
    simulate_policy,
    simulate_thresholds,
    validate_policy,
)
from .rates import (
    AwgnLink,
    AwgnRate,
    BroadcastSpec,
    BroadcastWeightedRate,
    RateFunction,
    bc_rate_derivative,
    bc_weighted_sum_rate,
    companion_threshold,
    normalized_log_rate,
)
from .offline import (
    ScheduleSegment,
    ThresholdSchedule,
    find_candidates,
    find_smallest_depleting_threshold,
    realize_schedule,
    solve_finite,
    solve_infinite,
)
from .online import (
    DiscreteHarvest,
    DpConfig,
    DpSolution,
    FixedThresholds,
    HarvestDistribution,
    UniformHarvest,
    dp_action,
    dp_policy,
    simulate_online,
    solve_fixed_thresholds,
    threshold_policy,
    value_iterate,
)
from .baselines import constant_policy, hasty_policy
from .oracle import OracleResult, solve_convex_oracle
from .bench import (
    ConfigError,
    ExperimentConfig,
    generate_harvest,
    load_config,
    parse_config,
    solve_one,
    sweep_eta,
    trace_region,
)

__version__ = "0.1.0"

__all__ = [
    "AwgnLink",
    "AwgnRate",
    "BatteryEvent",
    "BroadcastSpec",
    "BroadcastWeightedRate",
    "ConfigError",
    "DiscreteHarvest",
    "DpConfig",
    "DpSolution",
    "EventKind",
    "ExperimentConfig",
    "FixedThresholds",
    "HarvestDistribution",
    "HarvestProfile",
    "OracleResult",
    "RateFunction",
    "RealizedPolicy",
    "ScheduleSegment",
    "StorageSpec",
    "ThresholdSchedule",
    "UniformHarvest",
    "Violation",
    "ViolationKind",
    "bc_rate_derivative",
    "bc_weighted_sum_rate",
    "companion_threshold",
    "concat_policies",
    "constant_policy",
    "dp_action",
    "dp_policy",
    "energy_tolerance",
    "find_candidates",
    "find_smallest_depleting_threshold",
    "generate_harvest",
    "hasty_policy",
    "load_config",
    "normalized_log_rate",
    "parse_config",
    "realize_schedule",
    "simulate_online",
    "simulate_policy",
    "simulate_thresholds",
    "solve_convex_oracle",
    "solve_finite",
    "solve_fixed_thresholds",
    "solve_infinite",
    "solve_one",
    "sweep_eta",
    "threshold_policy",
    "trace_region",
    "validate_policy",
    "value_iterate",
]
