"""Naive causal baselines: transmit-as-harvested and constant-target."""

from __future__ import annotations

from typing import Callable, Union

from .core import HarvestProfile
from .online import HarvestDistribution


def hasty_policy() -> Callable[[float, float], float]:
    """Spend the harvest immediately: p = h every slot, battery untouched.

    Its utility is independent of the storage efficiency and capacity,
    which makes it the natural floor (and the optimum when eta = 0).
    """
    return lambda energy, h: h


def constant_policy(
    source: Union[HarvestDistribution, HarvestProfile, float],
) -> Callable[[float, float], float]:
    """Target a constant transmit power equal to the average harvest.

    The target is taken from a distribution mean, a profile mean, or a
    number. Feasibility (empty or full battery) is left to the simulator
    clamps, so realized power can deviate from the target.
    """
    if isinstance(source, HarvestDistribution):
        level = float(source.mean())
    elif isinstance(source, HarvestProfile):
        level = float(source.h.mean()) if source.n_slots else 0.0
    else:
        level = float(source)
    if level < 0.0:
        raise ValueError(f"constant target must be non-negative, got {level}")
    return lambda energy, h: level
