"""Three-stage estimation protocol over all users."""

import time
from dataclasses import dataclass, field

import numpy as np

from ..bdris import TrainingSchedule
from ..channel import SystemConfig
from ..config import logger
from .stage1 import AoaEstimate, estimate_common_aoa
from .stage2 import TypicalUserEstimate, estimate_typical_user
from .stage3 import (
    CommonPart,
    OtherUserEstimate,
    build_common_part,
    estimate_other_user,
)


@dataclass
class EstimateBundle:
    """Outputs of every stage plus per-stage wall-clock seconds."""

    typical_user: int
    aoa: AoaEstimate
    typical: TypicalUserEstimate
    common: CommonPart
    others: dict[int, OtherUserEstimate]
    stage_seconds: dict[str, float] = field(default_factory=dict)

    @property
    def cascaded(self) -> dict[int, np.ndarray]:
        """``Ĝ_k`` keyed by user index."""
        estimates = {self.typical_user: self.typical.cascaded}
        estimates.update({k: est.cascaded for k, est in self.others.items()})
        return estimates

    @property
    def warnings(self) -> list[str]:
        messages = list(self.typical.warnings)
        for est in self.others.values():
            messages.extend(est.warnings)
        return messages


def run_protocol(
    measurements: dict[int, np.ndarray],
    schedules: dict[int, TrainingSchedule],
    config: SystemConfig,
    typical_user: int,
    noise_variance: float | None = None,
    aoa: AoaEstimate | None = None,
) -> EstimateBundle:
    """Estimate every user's cascaded channel.

    Stage I runs on the typical user's measurement, Stage II recovers that
    user's full channel and Stage III reuses the common part for the rest.
    A precomputed ``aoa`` skips Stage I.

    Args:
        measurements: ``Y_k`` keyed by user index
        schedules: training schedule of each user
        config: scenario supplying dimensions, sparsities and options
        typical_user: index of the user estimated first
        noise_variance: overrides the configured value for residual stopping
        aoa: Stage I result to reuse

    Returns:
        EstimateBundle with the estimates of all users
    """
    seconds = {}
    y1 = measurements[typical_user]

    start_time = time.perf_counter()
    if aoa is None:
        aoa = estimate_common_aoa(y1, config.bs_shape, config.bs_ris_paths, config.options)
    seconds["stage1"] = time.perf_counter() - start_time

    start_time = time.perf_counter()
    typical = estimate_typical_user(
        y1,
        aoa,
        schedules[typical_user],
        config,
        sparsity=config.user_ris_paths[typical_user],
        noise_variance=noise_variance,
    )
    common = build_common_part(typical, aoa, config)
    seconds["stage2"] = time.perf_counter() - start_time

    start_time = time.perf_counter()
    others = {}
    for k in sorted(measurements):
        if k == typical_user:
            continue
        others[k] = estimate_other_user(
            measurements[k],
            k,
            common,
            schedules[k],
            config,
            sparsity=config.user_ris_paths[k],
            noise_variance=noise_variance,
        )
    seconds["stage3"] = time.perf_counter() - start_time

    logger.debug(
        "Protocol finished in "
        + ", ".join(f"{name} {value:.3f}s" for name, value in seconds.items())
    )
    return EstimateBundle(
        typical_user=typical_user,
        aoa=aoa,
        typical=typical,
        common=common,
        others=others,
        stage_seconds=seconds,
    )
