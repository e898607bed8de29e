"""
Monte Carlo Harness
===================

Trial execution, parameter sweeps, NMSE aggregation and CSV export.

Every random draw of a trial derives from one 64-bit seed; campaign seeds
come from ``trial_seed(master, point, trial)``, so results do not depend on
the execution order or the number of workers. With common random numbers
(the default) every sweep point reuses the seeds of point 0, so trial ``t``
sees the same channels, schedules and noise shapes at every point and the
comparison between points is paired.
"""

import csv
import io
import time
from dataclasses import dataclass, field
from math import isqrt
from pathlib import Path
from typing import Literal

import numpy as np
import toml
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from scipy.stats import wilcoxon

from .baselines import run_direct_omp, run_sbl
from .bdris import bernoulli_training_schedule
from .channel import (
    SystemConfig,
    cascaded_matrix,
    pilot_split,
    sample_realization,
    synthesize_measurements,
)
from .config import logger, settings
from .errors import ConfigurationError, DimensionError
from .estimation import estimate_common_aoa, run_protocol
from .utils import error_payload, trial_seed

SweepParam = Literal[
    "snr_db",
    "pilot_budget",
    "user_paths",
    "bs_ris_paths",
    "bs_antennas",
    "group_count",
    "ris_antennas",
]
Estimator = Literal["proposed", "direct_omp", "sbl"]

ESTIMATORS: tuple[str, ...] = ("proposed", "direct_omp", "sbl")

DEFAULT_SWEEP_VALUES: dict[str, tuple[float, ...]] = {
    "snr_db": (-10, -5, 0, 5, 10),
    "pilot_budget": (14, 21, 28, 35, 42),
    "user_paths": (1, 2, 3, 4),
    "bs_ris_paths": (1, 2, 3, 4),
    "bs_antennas": (16, 36, 64),
    "group_count": (1, 4, 16),
    "ris_antennas": (16, 36),
}

CSV_HEADER = (
    "sweep_param",
    "sweep_value",
    "estimator",
    "trials",
    "nmse_mean",
    "nmse_std",
    "time_mean_s",
)


def nmse(estimates: dict[int, np.ndarray], truths: dict[int, np.ndarray]) -> float:
    """``Σ_k ‖Ĝ_k − G_k‖_F² / Σ_k ‖G_k‖_F²`` over a common user set."""
    if set(estimates) != set(truths):
        raise DimensionError(
            f"estimates cover users {sorted(estimates)}, truths cover {sorted(truths)}"
        )
    error, power = 0.0, 0.0
    for k, truth in truths.items():
        if estimates[k].shape != truth.shape:
            raise DimensionError(
                f"user {k}: estimate shape {estimates[k].shape} != {truth.shape}"
            )
        error += float(np.sum(np.abs(estimates[k] - truth) ** 2))
        power += float(np.sum(np.abs(truth) ** 2))
    if power == 0.0:
        raise ZeroDivisionError("true channels carry no energy")
    return error / power


def _square_side(value: int, what: str) -> int:
    side = isqrt(value)
    if side * side != value:
        raise ConfigurationError(f"{what} must be a square number, got {value}")
    return side


def apply_sweep(config: SystemConfig, param: str, value: float) -> SystemConfig:
    """Copy of ``config`` with one sweep axis set to ``value``."""
    if param == "snr_db":
        return config.with_updates(snr_db=float(value), noise_variance=None)
    if param == "pilot_budget":
        typical, other = pilot_split(int(value), config.user_count)
        return config.with_updates(pilot_lengths=(typical, other))
    if param == "user_paths":
        return config.with_updates(user_ris_paths=(int(value),))
    if param == "bs_ris_paths":
        return config.with_updates(bs_ris_paths=int(value))
    if param == "bs_antennas":
        side = _square_side(int(value), "bs_antennas")
        shape = config.bs_shape.model_dump() | {"horizontal_count": side, "vertical_count": side}
        return config.with_updates(bs_shape=shape)
    if param == "group_count":
        layout = config.ris_layout.model_dump() | {"group_count": int(value)}
        return config.with_updates(ris_layout=layout)
    if param == "ris_antennas":
        side = _square_side(int(value), "ris_antennas")
        layout = config.ris_layout.model_dump()
        layout["shape"] |= {"horizontal_count": side, "vertical_count": side}
        return config.with_updates(ris_layout=layout)
    raise ConfigurationError(f"unknown sweep parameter {param!r}")


@dataclass
class TrialResult:
    """NMSE, seconds and failures of every estimator in one trial."""

    seed: int
    typical_user: int
    nmse: dict[str, float] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)
    errors: dict[str, dict] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def run_trial(
    config: SystemConfig,
    seed: int,
    estimators: tuple[str, ...] = ("proposed",),
) -> TrialResult:
    """Draw one scenario and run every requested estimator on it.

    Failures of one estimator are recorded with a NaN NMSE and do not stop
    the others.
    """
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ConfigurationError(f"unknown estimators {sorted(unknown)}")
    realization_rng, schedule_rng, noise_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)
    )
    real = sample_realization(config, realization_rng)
    order = real.service_order
    typical = order[0]

    schedules, measurements, truths = {}, {}, {}
    for k, slots in zip(order, config.pilot_lengths):
        schedules[k] = bernoulli_training_schedule(config.ris_layout, slots, schedule_rng)
    for k in order:
        measurements[k] = synthesize_measurements(real, schedules[k], k, noise_rng)
        truths[k] = cascaded_matrix(real, k)

    result = TrialResult(seed=seed, typical_user=typical)
    aoa = None
    aoa_seconds = 0.0
    for name in estimators:
        extra = 0.0
        try:
            start_time = time.perf_counter()
            if name == "proposed":
                bundle = run_protocol(measurements, schedules, config, typical)
                aoa, aoa_seconds = bundle.aoa, bundle.stage_seconds["stage1"]
                estimates = bundle.cascaded
                result.warnings.extend(bundle.warnings)
            elif name == "direct_omp":
                estimates = run_direct_omp(measurements, schedules, config).estimates
            else:
                # a shared Stage I result is charged to SBL as well
                if aoa is None:
                    aoa = estimate_common_aoa(
                        measurements[typical], config.bs_shape, config.bs_ris_paths, config.options
                    )
                else:
                    extra = aoa_seconds
                estimates = run_sbl(measurements, schedules, config, aoa).estimates
            result.seconds[name] = time.perf_counter() - start_time + extra
            result.nmse[name] = nmse(estimates, truths)
        except Exception as e:
            logger.warning(f"Trial {seed}: estimator {name} failed: {e}")
            result.nmse[name] = float("nan")
            result.seconds[name] = float("nan")
            result.errors[name] = error_payload(e)
    return result


class CampaignSpec(BaseModel):
    """A sweep over one axis with a fixed number of trials per point."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    system: SystemConfig = Field(default_factory=SystemConfig.desk)
    sweep_param: SweepParam = "snr_db"
    sweep_values: tuple[float, ...] | None = None
    trials: int = Field(10, ge=1)
    estimators: tuple[Estimator, ...] = ("proposed",)
    out: Path | None = None
    seed: int = Field(0, ge=0)
    threads: int = Field(default_factory=lambda: settings.THREADS, ge=0)
    record_timing: bool = True
    keep_trials: bool = False
    common_random_numbers: bool = True

    @field_validator("estimators")
    @classmethod
    def _non_empty(cls, value):
        if not value:
            raise ValueError("at least one estimator is required")
        return value

    @property
    def values(self) -> tuple[float, ...]:
        if self.sweep_values is not None:
            return self.sweep_values
        return DEFAULT_SWEEP_VALUES[self.sweep_param]


@dataclass
class CampaignRow:
    sweep_param: str
    sweep_value: float
    estimator: str
    trials: int
    nmse_mean: float
    nmse_std: float
    time_mean_s: float


@dataclass
class CampaignResult:
    """Aggregated rows plus, optionally, the per-trial results."""

    spec: CampaignSpec
    rows: list[CampaignRow]
    trials: list[tuple[float, TrialResult]] = field(default_factory=list)

    def nmse_samples(self, value: float, estimator: str) -> np.ndarray:
        """Per-trial NMSE at one sweep value (needs ``keep_trials``)."""
        return np.array(
            [t.nmse[estimator] for v, t in self.trials if v == value], dtype=float
        )


def _format_value(value: float) -> str:
    return f"{value:g}"


def _format_float(value: float) -> str:
    return "nan" if np.isnan(value) else f"{value:.10e}"


def campaign_csv(result: CampaignResult) -> str:
    """Render the aggregated rows as CSV text."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in result.rows:
        writer.writerow(
            [
                row.sweep_param,
                _format_value(row.sweep_value),
                row.estimator,
                row.trials,
                _format_float(row.nmse_mean),
                _format_float(row.nmse_std),
                _format_float(row.time_mean_s),
            ]
        )
    return buffer.getvalue()


def write_campaign_csv(result: CampaignResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(campaign_csv(result))
    logger.info(f"Wrote {len(result.rows)} rows to {path}")
    return path


def run_campaign(spec: CampaignSpec) -> CampaignResult:
    """Run every (sweep value, trial) pair and aggregate per estimator."""
    values = spec.values
    configs = [apply_sweep(spec.system, spec.sweep_param, v) for v in values]
    tasks = [
        (i, t, trial_seed(spec.seed, 0 if spec.common_random_numbers else i, t))
        for i in range(len(values))
        for t in range(spec.trials)
    ]
    n_jobs = spec.threads or -1
    logger.info(
        f"Campaign over {spec.sweep_param}={list(values)}: {len(tasks)} trials, "
        f"estimators {list(spec.estimators)}, n_jobs={n_jobs}"
    )
    start_time = time.perf_counter()
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(run_trial)(configs[i], seed, spec.estimators) for i, _, seed in tasks
    )

    rows = []
    kept = []
    for i, value in enumerate(values):
        point = [outcome for (j, _, _), outcome in zip(tasks, outcomes) if j == i]
        kept.extend((value, outcome) for outcome in point)
        for name in spec.estimators:
            errors = np.array([o.nmse[name] for o in point], dtype=float)
            seconds = np.array([o.seconds[name] for o in point], dtype=float)
            valid = ~np.isnan(errors)
            failures = int(np.count_nonzero(~valid))
            if failures:
                logger.warning(f"{name} failed in {failures} trials at {spec.sweep_param}={value}")
            rows.append(
                CampaignRow(
                    sweep_param=spec.sweep_param,
                    sweep_value=float(value),
                    estimator=name,
                    trials=int(np.count_nonzero(valid)),
                    nmse_mean=float(np.mean(errors[valid])) if valid.any() else float("nan"),
                    nmse_std=float(np.std(errors[valid])) if valid.any() else float("nan"),
                    time_mean_s=(
                        float(np.mean(seconds[valid])) if spec.record_timing and valid.any() else 0.0
                    ),
                )
            )
            logger.info(
                f"{spec.sweep_param}={value} {name}: mean NMSE {rows[-1].nmse_mean:.4e} "
                f"over {rows[-1].trials} trials"
            )

    elapsed_time = time.perf_counter() - start_time
    logger.info(f"Campaign finished in {elapsed_time:.2f} seconds")
    result = CampaignResult(spec=spec, rows=rows, trials=kept if spec.keep_trials else [])
    if spec.out is not None:
        write_campaign_csv(result, spec.out)
    return result


def compare_paired(
    first: np.ndarray, second: np.ndarray, alternative: str = "less"
) -> tuple[float, float]:
    """One-sided Wilcoxon signed-rank test on paired per-trial NMSE values.

    Pairs where either value is NaN are dropped.

    Returns:
        ``(statistic, p_value)``
    """
    first = np.asarray(first, dtype=float)
    second = np.asarray(second, dtype=float)
    if first.shape != second.shape:
        raise DimensionError(f"paired samples differ in shape: {first.shape} vs {second.shape}")
    keep = ~(np.isnan(first) | np.isnan(second))
    test = wilcoxon(first[keep], second[keep], alternative=alternative)
    return float(test.statistic), float(test.pvalue)


PRESETS = {"desk": SystemConfig.desk, "published": SystemConfig}


def load_campaign_file(path: str | Path, **overrides) -> CampaignSpec:
    """Read a TOML campaign file with ``[system]``, ``[estimator]`` and ``[campaign]``.

    ``[system]`` may name a ``preset`` (``desk`` or ``published``) whose fields
    the remaining keys override. Keyword ``overrides`` replace campaign fields.
    """
    path = Path(path)
    try:
        document = toml.load(path)
    except (OSError, toml.TomlDecodeError) as e:
        raise ConfigurationError(f"{path}: {e}") from e
    unknown = set(document) - {"system", "estimator", "campaign"}
    if unknown:
        raise ConfigurationError(f"{path}: unknown sections {sorted(unknown)}")

    system = dict(document.get("system", {}))
    preset = system.pop("preset", "desk")
    if preset not in PRESETS:
        raise ConfigurationError(f"{path}: unknown preset {preset!r}")
    if "estimator" in document:
        system["options"] = document["estimator"]
    try:
        config = PRESETS[preset]().with_updates(**system) if system else PRESETS[preset]()
        campaign = dict(document.get("campaign", {}))
        campaign.update({k: v for k, v in overrides.items() if v is not None})
        return CampaignSpec(system=config, **campaign)
    except ValidationError as e:
        raise ConfigurationError(f"{path}: {e}") from e
