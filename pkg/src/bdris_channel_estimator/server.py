from mcp.server.fastmcp import FastMCP, Context
from anyio import to_thread
from contextlib import asynccontextmanager
from collections import OrderedDict
from collections.abc import AsyncIterator
from dotenv import load_dotenv
import threading
import time
from datetime import datetime
from dataclasses import asdict, dataclass, field
from typing import Tuple, Optional
from pydantic import Field

from .config import logger, settings
from .utils import safe_json_dumps, error_payload
from .channel import SystemConfig, pilot_lower_bounds
from .harness import PRESETS, ESTIMATORS, CampaignSpec, CampaignResult, run_campaign, run_trial
from .selftest import run_selftest

load_dotenv()


@dataclass
class SimulationContext:
    """Context for the channel estimation MCP server."""

    # Campaign results keyed by their request parameters, least recently used first
    _campaign_cache: "OrderedDict[str, Tuple[datetime, CampaignResult]]" = field(
        default_factory=OrderedDict
    )
    max_entries: int = field(default_factory=lambda: settings.CACHE_MAX_ENTRIES)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def get_cached_campaign(
        self, key: str, max_age_seconds: int = None
    ) -> Optional[CampaignResult]:
        """Get a cached campaign result if it exists and is not expired.

        Args:
            key: Cache key built from the request parameters
            max_age_seconds: Maximum age in seconds for the cached entry to be valid

        Returns:
            The cached result if found and not expired, None otherwise
        """
        if max_age_seconds is None:
            max_age_seconds = settings.CACHE_MAX_AGE

        with self._lock:
            if key in self._campaign_cache:
                timestamp, result = self._campaign_cache[key]
                if (datetime.now() - timestamp).total_seconds() < max_age_seconds:
                    self._campaign_cache.move_to_end(key)
                    logger.info(f"Using cached campaign result for {key}")
                    return result
        return None

    def cache_campaign(self, key: str, result: CampaignResult) -> None:
        with self._lock:
            self._campaign_cache[key] = (datetime.now(), result)
            self._campaign_cache.move_to_end(key)
            while len(self._campaign_cache) > self.max_entries:
                evicted, _ = self._campaign_cache.popitem(last=False)
                logger.info(f"Evicted cached campaign result for {evicted}")
        logger.info(f"Cached campaign result for {key}")

    @property
    def cache_size(self) -> int:
        return len(self._campaign_cache)

    def clear_cache(self) -> None:
        with self._lock:
            self._campaign_cache.clear()
        logger.info("Campaign cache cleared")

    def get_campaign(self, spec: CampaignSpec) -> CampaignResult:
        """Run a campaign, reusing a recent identical one when available."""
        key = spec.model_dump_json()
        cached = self.get_cached_campaign(key)
        if cached:
            return cached

        logger.info(f"Running campaign over {spec.sweep_param}")
        start_time = time.time()
        result = run_campaign(spec)
        self.cache_campaign(key, result)
        elapsed_time = time.time() - start_time
        logger.info(f"Ran campaign over {spec.sweep_param} in {elapsed_time:.2f} seconds")
        return result


@asynccontextmanager
async def simulation_lifespan(server: FastMCP) -> AsyncIterator[SimulationContext]:
    """
    Manages the simulation server lifecycle.

    Args:
        server: The FastMCP server instance

    Yields:
        SimulationContext: The context for the simulation server
    """
    context = SimulationContext()

    try:
        logger.info("Simulation server initialized")
        yield context
    finally:
        logger.info("Cleaning up campaign cache")
        context.clear_cache()


mcp = FastMCP(
    settings.APP_NAME,
    version=settings.APP_VERSION,
    dependencies=settings.DEPENDENCIES,
    description=settings.APP_DESCRIPTION,
    instructions=settings.APP_INSTRUCTIONS,
    lifespan=simulation_lifespan,
    host=settings.HOST,
    port=settings.PORT,
)


def _preset_config(preset: str, snr_db: Optional[float], on_grid: bool) -> SystemConfig:
    if preset not in PRESETS:
        raise ValueError(f"Unknown preset {preset!r}; choose one of {sorted(PRESETS)}")
    config = PRESETS[preset]()
    updates = {"on_grid": on_grid}
    if snr_db is not None:
        updates.update(snr_db=snr_db, noise_variance=None)
    return config.with_updates(**updates)


def _estimator_tuple(estimators: str) -> tuple[str, ...]:
    names = tuple(name.strip() for name in estimators.split(",") if name.strip())
    unknown = set(names) - set(ESTIMATORS)
    if unknown or not names:
        raise ValueError(
            f"Estimators must be a comma-separated subset of {','.join(ESTIMATORS)}"
        )
    return names


@mcp.tool(
    name="run_trial",
    description="Run one Monte Carlo trial and return the NMSE and runtime of each estimator",
)
async def run_trial_tool(
    ctx: Context,
    preset: str = Field("desk", description="Scenario preset: 'desk' or 'published'"),
    snr_db: Optional[float] = Field(None, description="SNR in dB (preset value if omitted)"),
    seed: int = Field(0, description="Trial seed"),
    on_grid: bool = Field(False, description="Snap every angle to the dictionary grids"),
    estimators: str = Field(
        "proposed", description="Comma-separated estimators: proposed, direct_omp, sbl"
    ),
) -> str:
    try:
        config = _preset_config(preset, snr_db, on_grid)
        names = _estimator_tuple(estimators)
        logger.info(f"Running trial {seed} on the {preset} preset with {list(names)}")
        result = await to_thread.run_sync(run_trial, config, seed, names)
        return safe_json_dumps(
            {
                "preset": preset,
                "seed": seed,
                "typical_user": result.typical_user,
                "nmse": result.nmse,
                "seconds": result.seconds,
                "errors": result.errors,
                "warnings": result.warnings,
            }
        )
    except Exception as e:
        error_msg = f"Error running trial {seed}: {str(e)}"
        logger.error(error_msg)
        logger.exception(f"Detailed exception while running trial {seed}:")
        return safe_json_dumps(error_payload(e, error_msg))


@mcp.tool(
    description="Run a small parameter sweep and return mean/std NMSE and mean runtime per point and estimator. Results are cached.",
)
async def run_sweep(
    ctx: Context,
    sweep_param: str = Field(
        "snr_db",
        description="One of snr_db, pilot_budget, user_paths, bs_ris_paths, bs_antennas, group_count, ris_antennas",
    ),
    values: str = Field("", description="Comma-separated sweep values (defaults if empty)"),
    trials: int = Field(5, description="Trials per sweep point"),
    preset: str = Field("desk", description="Scenario preset: 'desk' or 'published'"),
    seed: int = Field(0, description="Master seed"),
    estimators: str = Field("proposed", description="Comma-separated estimators"),
    on_grid: bool = Field(False, description="Snap every angle to the dictionary grids"),
) -> str:
    try:
        sweep_values = tuple(float(v) for v in values.split(",") if v.strip()) or None
        spec = CampaignSpec(
            system=_preset_config(preset, None, on_grid),
            sweep_param=sweep_param,
            sweep_values=sweep_values,
            trials=trials,
            estimators=_estimator_tuple(estimators),
            seed=seed,
            record_timing=True,
        )
        simulation = ctx.request_context.lifespan_context
        result = await to_thread.run_sync(simulation.get_campaign, spec)
        return safe_json_dumps(
            {
                "sweep_param": spec.sweep_param,
                "values": list(spec.values),
                "rows": [asdict(row) for row in result.rows],
            }
        )
    except Exception as e:
        error_msg = f"Error running {sweep_param} sweep: {str(e)}"
        logger.error(error_msg)
        logger.exception(f"Detailed exception while running the {sweep_param} sweep:")
        return safe_json_dumps(error_payload(e, error_msg))


@mcp.tool(
    name="run_selftest",
    description="Run the model identity and estimator oracle checks",
)
async def run_selftest_tool(
    ctx: Context,
    seed: int = Field(0, description="Seed for the random checks"),
) -> str:
    try:
        logger.info("Running self-test")
        records = await to_thread.run_sync(run_selftest, seed)
        return safe_json_dumps(
            {
                "passed": all(r.passed for r in records),
                "checks": [asdict(r) for r in records],
            }
        )
    except Exception as e:
        error_msg = f"Error running self-test: {str(e)}"
        logger.error(error_msg)
        return safe_json_dumps(error_payload(e, error_msg))


@mcp.tool(
    description="Describe a scenario preset with its derived quantities (noise variance, dictionary sizes, pilot bounds)"
)
async def describe_config(
    ctx: Context,
    preset: str = Field("desk", description="Scenario preset: 'desk' or 'published'"),
    snr_db: Optional[float] = Field(None, description="SNR in dB (preset value if omitted)"),
) -> str:
    try:
        config = _preset_config(preset, snr_db, False)
        typical_bound, other_bound = pilot_lower_bounds(config)
        layout = config.ris_layout
        return safe_json_dumps(
            {
                "preset": preset,
                "config": config.model_dump(mode="json"),
                "derived": {
                    "bs_antennas": config.bs_shape.size,
                    "ris_elements": layout.element_count,
                    "group_size": layout.group_size,
                    "training_length": layout.training_length,
                    "noise_variance": config.effective_noise_variance,
                    "user_dictionary_size": config.user_dictionary().size,
                    "aod_dictionary_size": config.aod_dictionary().size,
                    "delta_grid": list(config.delta_grid_size),
                    "pilot_lower_bounds": {
                        "typical": typical_bound,
                        "other": other_bound,
                    },
                },
            }
        )
    except Exception as e:
        error_msg = f"Error describing preset {preset}: {str(e)}"
        logger.error(error_msg)
        return safe_json_dumps(error_payload(e, error_msg))


async def main():
    transport = settings.TRANSPORT
    if transport == "sse":
        await mcp.run_sse_async()
    else:
        await mcp.run_stdio_async()
