"""Command-line entry point: ``bdris-ce <subcommand> [options]``."""

import argparse
import sys
from pathlib import Path

from pydantic import ValidationError

from .config import logger, settings
from .errors import ConfigurationError
from .harness import (
    ESTIMATORS,
    PRESETS,
    CampaignSpec,
    apply_sweep,
    campaign_csv,
    load_campaign_file,
    run_campaign,
)
from .selftest import run_selftest, selftest_csv
from .utils import error_payload, safe_json_dumps

SWEEP_COMMANDS = {
    "sweep-snr": "snr_db",
    "sweep-pilot": "pilot_budget",
    "sweep-paths": None,
    "sweep-antennas": "bs_antennas",
    "sweep-groups": "group_count",
    "bench-runtime": "ris_antennas",
}


def _estimator_list(value: str) -> tuple[str, ...]:
    names = tuple(name.strip() for name in value.split(",") if name.strip())
    unknown = set(names) - set(ESTIMATORS)
    if unknown or not names:
        raise argparse.ArgumentTypeError(
            f"estimators must be a comma-separated subset of {','.join(ESTIMATORS)}"
        )
    return names


def _value_list(value: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid value list {value!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bdris-ce", description=settings.APP_DESCRIPTION
    )
    parser.add_argument("--version", action="version", version=settings.APP_VERSION)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML campaign file")
    common.add_argument(
        "--preset", choices=sorted(PRESETS), help="base scenario when no file sets one"
    )
    common.add_argument("--seed", type=int, help="master seed (non-negative)")
    common.add_argument("--out", type=Path, help="CSV output path (default: stdout)")
    common.add_argument("--threads", type=int, help="worker processes, 0 = all cores")

    sweep = argparse.ArgumentParser(add_help=False, parents=[common])
    sweep.add_argument("--trials", type=int, help="Monte Carlo trials per sweep point")
    sweep.add_argument("--estimators", type=_estimator_list, help="e.g. proposed,direct_omp")
    sweep.add_argument("--values", type=_value_list, help="comma-separated sweep values")
    sweep.add_argument("--snr", type=float, help="base SNR in dB")
    sweep.add_argument("--on-grid", action="store_true", help="snap angles to dictionary grids")
    sweep.add_argument(
        "--no-timing", action="store_true", help="write zero times for byte-identical output"
    )

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("sweep-snr", parents=[sweep], help="NMSE versus SNR")
    commands.add_parser("sweep-pilot", parents=[sweep], help="NMSE versus average pilot budget")
    paths = commands.add_parser("sweep-paths", parents=[sweep], help="NMSE versus path counts")
    paths.add_argument(
        "--axis", choices=("user_paths", "bs_ris_paths"), default="user_paths"
    )
    commands.add_parser("sweep-antennas", parents=[sweep], help="NMSE versus BS antennas")
    commands.add_parser("sweep-groups", parents=[sweep], help="NMSE versus RIS group count")
    commands.add_parser(
        "bench-runtime", parents=[sweep], help="runtime versus RIS size (16 and 36 elements)"
    )
    commands.add_parser("selftest", parents=[common], help="run the identity and oracle checks")
    return parser


def _campaign_spec(args: argparse.Namespace) -> CampaignSpec:
    param = args.axis if args.command == "sweep-paths" else SWEEP_COMMANDS[args.command]
    estimators = args.estimators
    trials = args.trials
    if args.command == "bench-runtime":
        estimators = estimators or ("proposed", "direct_omp")
        trials = trials or 10
    overrides = {
        "sweep_param": param,
        "sweep_values": args.values,
        "trials": trials,
        "estimators": estimators,
        "out": args.out,
        "seed": args.seed,
        "threads": args.threads,
    }
    if args.no_timing:
        overrides["record_timing"] = False

    if args.config is not None:
        spec = load_campaign_file(args.config, **overrides)
    else:
        preset = PRESETS[args.preset or "desk"]()
        try:
            spec = CampaignSpec(
                system=preset, **{k: v for k, v in overrides.items() if v is not None}
            )
        except ValidationError as e:
            raise ConfigurationError(str(e)) from e
    if args.preset is not None and args.config is not None:
        logger.info("--preset is ignored when --config is given")

    system = spec.system
    if args.on_grid:
        system = system.with_updates(on_grid=True)
    if args.snr is not None:
        system = apply_sweep(system, "snr_db", args.snr)
    return spec.model_copy(update={"system": system})


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigurationError(f"seed must be non-negative, got {args.seed}")
        out = args.out
        if args.command == "selftest":
            records = run_selftest(seed=args.seed or 0)
            text = selftest_csv(records)
            failed = not all(r.passed for r in records)
        else:
            spec = _campaign_spec(args)
            out = spec.out
            result = run_campaign(spec.model_copy(update={"out": None}))
            text = campaign_csv(result)
            failed = False
        if out is not None:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(text)
            logger.info(f"Wrote {out}")
        else:
            sys.stdout.write(text)
        return 1 if failed else 0
    except ConfigurationError as e:
        logger.error(f"Invalid configuration: {e}")
        print(safe_json_dumps(error_payload(e)), file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        logger.exception(f"Detailed exception while running {args.command}:")
        print(safe_json_dumps(error_payload(e)), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
