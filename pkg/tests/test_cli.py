"""Tests for the bdris-ce command line."""

import json

import pytest

from bdris_channel_estimator.cli import build_parser, main
from bdris_channel_estimator.harness import CSV_HEADER

QUICK = ["--values", "0", "--trials", "1", "--threads", "1", "--no-timing", "--on-grid"]


def test_sweep_snr_to_stdout(capsys):
    """A one-point sweep prints the CSV header and one row per estimator."""
    assert main(["sweep-snr", *QUICK]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 2
    assert lines[1].startswith("snr_db,0,proposed,1,")


def test_sweep_to_file(tmp_path, capsys):
    """--out writes the CSV instead of printing it."""
    out = tmp_path / "nested" / "snr.csv"
    assert main(["sweep-snr", *QUICK, "--out", str(out)]) == 0
    assert capsys.readouterr().out == ""
    assert out.read_text().startswith(",".join(CSV_HEADER))


def test_output_is_reproducible(capsys):
    """Identical arguments give byte-identical output without timing."""
    main(["sweep-snr", *QUICK, "--seed", "3"])
    first = capsys.readouterr().out
    main(["sweep-snr", *QUICK, "--seed", "3"])
    assert capsys.readouterr().out == first


def test_negative_seed_is_a_configuration_error(capsys):
    """Invalid configuration exits with status 2 and a JSON error."""
    assert main(["sweep-snr", "--seed", "-1"]) == 2
    error = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert error["type"] == "ConfigurationError"


def test_missing_config_file(tmp_path):
    """A campaign file that does not exist exits with status 2."""
    assert main(["sweep-pilot", "--config", str(tmp_path / "absent.toml")]) == 2


def test_config_file_and_overrides(tmp_path, capsys):
    """Command-line values override the campaign file."""
    path = tmp_path / "campaign.toml"
    path.write_text('[system]\npreset = "desk"\n\n[campaign]\ntrials = 2\nseed = 2\n')
    argv = ["sweep-groups", "--config", str(path), "--values", "4", "--threads", "1", "--no-timing"]
    assert main(argv) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[1].startswith("group_count,4,proposed,2,")


def test_paths_axis_and_estimator_parsing():
    """sweep-paths picks its axis and estimators must be known."""
    args = build_parser().parse_args(["sweep-paths", "--axis", "bs_ris_paths"])
    assert args.axis == "bs_ris_paths"
    args = build_parser().parse_args(["sweep-snr", "--estimators", "proposed, sbl"])
    assert args.estimators == ("proposed", "sbl")
    with pytest.raises(SystemExit):
        build_parser().parse_args(["sweep-snr", "--estimators", "ls"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["sweep-everything"])
