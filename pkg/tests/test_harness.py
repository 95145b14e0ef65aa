import numpy as np
import pytest
import yaml

from core.artifacts import read_csv, read_surface_binary, write_surface_binary
from core.config import parse_config
from core.errors import ArgumentError, ConfigurationError, DivergenceError
from core.harness import (
    EXIT_CHECKS_FAILED, EXIT_CONFIGURATION, EXIT_NUMERICAL, EXIT_OK, execute, transform_coordinates,
)
from core.market_model import constant_field, hinge
from core.pde_core import SpaceTimeGrid, ValueSurface
from pathlib import Path
from scripts.lab import app
from typer.testing import CliRunner

CONFIG_DIR = Path(__file__).parent.parent / "configs"
runner = CliRunner()


def _config(data: dict, out: Path):
    return parse_config({**data, "output": {"directory": str(out)}})


def _hormander(fields: str) -> dict:
    return {"command": "verify", "verify": {"suite": "hormander", "vector_fields": fields}}


def _comparison(lower, upper) -> dict:
    return {
        "command": "verify",
        "grid": {"lower": [-6.0, -1.0], "upper": [6.0, 1.0], "nodes": [241, 3], "horizon": 0.5},
        "payoff": {"kind": "hinge"},
        "verify": {"suite": "comparison", "field": {"matrix": lower}, "upper_field": {"matrix": upper}},
    }


# --- Verification suites ---

def test_hormander_suite_passes_and_writes_a_report(tmp_path):
    result = execute(_config(_hormander("grushin"), tmp_path))

    assert result.exit_code == EXIT_OK
    report = yaml.safe_load((tmp_path / "report_hormander.yaml").read_text())
    assert report["passed"] is True
    assert report["checks"][0]["note"] == "depth 1"
    assert (tmp_path / "timing.yaml").exists()


def test_failed_check_exits_with_one(tmp_path):
    result = execute(_config(_hormander("single"), tmp_path))
    assert result.exit_code == EXIT_CHECKS_FAILED
    assert result.checks[0].passed is False


def test_comparison_suite_checks_the_closed_form_gap(tmp_path):
    result = execute(_config(_comparison([[0.5, 0.0], [0.0, 0.5]], [[1.0, 0.0], [0.0, 0.5]]), tmp_path))

    assert result.exit_code == EXIT_OK
    assert [check.name for check in result.checks] == [
        "coefficient-order", "min-gap", "gap-positive-on-gamma", "bachelier-gap"]


def test_unordered_comparison_is_a_failed_check(tmp_path):
    result = execute(_config(_comparison([[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 1.0]]), tmp_path))
    assert result.exit_code == EXIT_CHECKS_FAILED
    assert result.checks[0].name == "coefficient-order"
    assert "not PSD" in result.checks[0].note


def test_convexity_suite_reports_the_sine_counterexample(tmp_path):
    data = {
        "command": "verify",
        "payoff": {"kind": "quadratic"},
        "verify": {"suite": "convexity", "criteria": ["global"],
                   "field": {"matrix": [[1.0, 0.0], [0.0, 1.0]], "amplitude": 0.5, "axis": 1}},
    }
    result = execute(_config(data, tmp_path))
    assert result.exit_code == EXIT_CHECKS_FAILED
    assert result.checks[0].witness["kind"] == "criterion"


@pytest.mark.slow
def test_shipped_convexity_config_meets_its_expectations(tmp_path):
    """
    Tests the shipped convexity configuration end to end.

    Purpose:
        The sine example is run for its witnesses: the global criterion, the
        solved surface and the hinge search must each produce one, while the
        critical-set criterion holds. Graded against verify.expect, the run
        exits 0 and every check carries its expected outcome.
    """
    data = yaml.safe_load((CONFIG_DIR / "verify_convexity.yaml").read_text())
    result = execute(_config(data, tmp_path))

    assert result.exit_code == EXIT_OK
    assert [check.name for check in result.checks] == [
        "global-criterion", "critical-set-criterion", "solved-criterion", "violation-search"]
    assert all(check.passed for check in result.checks)
    witnesses = [check.witness["kind"] if check.witness else None for check in result.checks]
    assert witnesses == ["criterion", None, "solved", "violation"]


def test_unmet_expectation_fails_the_convexity_check(tmp_path):
    data = {
        "command": "verify",
        "payoff": {"kind": "quadratic"},
        "verify": {"suite": "convexity", "criteria": ["global"], "expect": {"global": "witness"},
                   "field": {"matrix": [[1.0, 0.0], [0.0, 1.0]]}},
    }
    result = execute(_config(data, tmp_path))

    assert result.exit_code == EXIT_CHECKS_FAILED
    assert result.checks[0].passed is False
    assert result.checks[0].note.endswith("expected witness, got pass")


def test_expectation_for_a_criterion_that_is_not_run_is_rejected(tmp_path):
    data = {
        "command": "verify",
        "verify": {"suite": "convexity", "criteria": ["global"], "expect": {"search": "witness"}},
    }
    with pytest.raises(ConfigurationError, match="search"):
        _config(data, tmp_path)


def test_unknown_suite_is_a_configuration_error(tmp_path):
    result = execute(_config({"command": "verify", "verify": {"suite": "spectral"}}, tmp_path))
    assert result.exit_code == EXIT_CONFIGURATION


# --- Commands ---

def test_zero_volatility_passport_run(tmp_path):
    data = {
        "command": "price-passport",
        "market": {"sigma": [0.0]},
        "passport": {"strike": 0.0, "horizon": 0.1, "p0": 0.5, "p_nodes": 11, "x_nodes": 5},
    }
    result = execute(_config(data, tmp_path))

    assert result.exit_code == EXIT_OK
    assert result.summary["value"] == pytest.approx(0.5, abs=1e-12)
    names = sorted(path.name for path in result.artifacts)
    assert names == ["policy.csv", "summary.csv", "timing.yaml", "value_surface.csv", "value_surface.vsrf"]


def test_simulation_is_reproducible(tmp_path):
    """
    Tests that a run is a function of its configuration and seed.

    Purpose:
        Two runs of the same config into the same directory must write
        byte-identical CSV artifacts; a different seed must change them.
    """
    data = {
        "command": "simulate",
        "seed": 5,
        "symmetric": {"sigma": 0.2},
        "mc": {"process": "index-state", "paths": 200, "steps": 16, "checkpoints": 3, "block_size": 64},
    }
    execute(_config(data, tmp_path))
    first = (tmp_path / "summary.csv").read_bytes()
    execute(_config(data, tmp_path))
    assert (tmp_path / "summary.csv").read_bytes() == first

    execute(_config({**data, "seed": 6}, tmp_path))
    assert (tmp_path / "summary.csv").read_bytes() != first


def test_simulation_summary_rows(tmp_path):
    data = {
        "command": "simulate",
        "market": {"sigma": [0.2, 0.3]},
        "mc": {"process": "gbm", "paths": 100, "steps": 8, "write_paths": True},
    }
    result = execute(_config(data, tmp_path))
    fields, columns, rows = read_csv(tmp_path / "summary.csv")

    assert result.exit_code == EXIT_OK
    assert fields["command"] == "simulate"
    assert columns == ["t", "quantity", "mean", "stderr"]
    assert [row[1] for row in rows] == ["v1", "v2", "v1", "v2"]
    assert float(rows[0][2]) == 1.0
    assert len(read_csv(tmp_path / "paths.csv")[2]) == 100 * 2


def test_transform_payoff_round_trip(tmp_path):
    data = {
        "command": "transform",
        "payoff": {"kind": "hinge", "strike": 1.0, "coordinates": "lognormal"},
        "transform": {"direction": "to-normal", "lower": -2.0, "upper": 2.0, "nodes": 41},
    }
    result = execute(_config(data, tmp_path))
    assert result.exit_code == EXIT_OK
    assert result.summary["max_mismatch"] <= 1e-12


def test_transform_surface_file(tmp_path):
    grid = SpaceTimeGrid((0.0,), (1.0,), (3,), final_time=1.0)
    source = write_surface_binary(ValueSurface(grid, grid.stored_times, np.ones((2, 3))), tmp_path / "in.vsrf")
    data = {"command": "transform", "transform": {"direction": "to-lognormal", "target": "surface",
                                                  "input": str(source)}}
    result = execute(_config(data, tmp_path / "out"))

    assert result.exit_code == EXIT_OK
    assert read_surface_binary(tmp_path / "out" / "transformed.vsrf").grid.coordinates == "lognormal"
    _, columns, _ = read_csv(tmp_path / "out" / "transformed.csv")
    assert columns == ["t", "s1", "value"]


def test_errors_map_onto_exit_codes(tmp_path, mocker):
    """
    Tests the exit-code contract of execute.

    Mocks:
        - `COMMAND_HANDLERS`: handlers that raise a numerical and an argument error.
    """
    def diverge(cfg):
        raise DivergenceError("Non-finite values in the solve.", time_index=12)

    def misuse(cfg):
        raise ArgumentError("Point outside the grid.")

    cfg = _config(_hormander("grushin"), tmp_path)
    mocker.patch.dict("core.harness.COMMAND_HANDLERS", {"verify": diverge})
    assert execute(cfg).exit_code == EXIT_NUMERICAL
    mocker.patch.dict("core.harness.COMMAND_HANDLERS", {"verify": misuse})
    result = execute(cfg)
    assert result.exit_code == EXIT_CONFIGURATION
    assert result.summary == {"error": "Point outside the grid."}


# --- Coordinate transforms ---

def test_transform_points_round_trip():
    x = np.array([-1.0, 0.0, 2.0])
    assert np.allclose(transform_coordinates(transform_coordinates(x, "to-lognormal"), "to-normal"), x)
    with pytest.raises(ArgumentError):
        transform_coordinates(np.array([0.0, 1.0]), "to-normal")


def test_transform_payoff_and_field_types():
    payoff = transform_coordinates(hinge(0.0), "to-lognormal")
    assert payoff.coordinates == "lognormal"
    field = transform_coordinates(constant_field([[0.5]]), "to-lognormal")
    assert field.coordinates == "lognormal"


def test_transform_rejects_unknown_inputs():
    with pytest.raises(ArgumentError):
        transform_coordinates("surface", "to-lognormal")
    with pytest.raises(ArgumentError):
        transform_coordinates(np.array([1.0]), "sideways")


# --- Command line ---

def test_cli_runs_a_verification_suite(tmp_path):
    result = runner.invoke(app, ["verify", "--config", str(CONFIG_DIR / "verify_hormander.yaml"),
                                 "--out", str(tmp_path)])
    assert result.exit_code == EXIT_OK
    assert (tmp_path / "report_hormander.yaml").exists()


def test_cli_refuses_a_config_for_another_command(tmp_path):
    result = runner.invoke(app, ["simulate", "--config", str(CONFIG_DIR / "verify_hormander.yaml"),
                                 "--out", str(tmp_path)])
    assert result.exit_code == EXIT_CONFIGURATION


def test_cli_reports_invalid_configs(tmp_path):
    config = tmp_path / "broken.yaml"
    config.write_text("command: verify\n")
    result = runner.invoke(app, ["verify", "--config", str(config)])
    assert result.exit_code == EXIT_CONFIGURATION
