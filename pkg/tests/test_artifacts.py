import numpy as np
import pytest
import yaml

from core.artifacts import (
    ArtifactHeader, atomic_write_bytes, decode_surface, encode_surface, format_value, read_csv, read_surface_binary,
    render_csv, write_ensemble_csv, write_report, write_surface_binary, write_surface_csv, write_timing,
)
from core.errors import ArgumentError
from core.path_engine import Ensemble
from core.pde_core import SpaceTimeGrid, ValueSurface

HEADER = ArtifactHeader(config_hash="0123456789abcdef", seed=7, command="verify")


@pytest.fixture
def small_surface():
    grid = SpaceTimeGrid((-1.0, 0.0), (1.0, 2.0), (3, 3), final_time=1.0, steps=4, stored_layers=3)
    values = np.arange(3 * 9, dtype=float).reshape(3, 3, 3) / 7.0
    return ValueSurface(grid, grid.stored_times, values)


# --- CSV ---

def test_csv_header_and_number_format():
    text = render_csv(HEADER, ["t", "value"], [(0.1, 1.0 / 3.0), (1, True)])
    lines = text.splitlines()
    assert lines[0] == "# config_hash=0123456789abcdef seed=7 command=verify"
    assert lines[1] == "t,value"
    assert lines[2] == "0.10000000000000001,0.33333333333333331"
    assert lines[3] == "1,1"


def test_seventeen_digits_survive_a_text_round_trip():
    for value in [0.1, 1.0 / 3.0, 2.0 ** -40, 1e300]:
        assert float(format_value(value)) == value


def test_csv_rows_must_match_the_columns():
    with pytest.raises(ArgumentError):
        render_csv(HEADER, ["a", "b"], [(1.0,)])


def test_surface_csv_has_one_row_per_time_and_node(tmp_path, small_surface):
    path = write_surface_csv(small_surface, tmp_path / "surface.csv", HEADER)
    fields, columns, rows = read_csv(path)

    assert fields == {"config_hash": "0123456789abcdef", "seed": "7", "command": "verify"}
    assert columns == ["t", "x1", "x2", "value"]
    assert len(rows) == 3 * 9
    assert [float(v) for v in rows[1]] == [0.0, -1.0, 1.0, small_surface.values[0].reshape(-1)[1]]


def test_lognormal_surface_csv_reports_prices(tmp_path):
    grid = SpaceTimeGrid((0.0,), (1.0,), (3,), final_time=1.0, coordinates="lognormal")
    surface = ValueSurface(grid, grid.stored_times, np.zeros((2, 3)))
    _, columns, rows = read_csv(write_surface_csv(surface, tmp_path / "surface.csv", HEADER))
    assert columns == ["t", "s1", "value"]
    assert float(rows[1][1]) == pytest.approx(np.exp(0.5))
    assert float(rows[2][1]) == pytest.approx(np.e)


def test_ensemble_csv_repeats_per_path_extras(tmp_path):
    ensemble = Ensemble(times=np.array([0.0, 1.0]), values=np.ones((2, 2, 1)),
                        extras={"m_n": np.full((2, 2), 0.5), "realized_qv": np.array([0.1, 0.2])})
    _, columns, rows = read_csv(write_ensemble_csv(ensemble, tmp_path / "paths.csv", HEADER))
    assert columns == ["path", "t", "v1", "m_n", "realized_qv"]
    assert len(rows) == 4
    assert rows[3] == ["1", "1", "1", "0.5", "0.20000000000000001"]


# --- Binary surfaces ---

def test_binary_surface_round_trip(tmp_path, small_surface):
    path = write_surface_binary(small_surface, tmp_path / "surface.vsrf")
    restored = read_surface_binary(path)

    assert restored.grid.nodes == small_surface.grid.nodes
    assert restored.grid.lower == small_surface.grid.lower
    assert restored.grid.steps == 4
    assert np.array_equal(restored.times, small_surface.times)
    assert np.array_equal(restored.values, small_surface.values)


def test_binary_layout_starts_with_magic_and_header(small_surface):
    data = encode_surface(small_surface)
    assert data[:4] == b"VSRF"
    ints = np.frombuffer(data, dtype="<u4", count=5, offset=4)
    assert ints.tolist() == [1, 0, 2, 3, 4]
    expected_size = 24 + 4 * 2 + 4 * 3 + 8 + 8 * 2 * 2 + 8 * 3 + 8 * 27
    assert len(data) == expected_size


@pytest.mark.parametrize("mutate", [
    lambda data: b"XXXX" + data[4:],
    lambda data: data[:-8],
    lambda data: data + b"\x00",
])
def test_corrupt_binary_surfaces_are_rejected(small_surface, mutate):
    with pytest.raises(ArgumentError):
        decode_surface(mutate(encode_surface(small_surface)))


# --- Atomic writes and YAML documents ---

def test_atomic_write_leaves_no_temporary_files(tmp_path):
    target = tmp_path / "nested" / "out.bin"
    atomic_write_bytes(target, b"first")
    atomic_write_bytes(target, b"second")
    assert target.read_bytes() == b"second"
    assert [p.name for p in target.parent.iterdir()] == ["out.bin"]


def test_failed_write_keeps_the_previous_file(tmp_path, mocker):
    """
    Tests that an interrupted write never leaves a partial artifact.

    Mocks:
        - `os.replace`: raises as if the process died before the rename.
    """
    target = tmp_path / "out.bin"
    atomic_write_bytes(target, b"complete")
    mocker.patch("core.artifacts.os.replace", side_effect=OSError("disk full"))

    with pytest.raises(OSError):
        atomic_write_bytes(target, b"partial")
    assert target.read_bytes() == b"complete"
    assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]


def test_report_passes_only_when_every_check_passes(tmp_path):
    checks = [{"name": "a", "passed": True}, {"name": "b", "passed": False}]
    document = yaml.safe_load(write_report(tmp_path / "report.yaml", HEADER, "comparison", checks).read_text())
    assert document["passed"] is False
    assert document["suite"] == "comparison"
    assert document["config_hash"] == "0123456789abcdef"


def test_timing_is_rounded(tmp_path):
    document = yaml.safe_load(write_timing(tmp_path / "timing.yaml", {"solve": 1.23456789}).read_text())
    assert document == {"solve": 1.234568}
