import io
import logging
import os
import struct
import tempfile
import numpy as np
import yaml

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

from core.errors import ArgumentError
from core.hjb_control import PolicyMap
from core.path_engine import Ensemble
from core.pde_core import SpaceTimeGrid, ValueSurface

logger = logging.getLogger(__name__)

MAGIC = b"VSRF"
FORMAT_VERSION = 1
COORDINATE_CODES = {"normal": 0, "lognormal": 1}

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ArtifactHeader:
    config_hash: str
    seed: int
    command: str

    def line(self) -> str:
        return f"# config_hash={self.config_hash} seed={self.seed} command={self.command}"


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Writes to a temporary file next to the target, then renames it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(temp_name, path)
    except BaseException:
        if os.path.exists(temp_name):
            os.unlink(temp_name)
        raise
    logger.debug("Wrote %s (%d bytes).", path, len(data))
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def format_value(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


# --- CSV ---

def render_csv(header: ArtifactHeader, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buffer = io.StringIO(newline="")
    buffer.write(header.line() + "\n")
    buffer.write(",".join(columns) + "\n")
    for row in rows:
        if len(row) != len(columns):
            raise ArgumentError(f"Row has {len(row)} fields, expected {len(columns)}.")
        buffer.write(",".join(format_value(v) for v in row) + "\n")
    return buffer.getvalue()


def write_csv(path: PathLike, header: ArtifactHeader, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    return atomic_write_text(path, render_csv(header, columns, rows))


def read_csv(path: PathLike) -> Tuple[Dict[str, str], List[str], List[List[str]]]:
    """(header fields, column names, rows as strings)."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    fields = dict(item.split("=", 1) for item in lines[0].lstrip("# ").split())
    columns = lines[1].split(",")
    return fields, columns, [line.split(",") for line in lines[2:] if line]


def _coordinate_names(ndim: int, names: Sequence[str] = None) -> List[str]:
    return list(names) if names is not None else [f"x{i + 1}" for i in range(ndim)]


def write_surface_csv(surface: ValueSurface, path: PathLike, header: ArtifactHeader,
                      names: Sequence[str] = None) -> Path:
    """One row per stored time and node: t, node coordinates (prices on a lognormal grid), value."""
    grid = surface.grid
    mesh = grid.mesh()
    if grid.coordinates == "lognormal":
        mesh = np.exp(mesh)
        names = names if names is not None else [f"s{i + 1}" for i in range(grid.ndim)]

    def rows():
        for t, layer in zip(surface.times, surface.values):
            for point, value in zip(mesh, layer.reshape(-1)):
                yield (float(t), *point.tolist(), float(value))

    columns = ["t", *_coordinate_names(grid.ndim, names), "value"]
    return write_csv(path, header, columns, rows())


def write_policy_csv(policy: PolicyMap, path: PathLike, header: ArtifactHeader,
                     names: Sequence[str] = None) -> Path:
    width = policy.candidates.shape[1]
    columns = ["t", *_coordinate_names(policy.grid.ndim, names), *[f"control{i + 1}" for i in range(width)]]
    return write_csv(path, header, columns, policy.rows())


def write_greek_table(rows: Sequence[Tuple], path: PathLike, header: ArtifactHeader, ndim: int) -> Path:
    columns = ["t", *_coordinate_names(ndim), "alpha", "method", "value"]
    return write_csv(path, header, columns, rows)


def write_ensemble_csv(ensemble: Ensemble, path: PathLike, header: ArtifactHeader) -> Path:
    """One row per path per checkpoint; per-path extras are repeated on every row of the path."""
    dim = ensemble.values.shape[2]
    scalar_extras = {k: v for k, v in ensemble.extras.items() if v.ndim == 1}
    layered_extras = {k: v for k, v in ensemble.extras.items() if v.ndim == 2}

    def rows():
        for p in range(ensemble.paths):
            for c, t in enumerate(ensemble.times):
                yield (p, float(t), *ensemble.values[p, c].tolist(),
                       *[float(v[p, c]) for v in layered_extras.values()],
                       *[float(v[p]) for v in scalar_extras.values()])

    columns = ["path", "t", *[f"v{i + 1}" for i in range(dim)], *layered_extras, *scalar_extras]
    return write_csv(path, header, columns, rows())


# --- Binary surfaces ---

def encode_surface(surface: ValueSurface) -> bytes:
    """Little-endian binary layout; values are stored in C order."""
    grid = surface.grid
    step_index = np.rint(surface.times / grid.time_step).astype("<u4")
    parts = [
        MAGIC,
        struct.pack("<5I", FORMAT_VERSION, COORDINATE_CODES[grid.coordinates], grid.ndim, len(surface.times),
                    grid.steps),
        np.asarray(grid.nodes, dtype="<u4").tobytes(),
        step_index.tobytes(),
        struct.pack("<d", grid.final_time),
        np.asarray(grid.lower, dtype="<f8").tobytes(),
        np.asarray(grid.upper, dtype="<f8").tobytes(),
        np.asarray(surface.times, dtype="<f8").tobytes(),
        np.ascontiguousarray(surface.values, dtype="<f8").tobytes(),
    ]
    return b"".join(parts)


def decode_surface(data: bytes) -> ValueSurface:
    """
    Raises:
        ArgumentError: for a buffer that is not a surface dump or is truncated.
    """
    if data[:4] != MAGIC:
        raise ArgumentError("Not a binary surface file.")
    version, coordinates, ndim, ntimes, steps = struct.unpack_from("<5I", data, 4)
    if version != FORMAT_VERSION:
        raise ArgumentError(f"Unsupported surface format version {version}.")
    offset = 24

    def take(dtype: str, count: int) -> np.ndarray:
        nonlocal offset
        size = np.dtype(dtype).itemsize * count
        if offset + size > len(data):
            raise ArgumentError("Truncated surface file.")
        array = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += size
        return array

    nodes = tuple(int(n) for n in take("<u4", ndim))
    take("<u4", ntimes)
    final_time = float(take("<f8", 1)[0])
    lower = tuple(take("<f8", ndim).tolist())
    upper = tuple(take("<f8", ndim).tolist())
    times = take("<f8", ntimes).astype(float)
    values = take("<f8", ntimes * int(np.prod(nodes))).astype(float).reshape((ntimes,) + nodes)
    if offset != len(data):
        raise ArgumentError("Trailing bytes after the surface values.")

    coordinate_name = {code: name for name, code in COORDINATE_CODES.items()}[coordinates]
    grid = SpaceTimeGrid(lower, upper, nodes, final_time, steps=steps,
                         stored_layers=ntimes if ntimes < steps + 1 else None, coordinates=coordinate_name)
    return ValueSurface(grid=grid, times=times, values=values)


def write_surface_binary(surface: ValueSurface, path: PathLike) -> Path:
    return atomic_write_bytes(path, encode_surface(surface))


def read_surface_binary(path: PathLike) -> ValueSurface:
    return decode_surface(Path(path).read_bytes())


# --- YAML documents ---

def write_yaml(path: PathLike, document: Dict) -> Path:
    return atomic_write_text(path, yaml.safe_dump(document, sort_keys=False))


def write_report(path: PathLike, header: ArtifactHeader, suite: str, checks: List[Dict]) -> Path:
    document = {
        "suite": suite,
        "config_hash": header.config_hash,
        "seed": header.seed,
        "passed": all(check["passed"] for check in checks),
        "checks": checks,
    }
    return write_yaml(path, document)


def write_timing(path: PathLike, timings: Dict[str, float]) -> Path:
    return write_yaml(path, {name: round(float(seconds), 6) for name, seconds in timings.items()})
