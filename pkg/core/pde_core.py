import logging
import math
import numpy as np
import scipy.sparse as sp

from dataclasses import dataclass, field, replace
from functools import lru_cache
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import splu
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from core.errors import ArgumentError, ConfigurationError, DivergenceError
from core.market_model import COORDINATES, CoefficientField

logger = logging.getLogger(__name__)

C_STAB = 0.9
SCHEMES = ("explicit", "crank-nicolson")
CROSS_STENCILS = ("centered", "monotone")
TIME_TOLERANCE = 1e-9

InitialData = Union[Callable[[np.ndarray], np.ndarray], np.ndarray]
BoundaryHook = Callable[[np.ndarray, float], None]


@dataclass(frozen=True)
class SpaceTimeGrid:
    """
    A uniform tensor lattice on a box, plus a uniform time partition of [0, T].

    stored_layers is the number of evenly spaced time layers (always including
    the first and last) a solve keeps; None keeps every layer.
    """
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    nodes: Tuple[int, ...]
    final_time: float
    steps: int = 1
    stored_layers: Optional[int] = None
    coordinates: str = "normal"

    def __post_init__(self):
        lower = tuple(float(x) for x in np.atleast_1d(self.lower))
        upper = tuple(float(x) for x in np.atleast_1d(self.upper))
        nodes = tuple(int(x) for x in np.atleast_1d(self.nodes))
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "nodes", nodes)

        if not (len(lower) == len(upper) == len(nodes)):
            raise ArgumentError("Grid bounds and node counts must have the same dimension.")
        if any(n < 3 for n in nodes):
            raise ConfigurationError(f"Every dimension needs at least 3 nodes, got {nodes}.")
        if any(lo >= hi for lo, hi in zip(lower, upper)):
            raise ConfigurationError("Grid lower bounds must be below upper bounds.")
        if not self.final_time > 0:
            raise ConfigurationError("Final time must be positive.")
        if self.steps < 1:
            raise ConfigurationError("A grid needs at least one time step.")
        if self.stored_layers is not None and self.stored_layers < 2:
            raise ConfigurationError("Store at least the first and the last layer.")
        if self.coordinates not in COORDINATES:
            raise ArgumentError(f"Unknown coordinates '{self.coordinates}'.")

    @classmethod
    def from_spacing(cls, lower: Sequence[float], upper: Sequence[float], spacing: Sequence[float],
                     final_time: float, **kwargs) -> "SpaceTimeGrid":
        """Builds a grid whose node counts give (at most) the requested spacing."""
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        spacing = np.broadcast_to(np.asarray(spacing, dtype=float), lower.shape)
        nodes = np.ceil((upper - lower) / spacing - 1e-9).astype(int) + 1
        return cls(tuple(lower), tuple(upper), tuple(np.maximum(nodes, 3)), final_time, **kwargs)

    @property
    def ndim(self) -> int:
        return len(self.nodes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.nodes

    @property
    def size(self) -> int:
        return int(np.prod(self.nodes))

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.lower, self.upper, self.nodes))

    @property
    def time_step(self) -> float:
        return self.final_time / self.steps

    @property
    def spatial_key(self) -> Tuple:
        return (self.lower, self.upper, self.nodes)

    def axes(self) -> List[np.ndarray]:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.lower, self.upper, self.nodes)]

    def mesh(self) -> np.ndarray:
        """All nodes as an (N, n) array in C order (last axis fastest)."""
        grids = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([g.reshape(-1) for g in grids], axis=1)

    @property
    def stored_indices(self) -> np.ndarray:
        if self.stored_layers is None or self.stored_layers >= self.steps + 1:
            return np.arange(self.steps + 1)
        return np.unique(np.round(np.linspace(0, self.steps, self.stored_layers)).astype(int))

    @property
    def stored_times(self) -> np.ndarray:
        return self.stored_indices * self.time_step

    def stable_steps(self, max_norm: float, c_stab: float = C_STAB) -> int:
        """Fewest steps with k <= c_stab * min h^2 / (2 n max||A||)."""
        if max_norm <= 0:
            return 1
        k_max = c_stab * min(self.spacing) ** 2 / (2 * self.ndim * max_norm)
        return max(1, math.ceil(self.final_time / k_max - 1e-12))

    def with_stable_steps(self, max_norm: float, c_stab: float = C_STAB) -> "SpaceTimeGrid":
        return replace(self, steps=self.stable_steps(max_norm, c_stab))

    def with_horizon(self, final_time: float) -> "SpaceTimeGrid":
        return replace(self, final_time=float(final_time))

    def check_stability(self, max_norm: float, c_stab: float = C_STAB):
        needed = self.stable_steps(max_norm, c_stab)
        if self.steps < needed:
            raise ConfigurationError(
                f"Explicit stepping is unstable: k={self.time_step:.3e} needs at least {needed} steps "
                f"(have {self.steps}); refine time or select the crank-nicolson scheme."
            )

    def contains(self, point) -> bool:
        point = np.asarray(point, dtype=float)
        return bool(np.all(point >= np.asarray(self.lower) - 1e-12) and
                    np.all(point <= np.asarray(self.upper) + 1e-12))

    def nearest_index(self, point) -> Tuple[int, ...]:
        point = np.asarray(point, dtype=float)
        index = np.rint((point - np.asarray(self.lower)) / np.asarray(self.spacing)).astype(int)
        return tuple(int(i) for i in np.clip(index, 0, np.asarray(self.nodes) - 1))


@dataclass(eq=False)
class ValueSurface:
    """Nodal values at the stored time layers of a grid; values has shape (layers, *nodes)."""
    grid: SpaceTimeGrid
    times: np.ndarray
    values: np.ndarray
    metadata: Dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.times.shape[0],) + self.grid.shape:
            raise ArgumentError(
                f"Surface values of shape {self.values.shape} do not match {len(self.times)} layers "
                f"on a {self.grid.shape} grid."
            )
        if not np.all(np.isfinite(self.values)):
            raise DivergenceError("Surface contains non-finite values.")
        self.values.setflags(write=False)

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def axes(self) -> List[np.ndarray]:
        """Node coordinates per axis, in the surface's own coordinates."""
        axes = self.grid.axes()
        return [np.exp(a) for a in axes] if self.grid.coordinates == "lognormal" else axes

    def time_index(self, t: float) -> int:
        matches = np.flatnonzero(np.abs(self.times - t) <= TIME_TOLERANCE * max(1.0, self.grid.final_time))
        if matches.size == 0:
            raise ArgumentError(f"Time {t} is not a stored layer of this surface.")
        return int(matches[0])

    def layer(self, t: Optional[float] = None) -> np.ndarray:
        return self.final if t is None else self.values[self.time_index(t)]

    def interpolate(self, points, t: Optional[float] = None) -> np.ndarray:
        """Multilinear interpolation of a stored layer at (m, n) points in grid coordinates."""
        interpolator = RegularGridInterpolator(self.grid.axes(), self.layer(t), method="linear")
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if not all(self.grid.contains(p) for p in points):
            raise ArgumentError("Interpolation point outside the grid.")
        return interpolator(points)


# --- Difference operators ---

def _first_difference(m: int, h: float) -> sp.csr_matrix:
    rows = np.arange(1, m - 1)
    data = np.concatenate([np.full(m - 2, -0.5 / h), np.full(m - 2, 0.5 / h)])
    return sp.csr_matrix((data, (np.concatenate([rows, rows]), np.concatenate([rows - 1, rows + 1]))),
                         shape=(m, m))


def _second_difference(m: int, h: float) -> sp.csr_matrix:
    rows = np.arange(1, m - 1)
    data = np.concatenate([np.full(m - 2, 1.0), np.full(m - 2, -2.0), np.full(m - 2, 1.0)]) / h ** 2
    cols = np.concatenate([rows - 1, rows, rows + 1])
    return sp.csr_matrix((data, (np.tile(rows, 3), cols)), shape=(m, m))


def _one_sided(m: int, h: float, forward: bool) -> sp.csr_matrix:
    if forward:
        rows = np.arange(0, m - 1)
        return sp.csr_matrix((np.concatenate([np.full(m - 1, -1.0), np.full(m - 1, 1.0)]) / h,
                              (np.concatenate([rows, rows]), np.concatenate([rows, rows + 1]))), shape=(m, m))
    rows = np.arange(1, m)
    return sp.csr_matrix((np.concatenate([np.full(m - 1, -1.0), np.full(m - 1, 1.0)]) / h,
                          (np.concatenate([rows, rows]), np.concatenate([rows - 1, rows]))), shape=(m, m))


class DifferenceOperators:
    """
    Sparse difference operators on the flattened (C-order) lattice of a grid.

    Axis operators are Kronecker products of 1-D stencils. Rows of nodes on the
    boundary of the box are handled by `interior`: assembled operators zero
    them and the solver fills them by extrapolation or a boundary hook.
    """
    def __init__(self, lower: Tuple[float, ...], upper: Tuple[float, ...], nodes: Tuple[int, ...]):
        self.nodes = nodes
        self.spacing = tuple((hi - lo) / (n - 1) for lo, hi, n in zip(lower, upper, nodes))
        self.size = int(np.prod(nodes))
        self.first = [self._along(d, _first_difference(n, h)) for d, (n, h) in enumerate(zip(nodes, self.spacing))]
        self.second = [self._along(d, _second_difference(n, h)) for d, (n, h) in enumerate(zip(nodes, self.spacing))]
        self.forward = [self._along(d, _one_sided(n, h, True)) for d, (n, h) in enumerate(zip(nodes, self.spacing))]
        self.backward = [self._along(d, _one_sided(n, h, False)) for d, (n, h) in enumerate(zip(nodes, self.spacing))]

        interior = np.ones(nodes, dtype=bool)
        for d in range(len(nodes)):
            index = [slice(None)] * len(nodes)
            index[d] = [0, nodes[d] - 1]
            interior[tuple(index)] = False
        self.interior = interior.reshape(-1)
        self.interior_projector = sp.diags(self.interior.astype(float))
        self._mixed = {}

    def _along(self, axis: int, stencil: sp.csr_matrix) -> sp.csr_matrix:
        before = int(np.prod(self.nodes[:axis]))
        after = int(np.prod(self.nodes[axis + 1:]))
        return sp.kron(sp.kron(sp.identity(before), stencil), sp.identity(after), format="csr")

    def cross(self, i: int, j: int) -> sp.csr_matrix:
        """Centered 4-point stencil for the mixed derivative."""
        key = ("centered", i, j)
        if key not in self._mixed:
            self._mixed[key] = (self.first[i] @ self.first[j]).tocsr()
        return self._mixed[key]

    def cross_monotone(self, i: int, j: int, positive: bool) -> sp.csr_matrix:
        """7-point stencils with nonnegative off-centre weights for a_ij > 0 (or < 0)."""
        key = ("monotone", i, j, positive)
        if key not in self._mixed:
            if positive:
                op = self.forward[i] @ self.forward[j] + self.backward[i] @ self.backward[j]
            else:
                op = self.forward[i] @ self.backward[j] + self.backward[i] @ self.forward[j]
            self._mixed[key] = (0.5 * op).tocsr()
        return self._mixed[key]


@lru_cache(maxsize=16)
def difference_operators(lower: Tuple[float, ...], upper: Tuple[float, ...],
                         nodes: Tuple[int, ...]) -> DifferenceOperators:
    return DifferenceOperators(lower, upper, nodes)


def operators_for(grid: SpaceTimeGrid) -> DifferenceOperators:
    return difference_operators(*grid.spatial_key)


def assemble_operator(ops: DifferenceOperators, a: np.ndarray, b: Optional[np.ndarray] = None,
                      c: Optional[np.ndarray] = None, cross: str = "centered") -> sp.csr_matrix:
    """
    L v = sum_ij a_ij v_ij + sum_i b_i v_i + c v with nodal coefficients,
    a of shape (N, n, n), b of shape (N, n), c of shape (N,). Boundary rows are zero.
    """
    if cross not in CROSS_STENCILS:
        raise ConfigurationError(f"Unknown cross-derivative stencil '{cross}'.")
    n = a.shape[1]
    operator = sp.csr_matrix((ops.size, ops.size))
    for i in range(n):
        if np.any(a[:, i, i] != 0):
            operator = operator + sp.diags(a[:, i, i]) @ ops.second[i]
        for j in range(i + 1, n):
            a_ij = a[:, i, j]
            if not np.any(a_ij != 0):
                continue
            if cross == "centered":
                operator = operator + sp.diags(2.0 * a_ij) @ ops.cross(i, j)
            else:
                operator = operator + sp.diags(2.0 * np.maximum(a_ij, 0.0)) @ ops.cross_monotone(i, j, True)
                operator = operator + sp.diags(2.0 * np.minimum(a_ij, 0.0)) @ ops.cross_monotone(i, j, False)
    if b is not None:
        for i in range(n):
            if np.any(b[:, i] != 0):
                operator = operator + sp.diags(b[:, i]) @ ops.first[i]
    if c is not None and np.any(c != 0):
        operator = operator + sp.diags(c)
    return (ops.interior_projector @ operator).tocsr()


def assemble_divergence_operator(ops: DifferenceOperators, a: np.ndarray, cross: str = "centered") -> sp.csr_matrix:
    """L* u = sum_ij D_ij (a_ij u): differences applied to the products a_ij u."""
    n = a.shape[1]
    operator = sp.csr_matrix((ops.size, ops.size))
    for i in range(n):
        operator = operator + ops.second[i] @ sp.diags(a[:, i, i])
        for j in range(i + 1, n):
            if not np.any(a[:, i, j] != 0):
                continue
            stencil = ops.cross(i, j) if cross == "centered" else ops.cross_monotone(i, j, True)
            operator = operator + stencil @ sp.diags(2.0 * a[:, i, j])
    return (ops.interior_projector @ operator).tocsr()


def extrapolate_boundary(values: np.ndarray):
    """
    Sets boundary nodes by linear extrapolation along each axis (zero second normal derivative).

    Both ends of an axis are computed from the values before either is written;
    on a 3-node axis each end reads the other.
    """
    for axis in range(values.ndim):
        def at(k):
            index = [slice(None)] * values.ndim
            index[axis] = k
            return tuple(index)
        lower = 2.0 * values[at(1)] - values[at(2)]
        upper = 2.0 * values[at(-2)] - values[at(-3)]
        values[at(0)] = lower
        values[at(-1)] = upper


def integrate(values: np.ndarray, spacing: Sequence[float]) -> float:
    """Trapezoid rule over every axis of a lattice array."""
    result = values
    for h in spacing:
        result = np.trapezoid(result, dx=h, axis=0)
    return float(result)


def max_row_norm(a: np.ndarray) -> float:
    return float(np.abs(a).sum(axis=2).max()) if a.size else 0.0


def _initial_values(data: InitialData, grid: SpaceTimeGrid, mesh: np.ndarray) -> np.ndarray:
    if callable(data):
        values = np.asarray(data(mesh), dtype=float).reshape(-1)
    else:
        values = np.asarray(data, dtype=float).reshape(-1)
    if values.shape[0] != grid.size:
        raise ArgumentError(f"Initial data has {values.shape[0]} values for a grid of {grid.size} nodes.")
    if not np.all(np.isfinite(values)):
        raise ArgumentError("Initial data is not finite on the grid.")
    return values


def march(grid: SpaceTimeGrid, initial: np.ndarray, advance: Callable[[np.ndarray, int], np.ndarray],
          boundary: Optional[BoundaryHook] = None, metadata: Optional[Dict] = None,
          observer: Optional[Callable[[np.ndarray, int], None]] = None) -> ValueSurface:
    """
    Generic time loop shared by the linear and the control solvers.

    advance maps the flattened layer k to layer k+1 (interior nodes). The
    boundary hook (default: linear extrapolation) then fills the boundary.
    observer, when given, sees every stored layer before it is recorded.
    """
    boundary = boundary or (lambda values, t: extrapolate_boundary(values))
    stored = set(int(i) for i in grid.stored_indices)
    k = grid.time_step
    layers, times = [], []

    current = initial.copy()
    if observer is not None and 0 in stored:
        observer(current, 0)
    if 0 in stored:
        layers.append(current.reshape(grid.shape).copy())
        times.append(0.0)

    for step in range(1, grid.steps + 1):
        current = advance(current, step - 1)
        shaped = current.reshape(grid.shape)
        boundary(shaped, step * k)
        if not np.all(np.isfinite(current)):
            raise DivergenceError(f"Non-finite values at time index {step}.", time_index=step)
        if step in stored:
            if observer is not None:
                observer(current, step)
            layers.append(shaped.copy())
            times.append(step * k)

    return ValueSurface(grid=grid, times=np.asarray(times), values=np.stack(layers), metadata=dict(metadata or {}))


def _linear_stepper(grid: SpaceTimeGrid, operator: sp.csr_matrix, scheme: str, max_norm: float,
                    c_stab: float) -> Callable[[np.ndarray, int], np.ndarray]:
    k = grid.time_step
    if scheme == "explicit":
        grid.check_stability(max_norm, c_stab)
        return lambda v, step: v + k * (operator @ v)
    if scheme == "crank-nicolson":
        identity = sp.identity(grid.size, format="csc")
        lu = splu((identity - 0.5 * k * operator).tocsc())
        rhs = (identity + 0.5 * k * operator).tocsr()
        return lambda v, step: lu.solve(rhs @ v)
    raise ConfigurationError(f"Unknown scheme '{scheme}'; expected one of {SCHEMES}.")


def solve_linear(grid: SpaceTimeGrid, a: np.ndarray, initial: np.ndarray, b: Optional[np.ndarray] = None,
                 c: Optional[np.ndarray] = None, scheme: str = "explicit", cross: str = "centered",
                 c_stab: float = C_STAB, boundary: Optional[BoundaryHook] = None,
                 metadata: Optional[Dict] = None) -> ValueSurface:
    """Solves v_tau = sum a_ij v_ij + sum b_i v_i + c v from nodal coefficient arrays."""
    ops = operators_for(grid)
    operator = assemble_operator(ops, a, b, c, cross)
    stepper = _linear_stepper(grid, operator, scheme, max_row_norm(a), c_stab)
    logger.info("Linear solve on %s nodes, %d steps (k=%.3e, %s).", grid.shape, grid.steps, grid.time_step, scheme)
    return march(grid, initial, stepper, boundary=boundary, metadata=metadata)


def _check_dimension(A: CoefficientField, grid: SpaceTimeGrid):
    if A.n != grid.ndim:
        raise ArgumentError(f"Field '{A.name}' is {A.n}-dimensional but the grid is {grid.ndim}-dimensional.")


def solve_cauchy(A: CoefficientField, data: InitialData, grid: SpaceTimeGrid, scheme: str = "explicit",
                 cross: str = "centered", c_stab: float = C_STAB,
                 metadata: Optional[Dict] = None) -> ValueSurface:
    """
    Solves v_t = sum_ij a_ij(x) v_{x_i x_j}, v(0, x) = data(x), on the grid.

    Second derivatives use centered differences, mixed ones the centered 4-point
    stencil (or the monotone 7-point variant). The far field is handled by linear
    extrapolation on the boundary of the box.

    Raises:
        ConfigurationError: explicit stepping beyond the stability bound.
        DivergenceError: non-finite values during the solve.
    """
    _check_dimension(A, grid)
    mesh = grid.mesh()
    a = A.evaluate(mesh)
    initial = _initial_values(data, grid, mesh)
    info = {"kind": "forward", "field": A.name, "payoff": getattr(data, "name", "array")}
    info.update(metadata or {})
    return solve_linear(grid, a, initial, scheme=scheme, cross=cross, c_stab=c_stab, metadata=info)


def coefficient_derivatives(A: CoefficientField, mesh: np.ndarray, spacing: Sequence[float]):
    """
    Drift b_j = 2 sum_i d_i a_ij and potential c = sum_ij d_ij a_ij of the
    expanded adjoint, by centered differences of A with step h/2.
    """
    n = A.n
    steps = 0.5 * np.asarray(spacing, dtype=float)
    unit = np.eye(n)
    b = np.zeros((mesh.shape[0], n))
    c = np.zeros(mesh.shape[0])
    centre = A.evaluate(mesh)

    for i in range(n):
        up = A.evaluate(mesh + steps[i] * unit[i])
        down = A.evaluate(mesh - steps[i] * unit[i])
        first = (up - down) / (2.0 * steps[i])
        b += 2.0 * first[:, i, :]
        c += (up[:, i, i] - 2.0 * centre[:, i, i] + down[:, i, i]) / steps[i] ** 2
        for j in range(n):
            if j == i:
                continue
            shift_i, shift_j = steps[i] * unit[i], steps[j] * unit[j]
            mixed = (A.evaluate(mesh + shift_i + shift_j)[:, i, j] - A.evaluate(mesh + shift_i - shift_j)[:, i, j]
                     - A.evaluate(mesh - shift_i + shift_j)[:, i, j] + A.evaluate(mesh - shift_i - shift_j)[:, i, j])
            c += mixed / (4.0 * steps[i] * steps[j])
    return b, c


def solve_adjoint(A: CoefficientField, terminal: InitialData, grid: SpaceTimeGrid, scheme: str = "explicit",
                  cross: str = "centered", form: str = "expanded", c_stab: float = C_STAB,
                  metadata: Optional[Dict] = None) -> ValueSurface:
    """
    Solves the adjoint u_tau = sum_ij d_ij (a_ij u) in backward time tau = T - t,
    starting from the terminal data.

    form="expanded" expands the product rule into a non-divergence operator with
    drift and potential (see coefficient_derivatives); form="conservative"
    differences the products a_ij u directly and conserves discrete mass.
    For constant coefficients both reduce to the forward operator.
    """
    _check_dimension(A, grid)
    mesh = grid.mesh()
    a = A.evaluate(mesh)
    initial = _initial_values(terminal, grid, mesh)
    info = {"kind": "adjoint", "form": form, "field": A.name, "payoff": getattr(terminal, "name", "array")}
    info.update(metadata or {})

    if form == "expanded":
        if A.is_constant:
            return solve_linear(grid, a, initial, scheme=scheme, cross=cross, c_stab=c_stab, metadata=info)
        b, c = coefficient_derivatives(A, mesh, grid.spacing)
        return solve_linear(grid, a, initial, b=b, c=c, scheme=scheme, cross=cross, c_stab=c_stab, metadata=info)
    if form == "conservative":
        operator = assemble_divergence_operator(operators_for(grid), a, cross)
        stepper = _linear_stepper(grid, operator, scheme, max_row_norm(a), c_stab)
        return march(grid, initial, stepper, metadata=info)
    raise ConfigurationError(f"Unknown adjoint form '{form}'.")


@dataclass(frozen=True)
class _GaussianBump:
    centre: Tuple[float, ...]
    width: float
    scale: float = 1.0

    def __call__(self, points: np.ndarray) -> np.ndarray:
        offset = np.atleast_2d(points) - np.asarray(self.centre)
        return self.scale * np.exp(-0.5 * np.sum(offset ** 2, axis=1) / self.width ** 2)


def normalized_bump(grid: SpaceTimeGrid, source, width: float) -> np.ndarray:
    """A Gaussian of standard deviation `width` centred at source, with unit trapezoid mass on the grid."""
    source = np.atleast_1d(np.asarray(source, dtype=float))
    if source.shape != (grid.ndim,):
        raise ArgumentError(f"Source must have {grid.ndim} coordinates.")
    if not grid.contains(source):
        raise ArgumentError(f"Source {tuple(source)} lies outside the grid.")
    if width < 2.0 * max(grid.spacing):
        raise ArgumentError(f"Bump width {width} is below twice the grid spacing {max(grid.spacing)}.")
    bump = _GaussianBump(tuple(source), float(width))(grid.mesh())
    return bump / integrate(bump.reshape(grid.shape), grid.spacing)


def fundamental_solution(A: CoefficientField, source, grid: SpaceTimeGrid, width: float, adjoint: bool = False,
                         scheme: str = "explicit", form: str = "expanded") -> ValueSurface:
    """
    Approximate fundamental solution: the Cauchy (or adjoint) solve started from a
    normalized Gaussian bump of width w0 >= 2 max h centred at the source.
    """
    initial = normalized_bump(grid, source, width)
    metadata = {"source": [float(x) for x in np.atleast_1d(source)], "width": float(width)}
    if adjoint:
        return solve_adjoint(A, initial, grid, scheme=scheme, form=form, metadata=metadata)
    return solve_cauchy(A, initial, grid, scheme=scheme, metadata=metadata)


@dataclass(frozen=True)
class Window:
    """A space-time box [t_start, t_end] x prod [lower_i, upper_i]."""
    t_start: float
    t_end: float
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self):
        if self.t_end <= self.t_start:
            raise ArgumentError("Window end time must follow its start time.")


def _window_indices(grid: SpaceTimeGrid, window: Window) -> List[Tuple[int, int]]:
    bounds = []
    for d, (lo, hi) in enumerate(zip(window.lower, window.upper)):
        h = grid.spacing[d]
        first = math.ceil((lo - grid.lower[d]) / h - 1e-9)
        last = math.floor((hi - grid.lower[d]) / h + 1e-9)
        if first < 1 or last > grid.nodes[d] - 2 or last - first < 2:
            raise ArgumentError("The window must lie strictly inside the grid and span at least three nodes.")
        bounds.append((first, last))
    return bounds


def _boundary_flux(a: np.ndarray, U: np.ndarray, V: np.ndarray, h: Sequence[float],
                   bounds: List[Tuple[int, int]]) -> float:
    """
    Outward flux of F_i = sum_j [a_ij U V_j - V d_j(a_ij U)] through the faces of
    the window box, taken half a cell outside its first and last nodes.

    The diagonal part on the face between p and p + e_i is
    (W_p V_{p+e_i} - V_p W_{p+e_i}) / h_i with W = a_ii U, the exact summation-by-parts
    partner of the 3-point second difference. Mixed parts average the two nodal values.
    """
    n = len(h)
    total = 0.0
    for i in range(n):
        W = a[..., i, i] * U
        along = (W * np.roll(V, -1, axis=i) - V * np.roll(W, -1, axis=i)) / h[i]
        for j in range(n):
            if j == i or not np.any(a[..., i, j] != 0):
                continue
            Wj = a[..., i, j] * U
            nodal = Wj * np.gradient(V, h[j], axis=j) - V * np.gradient(Wj, h[j], axis=j)
            along = along + 0.5 * (nodal + np.roll(nodal, -1, axis=i))

        face_area = float(np.prod([h[d] for d in range(n) if d != i]))
        for index, sign in ((bounds[i][1], 1.0), (bounds[i][0] - 1, -1.0)):
            face = [slice(first, last + 1) for first, last in bounds]
            face[i] = index
            total += sign * face_area * float(np.sum(along[tuple(face)]))
    return total


def greens_residual(A: CoefficientField, u: ValueSurface, v: ValueSurface, window: Window) -> float:
    """
    Discrete check of the divergence identity v L*u - u Lv = (uv)_t - sum_i d_i F_i,
    F_i = sum_j [a_ij u v_j - v d_j(a_ij u)], integrated over the window.

    v is a forward solve in time t; u is an adjoint solve in backward time, so
    u at time t is read from its layer tau = T_u - t. Both surfaces need every
    time step inside the window stored. The mass sums over the window nodes and
    the face fluxes pair up exactly in space, so the residual
    |sum(uv)(t_end) - sum(uv)(t_start) - int boundary flux dt| measures the
    trapezoid-in-time error of the pairing and the solver's consistency.
    """
    if u.grid.spatial_key != v.grid.spatial_key:
        raise ArgumentError("Forward and adjoint surfaces live on different spatial grids.")
    grid = v.grid
    n = grid.ndim
    h = grid.spacing
    bounds = _window_indices(grid, window)
    box = tuple(slice(first, last + 1) for first, last in bounds)
    cell = float(np.prod(h))
    a = A.evaluate(grid.mesh()).reshape(grid.shape + (n, n))

    times = [t for t in v.times if window.t_start - TIME_TOLERANCE <= t <= window.t_end + TIME_TOLERANCE]
    if len(times) < 2:
        raise ArgumentError("The window must contain at least two stored layers.")
    if not np.allclose(np.diff(times), grid.time_step, rtol=1e-6):
        raise ArgumentError("Every time step inside the window must be stored; solve with stored_layers=None.")

    masses, fluxes = [], []
    for t in times:
        U = u.layer(u.grid.final_time - t)
        V = v.layer(t)
        masses.append(cell * float(np.sum((U * V)[box])))
        fluxes.append(_boundary_flux(a, U, V, h, bounds))

    flux_integral = float(np.trapezoid(fluxes, x=times))
    return abs(masses[-1] - masses[0] - flux_integral)
