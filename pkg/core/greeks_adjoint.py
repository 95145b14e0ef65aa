import logging
import numpy as np

from dataclasses import dataclass
from scipy.interpolate import RegularGridInterpolator
from typing import Optional, Sequence, Tuple

from core.errors import ArgumentError, PayoffNotRegularizedError
from core.market_model import CoefficientField, MollifierSpec, UnivariatePayoff, mollify_and_cutoff
from core.pde_core import (
    SpaceTimeGrid, ValueSurface, fundamental_solution, integrate, solve_cauchy,
)

logger = logging.getLogger(__name__)

METHODS = ("direct", "adjoint", "payoff-shift")
MAX_ORDER = 2
PAYOFF_STEP = 1e-3


@dataclass(frozen=True)
class GreekRequest:
    """D^alpha v(t, x) for a multi-index alpha with |alpha| <= 2."""
    alpha: Tuple[int, ...]
    point: Tuple[float, ...]
    t: float
    method: str = "direct"

    def __post_init__(self):
        alpha = tuple(int(a) for a in self.alpha)
        point = tuple(float(x) for x in np.atleast_1d(self.point))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "point", point)
        if any(a < 0 for a in alpha) or sum(alpha) > MAX_ORDER:
            raise ArgumentError(f"Greeks are limited to multi-indices with |alpha| <= {MAX_ORDER}, got {alpha}.")
        if len(alpha) != len(point):
            raise ArgumentError("The multi-index and the point must have the same dimension.")
        if self.t <= 0:
            raise ArgumentError("Greeks are evaluated at positive times.")
        if self.method not in METHODS:
            raise ArgumentError(f"Unknown Greek method '{self.method}'.")

    @property
    def order(self) -> int:
        return sum(self.alpha)

    @property
    def axes(self) -> Tuple[int, ...]:
        """The differentiated axes, one entry per derivative."""
        return tuple(i for i, a in enumerate(self.alpha) for _ in range(a))

    @property
    def label(self) -> str:
        return "".join(str(a) for a in self.alpha)


def _shift(values: np.ndarray, axis: int, offset: int) -> np.ndarray:
    """values[..., i + offset, ...] on the nodes 1..N-2 of the axis."""
    n = values.shape[axis]
    index = [slice(None)] * values.ndim
    index[axis] = slice(1 + offset, n - 1 + offset)
    return values[tuple(index)]


def _trim(values: np.ndarray, axis: int) -> np.ndarray:
    return _shift(values, axis, 0)


def derivative_field(values: np.ndarray, spacing: Sequence[float], alpha: Tuple[int, ...]):
    """
    Centered difference quotient D^alpha on a lattice array.

    Returns the field and, per axis, the index offset of its first node; the field
    covers nodes 1..N-2 along every differentiated axis.
    """
    axes = [i for i, a in enumerate(alpha) for _ in range(a)]
    if not axes:
        return values, [0] * values.ndim
    if len(axes) == 1:
        i = axes[0]
        field_ = (_shift(values, i, 1) - _shift(values, i, -1)) / (2.0 * spacing[i])
    elif axes[0] == axes[1]:
        i = axes[0]
        field_ = (_shift(values, i, 1) - 2.0 * _trim(values, i) + _shift(values, i, -1)) / spacing[i] ** 2
    else:
        i, j = axes
        up = _shift(values, i, 1)
        down = _shift(values, i, -1)
        field_ = (_shift(up, j, 1) - _shift(up, j, -1) - _shift(down, j, 1) + _shift(down, j, -1))
        field_ = field_ / (4.0 * spacing[i] * spacing[j])
    offsets = [1 if i in axes else 0 for i in range(values.ndim)]
    return field_, offsets


def finite_difference(surface: ValueSurface, req: GreekRequest) -> float:
    """
    D^alpha v at req.point and the stored time req.t: centered differences on the
    grid, then multilinear interpolation to the point.

    Raises:
        ArgumentError: if the difference stencil does not fit around the point.
    """
    grid = surface.grid
    if len(req.alpha) != grid.ndim:
        raise ArgumentError(f"Request is {len(req.alpha)}-dimensional, the surface {grid.ndim}-dimensional.")
    field_, offsets = derivative_field(surface.layer(req.t), grid.spacing, req.alpha)
    axes = [axis[offset:axis.shape[0] - offset] for axis, offset in zip(grid.axes(), offsets)]
    point = np.asarray(req.point)
    inside = all(a[0] - 1e-12 <= p <= a[-1] + 1e-12 for a, p in zip(axes, point))
    if not inside:
        raise ArgumentError(f"The difference stencil for alpha={req.alpha} does not fit around {req.point}.")
    point = np.clip(point, [a[0] for a in axes], [a[-1] for a in axes])
    return float(RegularGridInterpolator(axes, field_, method="linear")(point[None, :])[0])


def default_width(grid: SpaceTimeGrid) -> float:
    return 2.0 * max(grid.spacing)


def regularize(payoff: UnivariatePayoff, grid: SpaceTimeGrid, R: float = 50.0) -> UnivariatePayoff:
    """Mollifies a payoff with the default width 2h of the grid."""
    return mollify_and_cutoff(payoff, MollifierSpec(eps=2.0 * max(grid.spacing), R=R))


def _check_regular(payoff: UnivariatePayoff):
    if not getattr(payoff, "smooth", False):
        raise PayoffNotRegularizedError(
            f"Payoff '{getattr(payoff, 'name', payoff)}' is not regularized; "
            "apply mollify_and_cutoff (or regularize) before computing adjoint Greeks."
        )


def _density(A: CoefficientField, source, grid: SpaceTimeGrid, width: float) -> np.ndarray:
    """Adjoint density p*(t, .; x) started from a bump at the source; final layer."""
    return fundamental_solution(A, source, grid, width, adjoint=True).final


def _payoff_derivative(payoff, mesh: np.ndarray, alpha: Tuple[int, ...]) -> np.ndarray:
    """D^alpha f at the mesh nodes by centered differences of the smooth payoff."""
    axes = [i for i, a in enumerate(alpha) for _ in range(a)]
    step = PAYOFF_STEP
    unit = np.eye(mesh.shape[1])
    if not axes:
        return payoff(mesh)
    if len(axes) == 1:
        e = unit[axes[0]] * step
        return (payoff(mesh + e) - payoff(mesh - e)) / (2.0 * step)
    ei, ej = unit[axes[0]] * step, unit[axes[1]] * step
    return (payoff(mesh + ei + ej) - payoff(mesh + ei - ej) - payoff(mesh - ei + ej) + payoff(mesh - ei - ej)) / (
        4.0 * step ** 2)


def greek_via_adjoint(A: CoefficientField, payoff: UnivariatePayoff, req: GreekRequest, grid: SpaceTimeGrid,
                      width: Optional[float] = None) -> float:
    """
    D^alpha v(t, x) through the adjoint density p*(t, y; x), the solution of the
    adjoint equation started from a normalized bump of width w0 at x.

    method="adjoint" computes int f D^alpha_x p* dy, differencing densities started
    from x +- h e_i. method="payoff-shift" moves the derivatives onto the payoff,
    int D^alpha f p* dy; the two agree exactly only for constant coefficients.
    method="direct" differentiates the forward solve.

    Raises:
        PayoffNotRegularizedError: for a payoff that was not mollified.
    """
    _check_regular(payoff)
    if req.method == "direct":
        return compute_greek(A, payoff, req, grid)
    grid = grid.with_horizon(req.t)

    width = default_width(grid) if width is None else width
    mesh = grid.mesh()
    spacing = grid.spacing
    solve_grid = grid.with_stable_steps(A.max_norm(mesh))
    x = np.asarray(req.point)
    logger.debug("Adjoint Greek alpha=%s at %s, t=%g (%s).", req.alpha, req.point, req.t, req.method)

    if req.method == "payoff-shift":
        shifted = _payoff_derivative(payoff, mesh, req.alpha).reshape(grid.shape)
        return integrate(shifted * _density(A, x, solve_grid, width), spacing)

    values = payoff(mesh).reshape(grid.shape)

    def represented(source):
        return integrate(values * _density(A, source, solve_grid, width), spacing)

    axes = req.axes
    unit = np.eye(grid.ndim)
    if not axes:
        return represented(x)
    if len(axes) == 1:
        e = unit[axes[0]] * spacing[axes[0]]
        return (represented(x + e) - represented(x - e)) / (2.0 * spacing[axes[0]])
    i, j = axes
    ei, ej = unit[i] * spacing[i], unit[j] * spacing[j]
    if i == j:
        return (represented(x + ei) - 2.0 * represented(x) + represented(x - ei)) / spacing[i] ** 2
    return (represented(x + ei + ej) - represented(x + ei - ej) - represented(x - ei + ej)
            + represented(x - ei - ej)) / (4.0 * spacing[i] * spacing[j])


def compute_greek(A: CoefficientField, payoff: UnivariatePayoff, req: GreekRequest, grid: SpaceTimeGrid,
                  width: Optional[float] = None) -> float:
    """Dispatches on req.method; direct Greeks do not require a mollified payoff."""
    if req.method == "direct":
        grid = grid.with_horizon(req.t)
        surface = solve_cauchy(A, payoff, grid.with_stable_steps(A.max_norm(grid.mesh())))
        return finite_difference(surface, req)
    return greek_via_adjoint(A, payoff, req, grid, width)


def adjoint_identity_residual(A: CoefficientField, forward_point: Tuple[float, Sequence[float]],
                              adjoint_point: Tuple[float, Sequence[float]], alpha: Sequence[int],
                              grid: SpaceTimeGrid, width: Optional[float] = None) -> float:
    """
    |D^alpha_x p(t, x; s, y) - D^alpha_x p*(s, y; t, x)| for t > s.

    p is the forward fundamental solution from a bump at y, differentiated at x by
    centered differences. p* is the adjoint fundamental solution from a bump at x,
    read at y; its x-derivative is taken by differencing densities started from
    x +- h e_i. (The same derivative in y carries a factor (-1)^|alpha| for
    translation-invariant coefficients.)

    Raises:
        ArgumentError: if t <= s or a point lies outside the grid.
    """
    t, x = float(forward_point[0]), np.atleast_1d(np.asarray(forward_point[1], dtype=float))
    s, y = float(adjoint_point[0]), np.atleast_1d(np.asarray(adjoint_point[1], dtype=float))
    if t <= s:
        raise ArgumentError(f"The forward time {t} must exceed the adjoint time {s}.")
    alpha = tuple(int(a) for a in alpha)
    req = GreekRequest(alpha, tuple(x), t - s)

    grid = grid.with_horizon(t - s)
    grid = grid.with_stable_steps(A.max_norm(grid.mesh()))
    width = default_width(grid) if width is None else width

    forward = fundamental_solution(A, y, grid, width)
    lhs = finite_difference(forward, req)

    def density_at_y(source) -> float:
        surface = fundamental_solution(A, source, grid, width, adjoint=True)
        return float(surface.interpolate(y[None, :])[0])

    unit = np.eye(grid.ndim)
    axes = req.axes
    h = grid.spacing
    if not axes:
        rhs = density_at_y(x)
    elif len(axes) == 1:
        e = unit[axes[0]] * h[axes[0]]
        rhs = (density_at_y(x + e) - density_at_y(x - e)) / (2.0 * h[axes[0]])
    elif axes[0] == axes[1]:
        e = unit[axes[0]] * h[axes[0]]
        rhs = (density_at_y(x + e) - 2.0 * density_at_y(x) + density_at_y(x - e)) / h[axes[0]] ** 2
    else:
        i, j = axes
        ei, ej = unit[i] * h[i], unit[j] * h[j]
        rhs = (density_at_y(x + ei + ej) - density_at_y(x + ei - ej) - density_at_y(x - ei + ej)
               + density_at_y(x - ei - ej)) / (4.0 * h[i] * h[j])
    return abs(lhs - rhs)


def greek_table(A: CoefficientField, payoff: UnivariatePayoff, requests: Sequence[GreekRequest],
                grid: SpaceTimeGrid, width: Optional[float] = None):
    """Rows (t, x..., alpha, method, value) for a batch of requests."""
    return [(req.t, *req.point, req.label, req.method, compute_greek(A, payoff, req, grid, width))
            for req in requests]
