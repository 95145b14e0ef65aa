import itertools
import logging
import math
import numpy as np

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from core.errors import ArgumentError, HypothesisError
from core.market_model import CoefficientField, UnivariatePayoff, gauss_hermite_smoothing
from core.pde_core import SpaceTimeGrid, ValueSurface, solve_cauchy

logger = logging.getLogger(__name__)

ORDER_TOLERANCE = 1e-10
GAMMA_THRESHOLD = 1e-6
CRITICAL_TOLERANCE = 1e-8
HESSIAN_TOLERANCE = 1e-6
HESSIAN_STEP = 1e-2
BRACKET_STEP = 1e-5
RANK_TOLERANCE = 1e-8
VIOLATION_THRESHOLD = -1e-4
SEARCH_PAD_LENGTHS = 5.0
VERDICTS = ("ordered-strict-11", "ordered", "unordered")


# --- Coefficient order and comparison ---

@dataclass(frozen=True)
class MatrixOrderReport:
    psd_gap: float
    entry11_gap: float
    verdict: str
    samples: int


def check_matrix_order(A: CoefficientField, A_prime: CoefficientField, points=None, count: int = 64,
                       box: float = 5.0, seed: int = 0) -> MatrixOrderReport:
    """
    Samples A' - A: its smallest eigenvalue (psd_gap) and the smallest a'_11 - a_11.
    The verdict is "unordered" when psd_gap < -1e-10, "ordered-strict-11" when
    additionally entry11_gap > 1e-10, and "ordered" otherwise.
    """
    if A.n != A_prime.n:
        raise ArgumentError(f"Fields have different dimensions ({A.n} and {A_prime.n}).")
    if points is None:
        points = np.random.default_rng(seed).uniform(-box, box, size=(count, A.n))
    points = np.atleast_2d(np.asarray(points, dtype=float))
    difference = A_prime.evaluate(points) - A.evaluate(points)
    difference = 0.5 * (difference + np.swapaxes(difference, 1, 2))
    psd_gap = float(np.linalg.eigvalsh(difference).min())
    entry11_gap = float(difference[:, 0, 0].min())

    if psd_gap < -ORDER_TOLERANCE:
        verdict = "unordered"
    elif entry11_gap > ORDER_TOLERANCE:
        verdict = "ordered-strict-11"
    else:
        verdict = "ordered"
    return MatrixOrderReport(psd_gap=psd_gap, entry11_gap=entry11_gap, verdict=verdict, samples=points.shape[0])


@dataclass(eq=False)
class ComparisonReport:
    """Gap v' - v of the two value surfaces at the final time of the grid."""
    order: MatrixOrderReport
    min_gap: float
    strict_fraction: float
    positive_on_gamma: bool
    within_hypotheses: bool
    notes: List[str]
    lower: ValueSurface
    upper: ValueSurface

    def gap(self) -> np.ndarray:
        return self.upper.final - self.lower.final


def _interior_mask(shape: Tuple[int, ...], margin: int = 1) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[tuple(slice(margin, n - margin) for n in shape)] = True
    return mask


def second_difference(values: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Centered second difference along an axis; zero on the two end layers."""
    out = np.zeros_like(values)
    inner = [slice(None)] * values.ndim
    up, down = list(inner), list(inner)
    inner[axis], up[axis], down[axis] = slice(1, -1), slice(2, None), slice(None, -2)
    out[tuple(inner)] = (values[tuple(up)] - 2.0 * values[tuple(inner)] + values[tuple(down)]) / h ** 2
    return out


def verify_comparison(A: CoefficientField, A_prime: CoefficientField, payoff: Callable, grid: SpaceTimeGrid,
                      t_eval: Optional[float] = None, scheme: str = "explicit") -> ComparisonReport:
    """
    Solves both Cauchy problems and reports the gap v' - v at t_eval (default: the
    grid horizon): its minimum over interior nodes, the fraction of interior nodes
    with a gap above h^2 among those with discrete Gamma d^2 v / dx_1^2 > 1e-6, and
    whether the gap is positive on all of them.

    Runs with a non-strict order or multivariate data are reported but tagged
    as outside the theorem hypotheses.

    Raises:
        HypothesisError: if the coefficients are not ordered.
    """
    if t_eval is not None:
        grid = grid.with_horizon(t_eval)
    order = check_matrix_order(A, A_prime, points=grid.mesh())
    if order.verdict == "unordered":
        raise HypothesisError(
            f"A' - A is not PSD (min eigenvalue {order.psd_gap:.3e}); the comparison hypotheses are not met."
        )

    notes = []
    if order.verdict != "ordered-strict-11":
        notes.append("outside theorem hypotheses: a'_11 - a_11 is not strictly positive")
    univariate = isinstance(payoff, UnivariatePayoff) and payoff.axis == 0
    if not univariate:
        notes.append("outside theorem hypotheses: data must depend on x_1 only")

    mesh = grid.mesh()
    max_norm = max(A.max_norm(mesh), A_prime.max_norm(mesh))
    if scheme == "explicit" and grid.steps < grid.stable_steps(max_norm):
        grid = grid.with_stable_steps(max_norm)
    lower = solve_cauchy(A, payoff, grid, scheme=scheme)
    upper = solve_cauchy(A_prime, payoff, grid, scheme=scheme)

    gap = upper.final - lower.final
    interior = _interior_mask(grid.shape)
    gamma = second_difference(lower.final, 0, grid.spacing[0])
    active = interior & (gamma > GAMMA_THRESHOLD)
    h2 = max(grid.spacing) ** 2

    report = ComparisonReport(
        order=order,
        min_gap=float(gap[interior].min()),
        strict_fraction=float(np.mean(gap[active] > h2)) if active.any() else 1.0,
        positive_on_gamma=bool(np.all(gap[active] > 0)),
        within_hypotheses=not notes,
        notes=notes,
        lower=lower,
        upper=upper,
    )
    logger.info("Comparison (%s): min gap %.3e, strict fraction %.3f.", order.verdict, report.min_gap,
                report.strict_fraction)
    return report


# --- Convexity criteria ---

def numerical_hessian(f: Callable[[np.ndarray], np.ndarray], points: np.ndarray,
                      step: float = HESSIAN_STEP) -> np.ndarray:
    """
    (m, n, n) Hessians by central differences with Richardson extrapolation
    over the steps h and h/2.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[1]
    unit = np.eye(n)

    def at(h):
        centre = f(points)
        out = np.zeros((points.shape[0], n, n))
        for i in range(n):
            ei = unit[i] * h
            out[:, i, i] = (f(points + ei) - 2.0 * centre + f(points - ei)) / h ** 2
            for j in range(i + 1, n):
                ej = unit[j] * h
                mixed = (f(points + ei + ej) - f(points + ei - ej) - f(points - ei + ej) + f(points - ei - ej))
                out[:, i, j] = out[:, j, i] = mixed / (4.0 * h ** 2)
        return out

    return (4.0 * at(0.5 * step) - at(step)) / 3.0


@dataclass(frozen=True, eq=False)
class CriterionFunction:
    """g(x) = Tr(A(x) D^2 f_eps(x)) with f_eps the Gauss-Hermite mollification of f."""
    A: CoefficientField
    f: Callable
    eps: float = 0.0
    step: float = HESSIAN_STEP

    def smoothed(self) -> Callable:
        return gauss_hermite_smoothing(self.f, self.eps, self.A.n)

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        hessian = numerical_hessian(self.smoothed(), points, self.step)
        return np.einsum("mij,mji->m", self.A.evaluate(points), hessian)


@dataclass(frozen=True)
class Witness:
    """
    A replayable convexity violation: the directional second difference of the
    criterion (or of a solved surface) at point along direction with the given step.
    """
    kind: str
    point: Tuple[float, ...]
    direction: Tuple[float, ...]
    step: float
    value: float
    eps: float = 0.0
    payoff: Optional[Dict] = None
    grid: Optional[Dict] = None

    def to_dict(self) -> Dict:
        data = {
            "kind": self.kind,
            "point": list(self.point),
            "direction": list(self.direction),
            "step": self.step,
            "value": self.value,
            "eps": self.eps,
        }
        if self.payoff is not None:
            data["payoff"] = self.payoff
        if self.grid is not None:
            data["grid"] = self.grid
        return data


@dataclass(eq=False)
class ConvexityReport:
    mode: str
    passed: bool
    min_value: float
    witness: Optional[Witness] = None
    nodes_checked: int = 0
    notes: List[str] = field(default_factory=list)


def _lattice(box: float, nodes: int, n: int) -> SpaceTimeGrid:
    return SpaceTimeGrid((-box,) * n, (box,) * n, (nodes,) * n, 1.0)


def _directional(g: Callable, point: np.ndarray, direction: np.ndarray, step: float) -> float:
    point = np.asarray(point, dtype=float)
    offset = step * np.asarray(direction, dtype=float)
    values = g(np.stack([point + offset, point, point - offset]))
    return float((values[0] - 2.0 * values[1] + values[2]) / step ** 2)


def _lattice_hessians(values: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """(*shape, n, n) discrete Hessians; only interior nodes are meaningful."""
    n = values.ndim
    out = np.zeros(values.shape + (n, n))
    for i in range(n):
        out[..., i, i] = second_difference(values, i, spacing[i])
        first_i = np.gradient(values, spacing[i], axis=i)
        for j in range(i + 1, n):
            out[..., i, j] = out[..., j, i] = np.gradient(first_i, spacing[j], axis=j)
    return out


def _hessian_check(g: CriterionFunction, grid: SpaceTimeGrid, mask: np.ndarray, mode: str) -> ConvexityReport:
    mesh = grid.mesh()
    values = g(mesh).reshape(grid.shape)
    hessians = _lattice_hessians(values, grid.spacing)
    mask = mask & _interior_mask(grid.shape)
    checked = int(mask.sum())
    if checked == 0:
        return ConvexityReport(mode=mode, passed=True, min_value=0.0, nodes_checked=0,
                               notes=["no nodes to check"])

    eigenvalues, eigenvectors = np.linalg.eigh(hessians[mask])
    tolerance = HESSIAN_TOLERANCE * max(1.0, float(np.abs(hessians[mask]).max()))
    smallest = eigenvalues[:, 0]
    worst = int(np.argmin(smallest))
    min_value = float(smallest[worst])
    if min_value >= -tolerance:
        return ConvexityReport(mode=mode, passed=True, min_value=min_value, nodes_checked=checked)

    point = mesh[np.flatnonzero(mask.reshape(-1))[worst]]
    direction = eigenvectors[worst][:, 0]
    step = min(grid.spacing)
    value = _directional(g, point, direction, step)
    witness = Witness(kind="criterion", point=tuple(point.tolist()), direction=tuple(direction.tolist()),
                      step=step, value=value, eps=g.eps)
    logger.info("Convexity criterion (%s) fails at %s: %.3e.", mode, witness.point, value)
    return ConvexityReport(mode=mode, passed=False, min_value=min_value, witness=witness, nodes_checked=checked)


def convexity_criterion_global(A: CoefficientField, f: Callable, eps: float = 0.0, box: float = 3.0,
                               nodes: int = 31) -> ConvexityReport:
    """
    Checks that g = Tr(A D^2 f_eps) has a PSD discrete Hessian at every interior
    node of the lattice [-box, box]^n; the first violation is returned as a witness.
    """
    grid = _lattice(box, nodes, A.n)
    return _hessian_check(CriterionFunction(A, f, eps), grid, np.ones(grid.shape, dtype=bool), "global")


def critical_set(f: Callable, grid: SpaceTimeGrid, tolerance: float = CRITICAL_TOLERANCE) -> np.ndarray:
    """Nodes where ||D^2 f|| <= tolerance times the largest ||D^2 f|| on the lattice."""
    hessians = numerical_hessian(f, grid.mesh())
    norms = np.linalg.norm(hessians, axis=(1, 2))
    scale = float(norms.max())
    if scale == 0.0:
        return np.ones(grid.shape, dtype=bool)
    return (norms <= tolerance * scale).reshape(grid.shape)


def convexity_criterion_critical(A: CoefficientField, f: Callable, eps: float = 0.0, box: float = 3.0,
                                 nodes: int = 31, tolerance: float = CRITICAL_TOLERANCE) -> ConvexityReport:
    """
    The critical-set criterion: the PSD check of Tr(A D^2 f) is applied only at
    nodes of C_r = {D^2 f = 0}. Each check reads the difference stencil around the
    node, which is the neighborhood of C_r that is examined. An empty C_r passes.
    """
    grid = _lattice(box, nodes, A.n)
    g = CriterionFunction(A, f, eps)
    mask = critical_set(g.smoothed(), grid, tolerance)
    report = _hessian_check(g, grid, mask, "critical-set")
    if not mask.any():
        report.notes.append("critical set is empty; the criterion holds vacuously")
    return report


def local_convexity_preservation(A: CoefficientField, f: Callable, box: float = 3.0, nodes: int = 31,
                                 tolerance: float = CRITICAL_TOLERANCE) -> ConvexityReport:
    """
    Wherever a lattice direction u has D_uu f(x) = 0, checks D_uu Tr(A D^2 f)(x) >= 0.
    """
    grid = _lattice(box, nodes, A.n)
    g = CriterionFunction(A, f)
    mesh = grid.mesh()
    step = min(grid.spacing)
    directions = _lattice_directions(A.n)
    f_values = np.asarray(f(mesh), dtype=float)
    g_values = g(mesh)
    scale = max(1.0, float(np.abs(f_values).max()))

    worst, witness, checked = np.inf, None, 0
    interior = _interior_mask(grid.shape).reshape(-1)
    for direction in directions:
        unit = direction / np.linalg.norm(direction)
        offset = step * unit
        f_second = (f(mesh + offset) - 2.0 * f_values + f(mesh - offset)) / step ** 2
        flat = interior & (np.abs(f_second) <= tolerance * scale / step ** 2)
        if not flat.any():
            continue
        g_second = (g(mesh[flat] + offset) - 2.0 * g_values[flat] + g(mesh[flat] - offset)) / step ** 2
        checked += int(flat.sum())
        k = int(np.argmin(g_second))
        if g_second[k] < worst:
            worst = float(g_second[k])
            if worst < -HESSIAN_TOLERANCE * max(1.0, float(np.abs(g_second).max())):
                witness = Witness(kind="criterion", point=tuple(mesh[flat][k].tolist()),
                                  direction=tuple(unit.tolist()), step=step, value=worst)
    worst = 0.0 if worst == np.inf else worst
    return ConvexityReport(mode="local-preservation", passed=witness is None, min_value=worst,
                           witness=witness, nodes_checked=checked)


# --- Violation search ---

def _lattice_directions(n: int) -> List[np.ndarray]:
    """e_i and e_i +- e_j as integer lattice offsets."""
    unit = np.eye(n, dtype=int)
    directions = [unit[i] for i in range(n)]
    for i, j in itertools.combinations(range(n), 2):
        directions.append(unit[i] + unit[j])
        directions.append(unit[i] - unit[j])
    return directions


@dataclass(frozen=True)
class _HingeSum:
    """f(x) = sum_k max(<w_k, x> - b_k, 0)."""
    weights: Tuple[Tuple[float, ...], ...]
    offsets: Tuple[float, ...]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(points)
        w = np.asarray(self.weights)
        return np.maximum(points @ w.T - np.asarray(self.offsets), 0.0).sum(axis=1)

    def to_dict(self) -> Dict:
        return {"family": "hinge-sum", "weights": [list(w) for w in self.weights], "offsets": list(self.offsets)}


def _draw_hinges(rng: np.random.Generator, n: int, family: str) -> _HingeSum:
    count = int(rng.integers(1, 4))
    if family == "univariate":
        weights = np.zeros((count, n))
        weights[:, 0] = rng.choice((-1.0, 1.0), size=count)
    else:
        weights = rng.standard_normal((count, n))
        weights /= np.linalg.norm(weights, axis=1, keepdims=True)
    offsets = rng.uniform(-1.0, 1.0, size=count)
    return _HingeSum(tuple(map(tuple, weights.tolist())), tuple(offsets.tolist()))


def _surface_violation(values: np.ndarray, grid: SpaceTimeGrid, window: Tuple[slice, ...]):
    """Most negative normalized lattice second difference over the nodes of the scan window."""
    spacing = np.asarray(grid.spacing)
    best = (np.inf, None, None)
    for direction in _lattice_directions(grid.ndim):
        forward = np.roll(values, shift=tuple(-direction), axis=tuple(range(grid.ndim)))
        backward = np.roll(values, shift=tuple(direction), axis=tuple(range(grid.ndim)))
        length = float(np.linalg.norm(direction * spacing))
        second = ((forward - 2.0 * values + backward) / length ** 2)[window]
        index = np.unravel_index(int(np.argmin(second)), second.shape)
        if second[index] < best[0]:
            node = tuple(int(i) + w.start for i, w in zip(index, window))
            best = (float(second[index]), node, direction)
    return best


def _padded_search_grid(A: CoefficientField, box: float, nodes: int, t_small: float):
    """
    Solve grid for the violation search: the scan window [-box, box]^n widened
    by SEARCH_PAD_LENGTHS diffusion lengths sqrt(2 ||A|| t) on every side, on the
    window's own spacing, so the extrapolated edges do not reach the window.
    """
    n = A.n
    h = 2.0 * box / (nodes - 1)
    window_grid = SpaceTimeGrid((-box,) * n, (box,) * n, (nodes,) * n, t_small)
    reach = SEARCH_PAD_LENGTHS * math.sqrt(2.0 * A.max_norm(window_grid.mesh()) * t_small)
    extra = max(2, math.ceil(reach / h - 1e-9))
    grid = SpaceTimeGrid((-box - extra * h,) * n, (box + extra * h,) * n, (nodes + 2 * extra,) * n, t_small,
                         stored_layers=2)
    window = tuple(slice(extra, extra + nodes) for _ in range(n))
    return grid.with_stable_steps(A.max_norm(grid.mesh())), window


def _grid_dict(grid: SpaceTimeGrid) -> Dict:
    return {"lower": list(grid.lower), "upper": list(grid.upper), "nodes": list(grid.nodes),
            "final_time": grid.final_time, "steps": grid.steps}


def find_convexity_violation(A: CoefficientField, budget: int = 200, seed: int = 0, family: str = "hinge",
                             t_small: float = 0.1, box: float = 3.0, nodes: int = 41,
                             threshold: float = VIOLATION_THRESHOLD) -> Optional[Witness]:
    """
    Searches seeded hinge-sum payoffs for one whose solved value at t_small has a
    lattice directional second difference below threshold at a node of [-box, box]^n.
    Each payoff is solved on a padded grid so the scan never sees the box edges.
    family="univariate" restricts the hinges to the x_1 direction.

    Returns None when the budget is exhausted; that is not a proof of convexity.
    """
    if family not in ("hinge", "univariate"):
        raise ArgumentError(f"Unknown payoff family '{family}'.")
    grid, window = _padded_search_grid(A, box, nodes, t_small)
    rng = np.random.default_rng(seed)

    for attempt in range(budget):
        payoff = _draw_hinges(rng, A.n, family)
        surface = solve_cauchy(A, payoff, grid)
        value, node, direction = _surface_violation(surface.final, grid, window)
        if value < threshold:
            witness = _surface_witness("violation", grid, node, direction, value, payoff.to_dict())
            logger.info("Convexity violation after %d payoffs: %.3e at %s.", attempt + 1, value, witness.point)
            return witness
    logger.info("No convexity violation within %d payoffs.", budget)
    return None


def _surface_witness(kind: str, grid: SpaceTimeGrid, node, direction, value: float,
                     payoff: Optional[Dict] = None) -> Witness:
    axes = grid.axes()
    point = tuple(float(axes[d][i]) for d, i in enumerate(node))
    return Witness(kind=kind, point=point, direction=tuple(int(d) for d in direction),
                   step=float(np.linalg.norm(direction * np.asarray(grid.spacing))), value=value,
                   payoff=payoff, grid=_grid_dict(grid))


def solved_convexity(A: CoefficientField, f: Callable, t: float = 0.5, box: float = 3.0, nodes: int = 31,
                     threshold: float = VIOLATION_THRESHOLD) -> ConvexityReport:
    """
    Solves the Cauchy problem from f up to time t and scans the lattice directional
    second differences of v(t) over [-box, box]^n.

    The criteria predict convexity from the data alone; this reads it off the
    solution. Under a_11 = 1 + sin(x_2) / 2 and f = x_1^2 the solution is
    x_1^2 + 2t + (1 - e^-t) sin(x_2), which is not convex wherever sin(x_2) > 0,
    although the critical-set criterion passes there with an empty critical set.
    A failure carries a "solved" witness; replaying it needs f.
    """
    if t <= 0:
        raise ArgumentError(f"t must be positive, got {t}.")
    grid, window = _padded_search_grid(A, box, nodes, t)
    values = solve_cauchy(A, f, grid).final
    value, node, direction = _surface_violation(values, grid, window)
    checked = nodes ** A.n
    if value >= threshold:
        return ConvexityReport(mode="solved", passed=True, min_value=value, nodes_checked=checked)
    witness = _surface_witness("solved", grid, node, direction, value)
    logger.info("Solved surface loses convexity at %s: %.3e.", witness.point, value)
    return ConvexityReport(mode="solved", passed=False, min_value=value, witness=witness, nodes_checked=checked)


def replay_witness(witness: Witness, A: CoefficientField, payoff: Optional[Callable] = None) -> float:
    """
    Recomputes a witness value. Criterion and solved witnesses need the payoff
    they were found for; violation witnesses carry their hinge parameters and grid.
    """
    if witness.kind in ("criterion", "solved") and payoff is None:
        raise ArgumentError(f"Replaying a {witness.kind} witness needs its payoff.")
    if witness.kind == "criterion":
        return _directional(CriterionFunction(A, payoff, witness.eps), np.asarray(witness.point),
                            np.asarray(witness.direction), witness.step)

    if witness.kind == "violation":
        payoff = _HingeSum(tuple(map(tuple, witness.payoff["weights"])), tuple(witness.payoff["offsets"]))
    spec = witness.grid
    grid = SpaceTimeGrid(tuple(spec["lower"]), tuple(spec["upper"]), tuple(spec["nodes"]), spec["final_time"],
                         steps=spec["steps"], stored_layers=2)
    values = solve_cauchy(A, payoff, grid).final
    node = grid.nearest_index(witness.point)
    direction = np.asarray(witness.direction, dtype=int)
    forward = tuple(np.asarray(node) + direction)
    backward = tuple(np.asarray(node) - direction)
    return float((values[forward] - 2.0 * values[node] + values[backward]) / witness.step ** 2)


# --- Hormander condition ---

@dataclass(frozen=True)
class HormanderResult:
    satisfied: bool
    depth: Optional[int]
    rank: int
    singular_values: Tuple[float, ...]


def jacobian(V: Callable, x: np.ndarray, step: float = BRACKET_STEP) -> np.ndarray:
    """DV(x) by centered differences with step 1e-5 (1 + |x|)."""
    x = np.asarray(x, dtype=float)
    h = step * (1.0 + np.linalg.norm(x))
    columns = [(np.asarray(V(x + h * e), dtype=float) - np.asarray(V(x - h * e), dtype=float)) / (2.0 * h)
               for e in np.eye(x.shape[0])]
    return np.stack(columns, axis=1)


@dataclass(frozen=True)
class LieBracket:
    """[V, W](x) = DW(x) V(x) - DV(x) W(x)."""
    V: Callable
    W: Callable

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return jacobian(self.W, x) @ np.asarray(self.V(x), dtype=float) - \
            jacobian(self.V, x) @ np.asarray(self.W(x), dtype=float)


def _rank(vectors: List[np.ndarray]) -> Tuple[int, np.ndarray]:
    singular = np.linalg.svd(np.stack(vectors), compute_uv=False)
    if singular.size == 0 or singular[0] == 0.0:
        return 0, singular
    return int(np.sum(singular > RANK_TOLERANCE * singular[0])), singular


def hormander_rank(fields: Sequence[Callable], x, max_depth: int = 3,
                   drift: Optional[Callable] = None) -> HormanderResult:
    """
    Checks whether span{V_i(x)} together with iterated brackets reaches R^n.

    Level 0 spans the diffusion fields V_1..V_m (the drift V_0 is excluded); each
    further level brackets every field of the previous level with V_0..V_m.
    Returns the first depth at which the rank is n, or depth None.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.shape[0]
    if max_depth < 0:
        raise ArgumentError("max_depth must be nonnegative.")
    if not fields:
        raise ArgumentError("At least one diffusion field is needed.")

    generators = ([drift] if drift is not None else []) + list(fields)
    level = list(fields)
    vectors = [np.asarray(V(x), dtype=float) for V in level]
    rank, singular = _rank(vectors)
    if rank == n:
        return HormanderResult(True, 0, rank, tuple(singular.tolist()))

    for depth in range(1, max_depth + 1):
        level = [LieBracket(V, W) for W in level for V in generators]
        vectors.extend(np.asarray(B(x), dtype=float) for B in level)
        rank, singular = _rank(vectors)
        logger.debug("Hormander depth %d: rank %d of %d.", depth, rank, n)
        if rank == n:
            return HormanderResult(True, depth, rank, tuple(singular.tolist()))
    return HormanderResult(False, None, rank, tuple(singular.tolist()))
