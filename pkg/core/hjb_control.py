import itertools
import logging
import math
import numpy as np

from dataclasses import dataclass, replace
from scipy.interpolate import RegularGridInterpolator
from scipy.special import expit
from scipy.stats import norm
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

from core.errors import ArgumentError, ConfigurationError
from core.market_model import MarketModel, basket_volatility, eigen_factorize, smooth_indicator
from core.pde_core import (
    C_STAB, CROSS_STENCILS, SpaceTimeGrid, ValueSurface, march, operators_for,
)

logger = logging.getLogger(__name__)

STRATEGY_KINDS = ("smooth", "dyadic-piecewise", "vertex", "stop-loss")
CONTRACTS = ("classical", "symmetric")
CANDIDATE_MODES = ("rotated", "extended")
VERTEX_TOLERANCE = 1e-12
GAMMA_THRESHOLD = 1e-6
LOG_TWO = math.log(2.0)
BOUNDARY_TOLERANCE = 1e-12

# Symmetric passport controls, in candidate order: all in S, then nothing in S.
SYMMETRIC_CANDIDATES = np.array([[1.0], [0.0]])
FORCED_STRATEGIES = ("none", "full", "stop-loss")


# --- Strategies ---
# Rules are picklable callables so strategies can be shipped to Monte Carlo workers.
# Classical rules map (t, s) with s of shape (paths, n) to controls delta of shape
# (paths, n). Symmetric rules map (t, m_n, x_n) to the exposure w = Delta^S S_N.

@dataclass(frozen=True)
class _ConstantRule:
    values: Tuple[float, ...]

    def __call__(self, t, s):
        return np.broadcast_to(np.asarray(self.values), s.shape).copy()


@dataclass(frozen=True)
class _DyadicRule:
    horizon: float
    level: int
    values: Tuple[Tuple[float, ...], ...]

    def interval(self, t: float) -> int:
        count = 2 ** self.level
        return min(max(int(math.floor(t / self.horizon * count)), 0), count - 1)

    def __call__(self, t, s):
        return np.broadcast_to(np.asarray(self.values[self.interval(t)]), s.shape).copy()


@dataclass(frozen=True)
class _FractionRule:
    fraction: float

    def __call__(self, t, m, x):
        return self.fraction * x


@dataclass(frozen=True)
class _StopLossRule:
    def __call__(self, t, m, x):
        return np.where(2.0 - m <= 1.0, x, 0.0)


@dataclass(frozen=True)
class _SmoothStopLossRule:
    eps: float

    def __call__(self, t, m, x):
        s_n = 2.0 - np.asarray(m, dtype=float)
        with np.errstate(divide="ignore"):
            z1 = np.log(np.maximum(s_n, 0.0))
        return np.asarray(smooth_indicator(self.eps, z1, variant="bridge")) * x


@dataclass(frozen=True)
class _ZeroDiffusionRule:
    def __call__(self, t, m, x):
        return 0.5 * x * (2.0 - m)


@dataclass(frozen=True)
class StrategyField:
    """
    A trading strategy evaluated on an ensemble of states.

    Classical strategies return controls delta in [-1, 1]^n; symmetric ones
    return the exposure Delta^S S_N, which must lie in [0, X_N].
    """
    kind: str
    contract: str
    rule: Callable
    name: str = "strategy"
    level: Optional[int] = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ArgumentError(f"Unknown strategy kind '{self.kind}'.")
        if self.contract not in CONTRACTS:
            raise ArgumentError(f"Unknown contract '{self.contract}'.")

    def control(self, t: float, s) -> np.ndarray:
        if self.contract != "classical":
            raise ArgumentError(f"'{self.name}' is a symmetric-passport strategy.")
        s = np.atleast_2d(np.asarray(s, dtype=float))
        return np.asarray(self.rule(t, s), dtype=float)

    def exposure(self, t: float, m, x) -> np.ndarray:
        if self.contract != "symmetric":
            raise ArgumentError(f"'{self.name}' is a classical-passport strategy.")
        return np.asarray(self.rule(t, np.asarray(m, dtype=float), np.asarray(x, dtype=float)), dtype=float)

    def __call__(self, t: float, *state) -> np.ndarray:
        return self.control(t, *state) if self.contract == "classical" else self.exposure(t, *state)


def constant_strategy(delta: Sequence[float], name: str = "constant") -> StrategyField:
    delta = tuple(float(d) for d in np.atleast_1d(delta))
    if any(abs(d) > 1.0 + VERTEX_TOLERANCE for d in delta):
        raise ArgumentError("Classical passport controls must lie in [-1, 1].")
    return StrategyField("smooth", "classical", _ConstantRule(delta), name=name)


def dyadic_strategy(level: int, values, horizon: float) -> StrategyField:
    """Piecewise-constant control on the 2^level intervals [T i / 2^N, T (i+1) / 2^N)."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if level < 0 or values.shape[0] != 2 ** level:
        raise ArgumentError(f"A level-{level} dyadic strategy needs {2 ** max(level, 0)} interval values.")
    if np.any(np.abs(values) > 1.0 + VERTEX_TOLERANCE):
        raise ArgumentError("Classical passport controls must lie in [-1, 1].")
    rule = _DyadicRule(float(horizon), int(level), tuple(map(tuple, values)))
    signs = "".join("+" if v >= 0 else "-" for v in values[:, 0])
    return StrategyField("dyadic-piecewise", "classical", rule, name=f"dyadic[{signs}]", level=level)


def dyadic_battery(level: int = 2, horizon: float = 1.0) -> List[StrategyField]:
    """Every +-1 sign pattern on the 2^level intervals, for a single asset."""
    return [dyadic_strategy(level, list(signs), horizon)
            for signs in itertools.product((-1.0, 1.0), repeat=2 ** level)]


def vertex_strategy(model: MarketModel, marginal_signs: Sequence[float]) -> StrategyField:
    choice = optimal_passport_vertex(model, marginal_signs)
    return StrategyField("vertex", "classical", _ConstantRule(tuple(float(c) for c in choice.control)), name="vertex")


def fraction_strategy(fraction: float) -> StrategyField:
    """Constant share of the account held in S; 0 is all in M, 1 is all in S."""
    if not 0.0 <= fraction <= 1.0:
        raise ArgumentError("The invested fraction must lie in [0, 1].")
    return StrategyField("smooth", "symmetric", _FractionRule(float(fraction)), name=f"fraction[{fraction:g}]")


def stop_loss_strategy() -> StrategyField:
    return StrategyField("stop-loss", "symmetric", _StopLossRule(), name="stop-loss")


def smooth_stop_loss_strategy(eps: float) -> StrategyField:
    """The stop-loss rule with the indicator replaced by the smooth bridge of width eps in ln S_N."""
    if eps <= 0:
        raise ArgumentError("eps must be positive.")
    return StrategyField("smooth", "symmetric", _SmoothStopLossRule(float(eps)), name=f"stop-loss~{eps:g}")


def zero_diffusion_strategy() -> StrategyField:
    """Exposure X_N S_N / 2, which cancels the diffusion of the account."""
    return StrategyField("smooth", "symmetric", _ZeroDiffusionRule(), name="zero-diffusion")


def forced_strategy(forced: Union[str, StrategyField]) -> StrategyField:
    if isinstance(forced, StrategyField):
        return forced
    if forced == "none":
        return fraction_strategy(0.0)
    if forced == "full":
        return fraction_strategy(1.0)
    if forced == "stop-loss":
        return stop_loss_strategy()
    raise ArgumentError(f"Unknown forced strategy '{forced}'; expected one of {FORCED_STRATEGIES}.")


def named_strategy(name: str, model: Optional[MarketModel] = None, horizon: float = 1.0) -> StrategyField:
    """
    Parses a strategy name as used in run configurations.

    Symmetric: "none", "full", "stop-loss", "zero-diffusion", "fraction:<f>", "stop-loss~<eps>".
    Classical: "constant:<d1>,<d2>,...", "vertex:<sign1>,<sign2>,..." (needs the model),
    "dyadic:<pattern>" with a pattern of + and - signs, one per dyadic interval.
    """
    kind, _, argument = name.partition(":")
    if name in FORCED_STRATEGIES:
        return forced_strategy(name)
    if name == "zero-diffusion":
        return zero_diffusion_strategy()
    if name.startswith("stop-loss~"):
        return smooth_stop_loss_strategy(float(name.split("~", 1)[1]))
    if kind == "fraction" and argument:
        return fraction_strategy(float(argument))
    if kind == "constant" and argument:
        return constant_strategy([float(d) for d in argument.split(",")])
    if kind == "vertex" and argument:
        if model is None:
            raise ArgumentError("Vertex strategies need a market model.")
        return vertex_strategy(model, [float(d) for d in argument.split(",")])
    if kind == "dyadic" and argument and set(argument) <= {"+", "-"}:
        level = int(round(math.log2(len(argument))))
        if 2 ** level != len(argument):
            raise ArgumentError(f"A dyadic pattern needs a power-of-two length, got '{argument}'.")
        return dyadic_strategy(level, [1.0 if c == "+" else -1.0 for c in argument], horizon)
    raise ArgumentError(f"Unknown strategy '{name}'.")


def optimal_symmetric_strategy(s_n: float, x_s: float) -> float:
    """Delta^S = X_S I(S_N <= 1): everything in S while S is the weaker asset."""
    if not 0.0 <= s_n <= 2.0:
        raise ArgumentError(f"S_N must lie in [0, 2], got {s_n}.")
    if x_s < 0:
        raise ArgumentError("The account value must be nonnegative.")
    return float(x_s) if s_n <= 1.0 else 0.0


# --- Rotated vertices ---

@dataclass(frozen=True)
class VertexChoice:
    control: np.ndarray
    literal: np.ndarray
    clamped: bool
    basket_vol_literal: float
    basket_vol_clamped: float


def optimal_passport_vertex(model: MarketModel, marginal_signs: Sequence[float]) -> VertexChoice:
    """
    Q^T times the marginal signs. A rotated vertex can leave [-1, 1]^n for a
    generic Q; it is then clamped to the box, a warning is logged, and the
    basket volatility at the spot is reported for both the literal and the
    clamped control.
    """
    signs = np.asarray(marginal_signs, dtype=float)
    if signs.shape != (model.n,) or not np.all(np.isin(signs, (-1.0, 1.0))):
        raise ArgumentError(f"Expected {model.n} marginal signs in {{-1, 1}}.")

    literal = eigen_factorize(model).Q.T @ signs
    clamped = bool(np.any(np.abs(literal) > 1.0 + VERTEX_TOLERANCE))
    control = np.clip(literal, -1.0, 1.0)
    if clamped:
        logger.warning("Rotated vertex %s leaves [-1, 1]^%d; clamped to %s.",
                       np.round(literal, 6).tolist(), model.n, np.round(control, 6).tolist())
    return VertexChoice(
        control=control,
        literal=literal,
        clamped=clamped,
        basket_vol_literal=basket_volatility(model, model.spot, literal),
        basket_vol_clamped=basket_volatility(model, model.spot, control),
    )


def vertex_candidates(model: MarketModel, mode: str = "extended") -> np.ndarray:
    """
    The finite control set of the HJB sweep, lexicographically sorted.

    "rotated": Q^T {-1, 1}^n clamped to the box, plus 0.
    "extended": additionally the vertices of [-1, 1]^n.
    """
    if mode not in CANDIDATE_MODES:
        raise ConfigurationError(f"Unknown candidate mode '{mode}'.")
    Q = eigen_factorize(model).Q
    signs = np.array(list(itertools.product((-1.0, 1.0), repeat=model.n)))
    candidates = [np.clip(signs @ Q, -1.0, 1.0), np.zeros((1, model.n))]
    if mode == "extended":
        candidates.append(signs)
    stacked = np.round(np.vstack(candidates), 12) + 0.0
    unique = np.unique(stacked, axis=0)
    return unique[np.lexsort(unique.T[::-1])]


def maximize_basket_volatility_grid(model: MarketModel, s=None, resolution: int = 41) -> Tuple[np.ndarray, float]:
    """Exhaustive maximization of the basket volatility over a uniform control grid on [-1, 1]^n."""
    s = model.spot if s is None else np.asarray(s, dtype=float)
    axis = np.linspace(-1.0, 1.0, resolution)
    controls = np.array(list(itertools.product(axis, repeat=model.n)))
    weights = controls * model.sigma * s
    variances = np.einsum("ki,ij,kj->k", weights, model.rho, weights)
    best = int(np.argmax(variances))
    return controls[best], float(np.sqrt(max(variances[best], 0.0)))


# --- Policy storage ---

@dataclass(eq=False)
class PolicyMap:
    """Index of the applied candidate at every stored (time, node)."""
    grid: SpaceTimeGrid
    times: np.ndarray
    indices: np.ndarray
    candidates: np.ndarray
    contract: str

    def __post_init__(self):
        if self.indices.shape != (len(self.times),) + self.grid.shape:
            raise ArgumentError("Policy indices do not match the stored layers.")
        if self.contract == "classical" and np.any(np.abs(self.candidates) > 1.0 + VERTEX_TOLERANCE):
            raise ArgumentError("Classical policy candidates must lie in [-1, 1]^n.")
        if self.contract == "symmetric" and np.any((self.candidates < 0) | (self.candidates > 1)):
            raise ArgumentError("Symmetric policy fractions must lie in [0, 1].")

    def time_index(self, t: float) -> int:
        matches = np.flatnonzero(np.abs(self.times - t) <= 1e-9 * max(1.0, self.grid.final_time))
        if matches.size == 0:
            raise ArgumentError(f"Time {t} is not a stored policy layer.")
        return int(matches[0])

    def controls(self, t: Optional[float] = None) -> np.ndarray:
        """Controls on the grid at a stored time, shape (*nodes, control dimension)."""
        layer = self.indices[-1] if t is None else self.indices[self.time_index(t)]
        return self.candidates[layer]

    def control_at(self, point, t: Optional[float] = None) -> np.ndarray:
        return self.controls(t)[self.grid.nearest_index(point)]

    def rows(self):
        """(t, node coordinates..., control components...) for every stored time and node."""
        mesh = self.grid.mesh()
        for k, t in enumerate(self.times):
            controls = self.candidates[self.indices[k].reshape(-1)]
            for point, control in zip(mesh, controls):
                yield (float(t), *point.tolist(), *control.tolist())


class _Hamiltonians:
    """
    Evaluates candidate generators sum_ij a_ij(c) v_ij + sum_i b_i v_i on a layer.

    Derivatives are taken once per layer with the grid's sparse stencils and
    shared by all candidates; rows on the box boundary are zero. With
    cross="monotone" each candidate's mixed terms use the 7-point stencil
    matching the sign of its own a_ij.
    """
    def __init__(self, grid: SpaceTimeGrid, a: np.ndarray, b: np.ndarray, cross: str = "centered"):
        if cross not in CROSS_STENCILS:
            raise ConfigurationError(f"Unknown cross-derivative stencil '{cross}'.")
        self.ops = operators_for(grid)
        self.a = a
        self.b = b
        self.cross = cross
        self.interior = self.ops.interior

    def derivatives(self, v: np.ndarray) -> Dict[Tuple, np.ndarray]:
        n = len(self.ops.nodes)
        out = {}
        for i in range(n):
            out[(i, i)] = self.ops.second[i] @ v
            out[(i, -1)] = self.ops.first[i] @ v
            for j in range(i + 1, n):
                if not np.any(self.a[:, :, i, j] != 0):
                    continue
                if self.cross == "centered":
                    out[(i, j)] = self.ops.cross(i, j) @ v
                else:
                    out[(i, j, True)] = self.ops.cross_monotone(i, j, True) @ v
                    out[(i, j, False)] = self.ops.cross_monotone(i, j, False) @ v
        return out

    def evaluate(self, v: np.ndarray) -> np.ndarray:
        """(candidates, N) array of generator values."""
        d = self.derivatives(v)
        n = self.a.shape[-1]
        values = np.zeros(self.a.shape[:2])
        for i in range(n):
            values += self.a[:, :, i, i] * d[(i, i)] + self.b[:, :, i] * d[(i, -1)]
            for j in range(i + 1, n):
                a_ij = self.a[:, :, i, j]
                if (i, j) in d:
                    values += 2.0 * a_ij * d[(i, j)]
                elif (i, j, True) in d:
                    values += 2.0 * np.maximum(a_ij, 0.0) * d[(i, j, True)]
                    values += 2.0 * np.minimum(a_ij, 0.0) * d[(i, j, False)]
        return values * self.interior

    @property
    def max_norm(self) -> float:
        return float(np.abs(self.a).sum(axis=-1).max())


def _maximizing_march(grid: SpaceTimeGrid, hamiltonians: _Hamiltonians, initial: np.ndarray,
                      boundary=None, metadata: Optional[Dict] = None, c_stab: float = C_STAB,
                      record: Optional[Callable[[np.ndarray], np.ndarray]] = None):
    """
    Explicit sweep v <- v + k max_c H_c(v); ties go to the first candidate.

    record maps the candidate values of a stored layer to its policy layer
    (default: the argmax on the grid itself).
    """
    grid.check_stability(hamiltonians.max_norm, c_stab)
    k = grid.time_step
    record = record or (lambda values: np.argmax(values, axis=0).reshape(grid.shape))
    policies = []

    def advance(v, step):
        return v + k * hamiltonians.evaluate(v).max(axis=0)

    def observe(v, step):
        policies.append(record(hamiltonians.evaluate(v)))

    surface = march(grid, initial, advance, boundary=boundary, metadata=metadata, observer=observe)
    return surface, np.stack(policies)


# --- Classical passport ---

def passport_grid(model: MarketModel, horizon: float, p_nodes: int = 61, x_nodes: int = 21,
                  p0: float = 0.0, stored_layers: Optional[int] = 11, c_stab: float = C_STAB,
                  extra_max_norm: float = 0.0) -> SpaceTimeGrid:
    """
    Grid over (p, x_1..x_n) with x = ln s: p spans p0 +- 6 sigma_max sqrt(T) sum s,
    each x_i spans ln s_i +- 6 sigma_max sqrt(T). Steps satisfy the stability bound.
    """
    if model.n > 3:
        raise ConfigurationError("Classical passport grids are limited to n <= 3 assets.")
    spread = 6.0 * float(model.sigma.max()) * math.sqrt(horizon)
    if spread == 0.0:
        spread = 1.0
    p_half = spread * float(model.spot.sum())
    lower = [p0 - p_half] + [math.log(s) - spread for s in model.spot]
    upper = [p0 + p_half] + [math.log(s) + spread for s in model.spot]
    grid = SpaceTimeGrid(tuple(lower), tuple(upper), (p_nodes,) + (x_nodes,) * model.n, horizon,
                         stored_layers=stored_layers)
    a, _ = _passport_coefficients(model, grid, vertex_candidates(model, "extended"))
    return grid.with_stable_steps(max(float(np.abs(a).sum(axis=-1).max()), extra_max_norm), c_stab)


def _passport_coefficients(model: MarketModel, grid: SpaceTimeGrid, controls: np.ndarray):
    """
    Generator coefficients of (Pi, x = ln S) under each control, from Ito's formula:
    a_pp = 1/2 sum_ij w_i rho_ij w_j with w = delta sigma s, a_{p x_i} = 1/2 sigma_i (rho w)_i,
    a_{x_i x_j} = 1/2 sigma_i rho_ij sigma_j and drift b_{x_i} = -1/2 sigma_i^2.

    controls has shape (candidates, n) or (candidates, N, n).
    """
    n = model.n
    mesh = grid.mesh()
    s = np.exp(mesh[:, 1:])
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 2:
        controls = np.broadcast_to(controls[:, None, :], (controls.shape[0], mesh.shape[0], n))

    weights = controls * model.sigma * s[None, :, :]
    correlated = weights @ model.rho
    a = np.zeros(controls.shape[:2] + (n + 1, n + 1))
    a[:, :, 0, 0] = 0.5 * np.sum(correlated * weights, axis=-1)
    a[:, :, 0, 1:] = 0.5 * model.sigma * correlated
    a[:, :, 1:, 0] = a[:, :, 0, 1:]
    a[:, :, 1:, 1:] = 0.5 * model.covariance
    b = np.zeros(controls.shape[:2] + (n + 1,))
    b[:, :, 1:] = -0.5 * model.sigma ** 2
    return a, b


def _check_passport_grid(model: MarketModel, grid: SpaceTimeGrid):
    if model.n > 3:
        raise ConfigurationError("Classical passport grids are limited to n <= 3 assets.")
    if grid.ndim != model.n + 1:
        raise ArgumentError(f"A passport grid for {model.n} assets needs {model.n + 1} dimensions (p, x).")


def _hinge_in_p(strike: float):
    return lambda mesh: np.maximum(mesh[:, 0] - strike, 0.0)


def solve_passport_hjb(model: MarketModel, strike: float, grid: SpaceTimeGrid, candidates: str = "extended",
                       c_stab: float = C_STAB) -> Tuple[ValueSurface, PolicyMap]:
    """
    Explicit HJB sweep for v_tau = sup_delta [generator of (Pi, ln S) under delta] v,
    v(0, p, x) = (p - K)^+, maximizing pointwise over the finite candidate list.

    The policy recorded at each stored time is the argmax on that layer.
    """
    _check_passport_grid(model, grid)
    controls = vertex_candidates(model, candidates)
    a, b = _passport_coefficients(model, grid, controls)
    hamiltonians = _Hamiltonians(grid, a, b)
    initial = _hinge_in_p(strike)(grid.mesh())
    logger.info("Passport HJB on %s nodes, %d steps, %d candidates.", grid.shape, grid.steps, len(controls))

    metadata = {"kind": "passport-hjb", "strike": float(strike), "candidates": candidates}
    surface, indices = _maximizing_march(grid, hamiltonians, initial, metadata=metadata, c_stab=c_stab)
    return surface, PolicyMap(grid, surface.times, indices, controls, "classical")


def solve_fixed_strategy(model: MarketModel, strategy: StrategyField, strike: float, grid: SpaceTimeGrid,
                         c_stab: float = C_STAB) -> ValueSurface:
    """The linear passport PDE with delta = strategy(T - tau, s) in place of the supremum."""
    _check_passport_grid(model, grid)
    s = np.exp(grid.mesh()[:, 1:])
    k, horizon = grid.time_step, grid.final_time

    def coefficients(tau):
        control = strategy.control(horizon - tau, s)
        if np.any(np.abs(control) > 1.0 + VERTEX_TOLERANCE):
            raise ArgumentError(f"Strategy '{strategy.name}' leaves [-1, 1]^n.")
        return _passport_coefficients(model, grid, control[None, :, :])

    a0, _ = coefficients(0.0)
    grid.check_stability(float(np.abs(a0).sum(axis=-1).max()), c_stab)

    def advance(v, step):
        # Controls are evaluated at the left end of each step in real time.
        a, b = coefficients(step * k)
        return v + k * _Hamiltonians(grid, a, b).evaluate(v)[0]

    initial = _hinge_in_p(strike)(grid.mesh())
    return march(grid, initial, advance, metadata={"kind": "passport-fixed", "strategy": strategy.name})


# --- Symmetric passport ---

def bs_boundary_value(z2, tau: float, sigma: float, strike: float = 1.0):
    """
    exp(z2) N(d+) - K N(d-), d+- = (z2 - ln K +- sigma^2 tau / 2) / (sigma sqrt(tau)),
    the value on the edge S_N = 2; at tau = 0 (or sigma = 0) the payoff (exp(z2) - K)^+.
    """
    if tau < 0:
        raise ArgumentError("tau must be nonnegative.")
    if strike <= 0:
        raise ArgumentError("The strike must be positive.")
    z2 = np.asarray(z2, dtype=float)
    if tau == 0 or sigma == 0:
        result = np.maximum(np.exp(z2) - strike, 0.0)
    else:
        root = sigma * math.sqrt(tau)
        d_plus = (z2 - math.log(strike) + 0.5 * root ** 2) / root
        d_minus = d_plus - root
        with np.errstate(over="ignore", invalid="ignore"):
            result = np.exp(z2) * norm.cdf(d_plus) - strike * norm.cdf(d_minus)
        result = np.where(np.isfinite(result), result, 0.0)
    return float(result) if result.ndim == 0 else result


def symmetric_grid(sigma: float, horizon: float, nodes_per_ln2: int = 16, z1_min: float = -3.0,
                   z2_range: Tuple[float, float] = (-2.5, 2.5), z2_nodes: int = 101,
                   stored_layers: Optional[int] = 11, eps: float = 0.0, c_stab: float = C_STAB) -> SpaceTimeGrid:
    """
    Half-strip grid in (z1, z2) = (ln S_N, ln X_N) with its right edge at z1 = ln 2
    and z1 = 0 on a node (h1 = ln 2 / nodes_per_ln2). Steps are those the
    account lattice behind the grid needs for a monotone explicit sweep.
    """
    if sigma < 0:
        raise ArgumentError("sigma must be nonnegative.")
    h1 = LOG_TWO / nodes_per_ln2
    below = math.ceil(-z1_min / h1 - 1e-9)
    lower = (-below * h1, float(z2_range[0]))
    upper = (LOG_TWO, float(z2_range[1]))
    grid = SpaceTimeGrid(lower, upper, (below + nodes_per_ln2 + 1, z2_nodes), horizon, stored_layers=stored_layers)
    lattice = _AccountLattice(grid, sigma)
    a, _ = lattice.coefficients(sigma, SYMMETRIC_CANDIDATES[:, 0], eps)
    return replace(grid, steps=lattice.grid.stable_steps(float(np.abs(a).sum(axis=-1).max()), c_stab))


class _AccountLattice:
    """
    The lattice in (A, B) = (ln X_S, ln X_M) behind a symmetric-passport grid in (z1, z2).

    All in S freezes A and nothing in S freezes B, so each pure strategy
    diffuses along one lattice axis and the maximizing sweep stays monotone.
    The lattice covers the image of the (z1, z2) grid short of the edge
    z1 = ln 2 (which maps to B = +inf), padded by three diffusion lengths;
    layers are sampled back onto the (z1, z2) nodes.
    """
    def __init__(self, target: SpaceTimeGrid, sigma: float):
        z1, z2 = target.axes()
        h = min(target.spacing)
        pad = 3.0 * sigma * math.sqrt(target.final_time) + 2.0 * h
        log_m = np.log(2.0 - np.exp(z1[:-1]))
        lower = (z2[0] - z1[-1] - pad, z2[0] - log_m[0] - pad)
        upper = (z2[-1] - z1[0] + pad, z2[-1] - log_m[-1] + pad)
        self.target = target
        self.grid = SpaceTimeGrid.from_spacing(lower, upper, h, target.final_time, steps=target.steps,
                                               stored_layers=target.stored_layers)
        # ln(S_N / M_N) seen on the target, for clipping the eps terms
        self.log_ratio = (float(z1[0] - log_m[0]), float(z1[-2] - log_m[-1]))

        mesh = self.grid.mesh()
        self.s = 2.0 * expit(mesh[:, 1] - mesh[:, 0])
        self.m = 2.0 * expit(mesh[:, 0] - mesh[:, 1])
        self.x = np.exp(LOG_TWO - np.logaddexp(-mesh[:, 0], -mesh[:, 1]))

        inner = np.meshgrid(z1[:-1], z2, indexing="ij")
        self.points = np.stack([(inner[1] - inner[0]).reshape(-1),
                                (inner[1] - np.log(2.0 - np.exp(inner[0]))).reshape(-1)], axis=1)

    def coefficients(self, sigma: float, fractions: np.ndarray, eps: float = 0.0):
        """
        Generator of (A, B) when a fraction delta of the account is in S: with
        s = S_N, m = 2 - s and c = s - 2 delta,
        a_AA = sigma^2 (1 - delta)^2 / 2, a_AB = -sigma^2 delta (1 - delta) / 2, a_BB = sigma^2 delta^2 / 2,
        b_A = sigma^2 (m^2 - c^2) / 8, b_B = sigma^2 (s^2 - c^2) / 8.

        eps adds eps^2 d^2/dz1^2 at fixed z2, with s/m clipped to the target's range.
        fractions has shape (candidates,) or (candidates, N).
        """
        fractions = np.asarray(fractions, dtype=float)
        if fractions.ndim == 1:
            fractions = np.broadcast_to(fractions[:, None], (fractions.shape[0], self.s.shape[0]))
        s, m = self.s[None, :], self.m[None, :]
        c = s - 2.0 * fractions
        half, scale = 0.5 * sigma ** 2, sigma ** 2 / 8.0

        a = np.zeros(fractions.shape + (2, 2))
        a[..., 0, 0] = half * (1.0 - fractions) ** 2
        a[..., 0, 1] = -half * fractions * (1.0 - fractions)
        a[..., 1, 1] = half * fractions ** 2
        b = np.zeros(fractions.shape + (2,))
        b[..., 0] = scale * (m ** 2 - c ** 2)
        b[..., 1] = scale * (s ** 2 - c ** 2)
        if eps > 0:
            mesh = self.grid.mesh()
            ratio = np.exp(np.clip(mesh[:, 1] - mesh[:, 0], *self.log_ratio))[None, :]
            a[..., 0, 0] += eps ** 2
            a[..., 0, 1] -= eps ** 2 * ratio
            a[..., 1, 1] += eps ** 2 * ratio ** 2
            b[..., 1] += eps ** 2 * ratio * (1.0 + ratio)
        a[..., 1, 0] = a[..., 0, 1]
        return a, b

    def initial(self, strike: float) -> np.ndarray:
        return np.maximum(self.x - strike, 0.0)

    def sample(self, values: np.ndarray) -> np.ndarray:
        """Lattice values at the target nodes left of z1 = ln 2, shape (n1 - 1, n2)."""
        interpolator = RegularGridInterpolator(self.grid.axes(), values.reshape(self.grid.shape), method="linear",
                                               bounds_error=False, fill_value=None)
        return interpolator(self.points).reshape(self.target.shape[0] - 1, self.target.shape[1])

    def policy(self, values: np.ndarray) -> np.ndarray:
        """Candidate index per target node: all in S wherever its generator is at least as large."""
        index = np.ones(self.target.shape, dtype=int)
        index[:-1, :] = np.where(self.sample(values[0] - values[1]) >= 0.0, 0, 1)
        return index

    def surface(self, inner: ValueSurface, sigma: float, strike: float, metadata: Dict) -> ValueSurface:
        """Target surface: the payoff at tau = 0, sampled layers after, the closed form at z1 = ln 2."""
        z2 = self.target.axes()[1]
        layers = []
        for tau, values in zip(inner.times, inner.values):
            if tau == 0.0:
                layers.append(_symmetric_initial(self.target, strike).reshape(self.target.shape))
                continue
            layer = np.empty(self.target.shape)
            layer[:-1, :] = self.sample(values)
            layer[-1, :] = bs_boundary_value(z2, tau, sigma, strike)
            layers.append(layer)
        return ValueSurface(grid=self.target, times=inner.times, values=np.stack(layers), metadata=metadata)


def _check_symmetric_grid(grid: SpaceTimeGrid):
    if grid.ndim != 2:
        raise ArgumentError("The symmetric passport lives on a 2-dimensional (z1, z2) grid.")
    if abs(grid.upper[0] - LOG_TWO) > BOUNDARY_TOLERANCE:
        raise ConfigurationError(f"The grid must end at z1 = ln 2 (got {grid.upper[0]!r}) to carry the boundary row.")


def _symmetric_initial(grid: SpaceTimeGrid, strike: float) -> np.ndarray:
    return np.maximum(np.exp(grid.mesh()[:, 1]) - strike, 0.0)


def solve_symmetric_passport(sigma: float, strike: float, grid: SpaceTimeGrid, eps: float = 0.0,
                             c_stab: float = C_STAB) -> Tuple[ValueSurface, PolicyMap]:
    """
    Value of the symmetric passport u(tau, ln S_N, ln X_N), maximizing over
    "all in S" and "nothing in S" at every node, with the closed-form row at z1 = ln 2.

    The sweep runs on the account lattice; the policy at a node is the
    candidate with the larger sampled generator. eps > 0 adds eps^2 to the
    z1-diffusion.
    """
    if sigma < 0:
        raise ArgumentError("sigma must be nonnegative.")
    _check_symmetric_grid(grid)
    lattice = _AccountLattice(grid, sigma)
    a, b = lattice.coefficients(sigma, SYMMETRIC_CANDIDATES[:, 0], eps)
    hamiltonians = _Hamiltonians(lattice.grid, a, b, cross="monotone")
    logger.info("Symmetric passport on %s nodes (lattice %s), %d steps (sigma=%g, K=%g).",
                grid.shape, lattice.grid.shape, grid.steps, sigma, strike)

    metadata = {"kind": "symmetric-hjb", "sigma": float(sigma), "strike": float(strike), "eps": float(eps)}
    inner, indices = _maximizing_march(lattice.grid, hamiltonians, lattice.initial(strike), c_stab=c_stab,
                                       record=lattice.policy)
    surface = lattice.surface(inner, sigma, strike, metadata)
    return surface, PolicyMap(grid, surface.times, indices, SYMMETRIC_CANDIDATES, "symmetric")


def solve_symmetric_fixed(sigma: float, strike: float, grid: SpaceTimeGrid,
                          forced: Union[str, StrategyField] = "none", c_stab: float = C_STAB) -> ValueSurface:
    """The symmetric passport under a fixed strategy instead of the supremum, on the same lattice."""
    if sigma < 0:
        raise ArgumentError("sigma must be nonnegative.")
    _check_symmetric_grid(grid)
    strategy = forced_strategy(forced)
    lattice = _AccountLattice(grid, sigma)
    k, horizon = grid.time_step, grid.final_time

    def hamiltonians(tau):
        exposure = strategy.exposure(horizon - tau, lattice.m, lattice.x)
        if np.any(exposure < -VERTEX_TOLERANCE) or np.any(exposure > lattice.x * (1.0 + VERTEX_TOLERANCE)):
            raise ArgumentError(f"Strategy '{strategy.name}' leaves 0 <= w <= X_N.")
        a, b = lattice.coefficients(sigma, np.clip(exposure / lattice.x, 0.0, 1.0)[None, :])
        return _Hamiltonians(lattice.grid, a, b, cross="monotone")

    lattice.grid.check_stability(hamiltonians(0.0).max_norm, c_stab)

    def advance(v, step):
        return v + k * hamiltonians(step * k).evaluate(v)[0]

    metadata = {"kind": "symmetric-fixed", "strategy": strategy.name, "sigma": float(sigma), "strike": float(strike)}
    inner = march(lattice.grid, lattice.initial(strike), advance)
    return lattice.surface(inner, sigma, strike, metadata)


def stop_loss_approximation(sigma: float, strike: float, grid: SpaceTimeGrid,
                            eps_values: Sequence[float] = (0.4, 0.2, 0.1, 0.05)) -> Dict[float, ValueSurface]:
    """Values under the smoothed stop-loss strategies, one surface per bridge width."""
    return {float(eps): solve_symmetric_fixed(sigma, strike, grid, smooth_stop_loss_strategy(eps))
            for eps in eps_values}


def symmetric_coordinates(m0: float, x0: float) -> Tuple[float, float]:
    """(z1, z2) = (ln(2 - m0), ln x0)."""
    if not 0.0 <= m0 < 2.0:
        raise ArgumentError("m0 must lie in [0, 2).")
    if x0 <= 0:
        raise ArgumentError("x0 must be positive.")
    return math.log(2.0 - m0), math.log(x0)


def symmetric_value(surface: ValueSurface, m0: float, x0: float) -> float:
    return float(surface.interpolate(symmetric_coordinates(m0, x0))[0])


def z2_gamma(surface: ValueSurface, t: Optional[float] = None) -> np.ndarray:
    """u_z2z2 - u_z2, the second derivative in the account value expressed in z2 = ln X."""
    layer = surface.layer(t)
    h = surface.grid.spacing[1]
    first = np.gradient(layer, h, axis=1)
    second = np.gradient(first, h, axis=1)
    return second - first


def policy_agreement(surface: ValueSurface, policy: PolicyMap, t: Optional[float] = None,
                     threshold: float = GAMMA_THRESHOLD, margin: int = 2) -> Tuple[float, int]:
    """
    Fraction of interior nodes with z2-Gamma above threshold whose recorded control
    matches optimal_symmetric_strategy, and the number of such nodes. Nodes within
    `margin` cells of the box boundary or of z1 = 0 are skipped.
    """
    grid = surface.grid
    gamma = z2_gamma(surface, t)
    z1 = grid.axes()[0]
    recorded = policy.controls(t)[..., 0]
    expected = np.where(np.exp(z1) <= 1.0, 1.0, 0.0)[:, None] * np.ones(grid.shape)

    mask = gamma > threshold
    mask[:margin, :] = mask[-margin:, :] = False
    mask[:, :margin] = mask[:, -margin:] = False
    mask[np.abs(z1) < margin * grid.spacing[0] - 1e-12, :] = False
    count = int(mask.sum())
    if count == 0:
        return 1.0, 0
    return float(np.mean(recorded[mask] == expected[mask])), count
