import logging
import numpy as np

from dataclasses import dataclass, field
from numpy.polynomial.hermite_e import hermegauss
from typing import Callable, Optional, Sequence, Tuple, Union

from core.errors import ArgumentError, NotPSDError

logger = logging.getLogger(__name__)

# --- Tolerances ---
# Correlation matrices must be PSD to 1e-12; volatility and coefficient
# matrices are judged relative to their max-norm at 1e-10.
RHO_TOLERANCE = 1e-12
PSD_TOLERANCE = 1e-10
CONVEXITY_TOLERANCE = 1e-12
REGULARITY_TAGS = ("constant", "smooth", "measurable")
COORDINATES = ("normal", "lognormal")


def _frozen_array(values, ndim: int, name: str) -> np.ndarray:
    array = np.array(values, dtype=float, ndmin=ndim)
    if array.ndim != ndim:
        raise ArgumentError(f"{name} must have {ndim} dimension(s), got shape {array.shape}.")
    array.setflags(write=False)
    return array


def _matrix_scale(matrix: np.ndarray) -> float:
    return max(1.0, float(np.max(np.abs(matrix)))) if matrix.size else 1.0


@dataclass(frozen=True, eq=False)
class MarketModel:
    """
    n correlated driftless lognormal assets, dS_i = sigma_i S_i dW_i.

    Zero volatilities are accepted (a frozen asset is a valid degenerate
    market); negative ones are not.
    """
    sigma: np.ndarray
    rho: np.ndarray
    spot: np.ndarray

    def __post_init__(self):
        sigma = _frozen_array(self.sigma, 1, "sigma")
        spot = _frozen_array(self.spot, 1, "spot")
        rho = _frozen_array(self.rho, 2, "rho")
        n = sigma.shape[0]

        if spot.shape != (n,) or rho.shape != (n, n):
            raise ArgumentError(
                f"Dimension mismatch: sigma {sigma.shape}, spot {spot.shape}, rho {rho.shape}."
            )
        if np.any(sigma < 0):
            raise ArgumentError("Volatilities must be nonnegative.")
        if np.any(spot <= 0):
            raise ArgumentError("Spot prices must be strictly positive.")
        if not np.allclose(rho, rho.T, rtol=0.0, atol=RHO_TOLERANCE):
            raise ArgumentError("Correlation matrix must be symmetric.")
        if not np.allclose(np.diag(rho), 1.0, rtol=0.0, atol=RHO_TOLERANCE):
            raise ArgumentError("Correlation matrix must have a unit diagonal.")
        min_eigenvalue = float(np.linalg.eigvalsh(rho).min())
        if min_eigenvalue < -RHO_TOLERANCE:
            raise NotPSDError(f"Correlation matrix is not PSD (min eigenvalue {min_eigenvalue:.3e}).")

        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "spot", spot)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def uncorrelated(cls, sigma: Sequence[float], spot: Sequence[float]) -> "MarketModel":
        return cls(sigma=sigma, rho=np.eye(len(sigma)), spot=spot)

    @property
    def n(self) -> int:
        return int(self.sigma.shape[0])

    @property
    def covariance(self) -> np.ndarray:
        """The matrix (sigma_i rho_ij sigma_j)."""
        return self.sigma[:, None] * self.rho * self.sigma[None, :]


@dataclass(frozen=True, eq=False)
class EigenFactorization:
    """Q orthogonal (rows are eigenvectors), Lambda descending, with Q^T diag(Lambda) Q = C."""
    Q: np.ndarray
    Lambda: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.Q.T @ np.diag(self.Lambda) @ self.Q

    def orthogonality_error(self) -> float:
        n = self.Q.shape[0]
        return float(np.max(np.abs(self.Q @ self.Q.T - np.eye(n))))


def eigen_factorize(model: Union[MarketModel, np.ndarray]) -> EigenFactorization:
    """
    Diagonalizes the volatility matrix (sigma_i rho_ij sigma_j).

    Accepts a MarketModel or a raw covariance matrix. Eigenvalues are ordered
    descending and the first nonzero component of every eigenvector is made
    positive, so repeated runs (and repeated eigenvalues) give the same Q.

    Raises:
        ArgumentError: if the matrix is not symmetric.
        NotPSDError: if an eigenvalue is below -1e-10 (relative to max-norm).
    """
    covariance = model.covariance if isinstance(model, MarketModel) else np.asarray(model, dtype=float)
    if covariance.ndim != 2 or covariance.shape[0] != covariance.shape[1]:
        raise ArgumentError(f"Expected a square matrix, got shape {covariance.shape}.")

    scale = _matrix_scale(covariance)
    if not np.allclose(covariance, covariance.T, rtol=0.0, atol=PSD_TOLERANCE * scale):
        raise ArgumentError("Volatility matrix must be symmetric.")

    eigenvalues, eigenvectors = np.linalg.eigh(0.5 * (covariance + covariance.T))
    if eigenvalues.min() < -PSD_TOLERANCE * scale:
        raise NotPSDError(f"Volatility matrix is not PSD (min eigenvalue {eigenvalues.min():.3e}).")

    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    Q = eigenvectors[:, order].T.copy()

    for row in Q:
        nonzero = np.flatnonzero(np.abs(row) > 1e-12)
        if nonzero.size and row[nonzero[0]] < 0:
            row *= -1.0

    return EigenFactorization(Q=Q, Lambda=eigenvalues)


def _check_control(model: MarketModel, s, delta) -> Tuple[np.ndarray, np.ndarray]:
    s = np.asarray(s, dtype=float)
    delta = np.asarray(delta, dtype=float)
    if s.shape != (model.n,) or delta.shape != (model.n,):
        raise ArgumentError(
            f"Expected price and control vectors of length {model.n}, got {s.shape} and {delta.shape}."
        )
    if np.any(s < 0):
        raise ArgumentError("Prices must be nonnegative.")
    return s, delta


def build_volatility_matrix(model: MarketModel, s, delta) -> np.ndarray:
    """Entry (i, j) is delta_i sigma_i s_i rho_ij delta_j sigma_j s_j."""
    s, delta = _check_control(model, s, delta)
    weights = delta * model.sigma * s
    return weights[:, None] * model.rho * weights[None, :]


def basket_volatility(model: MarketModel, s, delta) -> float:
    """
    Volatility of the weighted basket, sqrt(sum_ij (sigma sigma^T)_ij(delta)).

    Raises:
        NotPSDError: if the radicand is below -1e-12 (relative to its scale).
    """
    matrix = build_volatility_matrix(model, s, delta)
    radicand = float(matrix.sum())
    if radicand < -RHO_TOLERANCE * _matrix_scale(matrix):
        raise NotPSDError(f"Negative basket variance {radicand:.3e}.")
    return float(np.sqrt(max(radicand, 0.0)))


def basket_volatility_from_factorization(factorization: EigenFactorization, s, delta) -> float:
    """The same quantity in rotated coordinates: sqrt(<Q s_delta, Lambda Q s_delta>)."""
    rotated = factorization.Q @ (np.asarray(delta, dtype=float) * np.asarray(s, dtype=float))
    return float(np.sqrt(max(float(rotated @ (factorization.Lambda * rotated)), 0.0)))


# --- Payoffs ---
# Payoff kernels are small callable dataclasses rather than closures so that
# payoffs can be shipped to worker processes.

@dataclass(frozen=True)
class _Hinge:
    strike: float = 0.0

    def __call__(self, x):
        return np.maximum(np.asarray(x, dtype=float) - self.strike, 0.0)


@dataclass(frozen=True)
class _Exponential:
    m: float

    def __call__(self, x):
        return np.exp(self.m * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class _Monomial:
    degree: int

    def __call__(self, x):
        return np.asarray(x, dtype=float) ** self.degree


@dataclass(frozen=True)
class _Constant:
    value: float

    def __call__(self, x):
        return np.full(np.shape(x), self.value, dtype=float)


@dataclass(frozen=True)
class _PowerOfPrice:
    m: float

    def __call__(self, s):
        return np.asarray(s, dtype=float) ** self.m


@dataclass(frozen=True)
class _PiecewiseLinear:
    """Linear interpolation between knots, extended linearly beyond the end knots."""
    knots: Tuple[float, ...]
    values: Tuple[float, ...]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        knots = np.asarray(self.knots)
        values = np.asarray(self.values)
        left_slope = (values[1] - values[0]) / (knots[1] - knots[0])
        right_slope = (values[-1] - values[-2]) / (knots[-1] - knots[-2])
        inner = np.interp(x, knots, values)
        below = values[0] + left_slope * (x - knots[0])
        above = values[-1] + right_slope * (x - knots[-1])
        return np.where(x < knots[0], below, np.where(x > knots[-1], above, inner))


@dataclass(frozen=True)
class _ComposeExp:
    """h(x) = inner(exp(x)): a price-coordinate payoff read in log coordinates."""
    inner: Callable

    def __call__(self, x):
        return self.inner(np.exp(np.asarray(x, dtype=float)))


@dataclass(frozen=True)
class _ComposeLog:
    """h^s(s) = inner(ln s), defined for s > 0 only."""
    inner: Callable

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s <= 0):
            raise ArgumentError("Log-coordinate payoffs are defined for strictly positive prices only.")
        return self.inner(np.log(s))


DEFAULT_SAMPLES = np.linspace(-10.0, 10.0, 401)
GROWTH_EXPONENT_CHOICES = (1.0, 0.5, 0.25)


def growth_certificate(h: Callable, samples: np.ndarray = DEFAULT_SAMPLES) -> Tuple[float, float]:
    """
    Finds (c, eps) with |h(x)| <= c exp(c |x|^(2 - eps)) on the samples.

    The largest eps from a fixed list is preferred; c is the smallest power of
    two that works. Raises ArgumentError if nothing up to c = 2^10 works.
    """
    samples = np.asarray(samples, dtype=float)
    magnitude = np.abs(h(samples))
    for eps in GROWTH_EXPONENT_CHOICES:
        for power in range(0, 11):
            c = float(2 ** power)
            with np.errstate(over="ignore"):
                bound = c * np.exp(c * np.abs(samples) ** (2.0 - eps))
            if np.all(magnitude <= bound):
                return c, eps
    raise ArgumentError("Payoff grows too fast for a condition (D) growth certificate.")


@dataclass(frozen=True, eq=False)
class UnivariatePayoff:
    """
    A payoff f(x) = h(x[axis]) depending on a single coordinate.

    In normal coordinates h must be convex and satisfy the growth bound
    |h(x)| <= c exp(c |x|^(2 - eps)); both are checked on construction.
    Payoffs written in price coordinates (coordinates="lognormal") are only
    checked for finiteness on positive prices; transform them with
    transform_coordinates before solving.
    """
    h: Callable[[np.ndarray], np.ndarray]
    axis: int = 0
    growth: Optional[Tuple[float, float]] = None
    name: str = "payoff"
    smooth: bool = False
    coordinates: str = "normal"
    parameters: dict = field(default_factory=dict)
    convex_window: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.axis < 0:
            raise ArgumentError("Payoff axis must be nonnegative.")
        if self.coordinates not in COORDINATES:
            raise ArgumentError(f"Unknown coordinates '{self.coordinates}'.")
        if self.coordinates == "lognormal":
            values = self.h(np.exp(np.linspace(-5.0, 5.0, 101)))
            if not np.all(np.isfinite(values)):
                raise ArgumentError(f"Payoff '{self.name}' is not finite on positive prices.")
            return
        samples = DEFAULT_SAMPLES
        if self.convex_window is not None:
            lo, hi = self.convex_window
            samples = samples[(samples >= lo) & (samples <= hi)]
        self._check_convexity(samples)
        growth = self.growth if self.growth is not None else growth_certificate(self.h)
        object.__setattr__(self, "growth", tuple(float(g) for g in growth))
        self._check_growth(DEFAULT_SAMPLES)

    def _check_convexity(self, samples: np.ndarray):
        centre = self.h(samples)
        for step in (0.05, 0.5, 2.0):
            second = self.h(samples - step) - 2.0 * centre + self.h(samples + step)
            # Roundoff grows with the payoff magnitude, so the floor is scaled by it.
            floor = -CONVEXITY_TOLERANCE * np.maximum(1.0, np.abs(centre))
            if np.any(second < floor):
                worst = samples[np.argmin(second - floor)]
                raise ArgumentError(f"Payoff '{self.name}' is not convex near x={worst:.4g}.")

    def _check_growth(self, samples: np.ndarray):
        c, eps = self.growth
        with np.errstate(over="ignore"):
            bound = c * np.exp(c * np.abs(samples) ** (2.0 - eps))
        if np.any(np.abs(self.h(samples)) > bound):
            raise ArgumentError(f"Payoff '{self.name}' violates its growth bound (c={c}, eps={eps}).")

    def __call__(self, points) -> np.ndarray:
        """Evaluates on an (m, n) array of points, or on a 1-D array of coordinates."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.h(points)
        if self.axis >= points.shape[-1]:
            raise ArgumentError(f"Payoff axis {self.axis} outside a {points.shape[-1]}-dimensional grid.")
        return self.h(points[..., self.axis])


def hinge(strike: float = 0.0, axis: int = 0) -> UnivariatePayoff:
    return UnivariatePayoff(_Hinge(float(strike)), axis=axis, name="hinge",
                            parameters={"strike": float(strike)})


def power(m: float, axis: int = 0) -> UnivariatePayoff:
    """The power payoff s^m written in normal coordinates: exp(m x)."""
    return UnivariatePayoff(_Exponential(float(m)), axis=axis, name="power", smooth=True,
                            parameters={"m": float(m)})


def power_of_price(m: float, axis: int = 0) -> UnivariatePayoff:
    """The power payoff s^m in price coordinates."""
    return UnivariatePayoff(_PowerOfPrice(float(m)), axis=axis, name="power", smooth=True,
                            coordinates="lognormal", parameters={"m": float(m)})


def hinge_of_price(strike: float = 0.0, axis: int = 0) -> UnivariatePayoff:
    """The call payoff (s - K)^+ in price coordinates."""
    return UnivariatePayoff(_Hinge(float(strike)), axis=axis, name="hinge", coordinates="lognormal",
                            parameters={"strike": float(strike)})


def quadratic(axis: int = 0) -> UnivariatePayoff:
    return UnivariatePayoff(_Monomial(2), axis=axis, name="quadratic", smooth=True)


def quartic(axis: int = 0) -> UnivariatePayoff:
    return UnivariatePayoff(_Monomial(4), axis=axis, name="quartic", smooth=True)


def constant(value: float = 1.0, axis: int = 0) -> UnivariatePayoff:
    return UnivariatePayoff(_Constant(float(value)), axis=axis, name="constant", smooth=True,
                            parameters={"value": float(value)})


def table(knots: Sequence[float], values: Sequence[float], axis: int = 0) -> UnivariatePayoff:
    """A piecewise-linear payoff through (knots, values); must be convex."""
    knots = tuple(float(k) for k in knots)
    values = tuple(float(v) for v in values)
    if len(knots) < 2 or len(knots) != len(values):
        raise ArgumentError("A table payoff needs at least two knots and one value per knot.")
    if np.any(np.diff(knots) <= 0):
        raise ArgumentError("Table knots must be strictly increasing.")
    return UnivariatePayoff(_PiecewiseLinear(knots, values), axis=axis, name="table",
                            parameters={"knots": list(knots), "values": list(values)})


@dataclass(frozen=True)
class MollifierSpec:
    """Gaussian smoothing width eps, cutoff decay rate delta0 and cutoff radius R."""
    eps: float
    delta0: float = 1.0
    R: float = 50.0

    def __post_init__(self):
        if not (self.eps > 0 and self.delta0 > 0 and self.R > 0):
            raise ArgumentError(
                f"Mollifier parameters must be positive (eps={self.eps}, delta0={self.delta0}, R={self.R})."
            )


MOLLIFIER_NODES = 129
KERNEL_TRUNCATION = 6.0


@dataclass(frozen=True)
class _Mollified:
    """h convolved with G_eps after the exp(-delta0 (|x| - R)^2) cutoff beyond R."""
    base: Callable
    eps: float
    delta0: float
    R: float
    nodes: int = MOLLIFIER_NODES

    def _cut(self, y: np.ndarray) -> np.ndarray:
        excess = np.maximum(np.abs(y) - self.R, 0.0)
        return self.base(y) * np.exp(-self.delta0 * excess ** 2)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        offsets = np.linspace(-KERNEL_TRUNCATION * self.eps, KERNEL_TRUNCATION * self.eps, self.nodes)
        weights = np.exp(-0.5 * (offsets / self.eps) ** 2)
        weights[[0, -1]] *= 0.5
        weights /= weights.sum()
        flat = x.reshape(-1)
        smoothed = self._cut(flat[:, None] - offsets[None, :]) @ weights
        return smoothed.reshape(x.shape)


def mollify_and_cutoff(payoff: UnivariatePayoff, spec: MollifierSpec) -> UnivariatePayoff:
    """
    Returns the smooth payoff h^R_{eps,delta0}: h damped by exp(-delta0 (|x| - R)^2)
    outside [-R, R], then convolved with a Gaussian of standard deviation eps.

    The convolution uses trapezoid quadrature on a kernel truncated at 6 eps with
    129 nodes; the weights are renormalized so constants are reproduced exactly.
    """
    if payoff.coordinates != "normal":
        raise ArgumentError("Mollify payoffs in normal coordinates.")
    kernel = _Mollified(payoff.h, spec.eps, spec.delta0, spec.R)
    return UnivariatePayoff(
        kernel,
        axis=payoff.axis,
        growth=payoff.growth,
        name=f"{payoff.name}~mollified",
        smooth=True,
        parameters={**payoff.parameters, "eps": spec.eps, "delta0": spec.delta0, "R": spec.R},
        convex_window=(-spec.R + 5.0 * spec.eps, spec.R - 5.0 * spec.eps),
    )


def smooth_indicator(eps: float, z1, variant: str = "literal"):
    """
    Indicator bridge from 1 (z1 <= -eps) to 0 (z1 >= 0).

    variant="literal" evaluates exp(-1 - eps/z1) on (-eps, 0) and clamps to
    [0, 1]; the raw expression is at least 1 on that whole interval, so the
    clamped bridge equals 1 there. variant="bridge" uses exp(1 + eps/z1),
    which falls strictly from 1 to 0 across the interval.
    """
    if eps <= 0:
        raise ArgumentError("eps must be positive.")
    if variant not in ("literal", "bridge"):
        raise ArgumentError(f"Unknown indicator variant '{variant}'.")

    z1 = np.asarray(z1, dtype=float)
    inside = (z1 > -eps) & (z1 < 0)
    safe = np.where(inside, z1, -eps)
    with np.errstate(over="ignore"):
        if variant == "literal":
            bridge = np.clip(np.exp(-1.0 - eps / safe), 0.0, 1.0)
        else:
            bridge = np.exp(1.0 + eps / safe)
    result = np.where(z1 <= -eps, 1.0, np.where(z1 >= 0, 0.0, bridge))
    return float(result) if result.ndim == 0 else result


# --- Coefficient fields ---

@dataclass(frozen=True)
class _ConstantMatrix:
    matrix: Tuple[Tuple[float, ...], ...]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        matrix = np.asarray(self.matrix)
        return np.broadcast_to(matrix, (points.shape[0],) + matrix.shape).copy()


@dataclass(frozen=True)
class _ComposedField:
    """a(x) = inner(map(x)) for the coordinate changes x = ln s and s = exp x."""
    inner: Callable
    to_log: bool

    def __call__(self, points: np.ndarray) -> np.ndarray:
        if self.to_log:
            if np.any(points <= 0):
                raise ArgumentError("Price-coordinate fields are defined for strictly positive prices only.")
            return self.inner(np.log(points))
        return self.inner(np.exp(points))


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """
    x -> A(x), a symmetric PSD second-order coefficient matrix.

    fn is vectorized: it maps an (m, n) array of points to an (m, n, n) array.
    growth holds (c0, c1) with |a_ij(x)| <= c0 + c1 |x|.
    """
    n: int
    fn: Callable[[np.ndarray], np.ndarray]
    regularity: str = "smooth"
    growth: Optional[Tuple[float, float]] = None
    name: str = "field"
    coordinates: str = "normal"

    def __post_init__(self):
        if self.n < 1:
            raise ArgumentError("Coefficient fields need n >= 1.")
        if self.regularity not in REGULARITY_TAGS:
            raise ArgumentError(f"Unknown regularity tag '{self.regularity}'.")
        if self.coordinates not in COORDINATES:
            raise ArgumentError(f"Unknown coordinates '{self.coordinates}'.")
        if self.growth is None:
            object.__setattr__(self, "growth", self._infer_growth())

    def _sample_points(self, count: int = 64, box: float = 5.0, seed: int = 0) -> np.ndarray:
        points = np.random.default_rng(seed).uniform(-box, box, size=(count, self.n))
        return np.exp(points) if self.coordinates == "lognormal" else points

    def _infer_growth(self) -> Tuple[float, float]:
        """Smallest (c0, c1) with |a_ij(x)| <= c0 + c1 |x| on the seeded samples."""
        origin = np.ones((1, self.n)) if self.coordinates == "lognormal" else np.zeros((1, self.n))
        c0 = float(np.abs(self.fn(origin)).max())
        points = self._sample_points()
        radius = np.linalg.norm(np.log(points) if self.coordinates == "lognormal" else points, axis=1)
        excess = np.maximum(np.abs(self.fn(points)).max(axis=(1, 2)) - c0, 0.0)
        c1 = float(np.max(excess / np.maximum(radius, 1e-12)))
        return c0, c1

    @property
    def is_constant(self) -> bool:
        return self.regularity == "constant"

    def evaluate(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.n:
            raise ArgumentError(f"Field '{self.name}' is {self.n}-dimensional, got points of shape {points.shape}.")
        values = np.asarray(self.fn(points), dtype=float)
        if values.shape != (points.shape[0], self.n, self.n):
            raise ArgumentError(
                f"Field '{self.name}' returned shape {values.shape}, expected {(points.shape[0], self.n, self.n)}."
            )
        return values

    def __call__(self, x) -> np.ndarray:
        return self.evaluate(np.asarray(x, dtype=float)[None, :])[0]

    def max_norm(self, points) -> float:
        """Largest row-absolute-sum of A over the points."""
        values = self.evaluate(points)
        return float(np.abs(values).sum(axis=2).max()) if values.size else 0.0

    def check_psd(self, points=None, count: int = 64, box: float = 5.0, seed: int = 0) -> float:
        """
        Checks symmetry, PSD and the growth certificate at the given points, or at
        seeded random points in [-box, box]^n. Returns the minimum eigenvalue.

        Raises:
            NotPSDError: if A(x) is not symmetric PSD at some sampled point.
            ArgumentError: if the growth certificate fails.
        """
        if points is None:
            points = self._sample_points(count, box, seed)
        values = self.evaluate(points)
        asymmetry = np.max(np.abs(values - np.swapaxes(values, 1, 2)))
        scale = _matrix_scale(values)
        if asymmetry > PSD_TOLERANCE * scale:
            raise NotPSDError(f"Field '{self.name}' is not symmetric (asymmetry {asymmetry:.3e}).")
        min_eigenvalue = float(np.linalg.eigvalsh(values).min())
        if min_eigenvalue < -PSD_TOLERANCE:
            raise NotPSDError(f"Field '{self.name}' has a negative eigenvalue {min_eigenvalue:.3e}.")
        c0, c1 = self.growth
        radius = np.linalg.norm(np.log(points) if self.coordinates == "lognormal" else points, axis=1)
        if np.any(np.abs(values).max(axis=(1, 2)) > c0 + c1 * radius + PSD_TOLERANCE):
            raise ArgumentError(f"Field '{self.name}' violates its growth certificate {self.growth}.")
        return min_eigenvalue


def constant_field(matrix, name: str = "constant") -> CoefficientField:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    if matrix.shape[0] != matrix.shape[1]:
        raise ArgumentError(f"Expected a square matrix, got shape {matrix.shape}.")
    field_ = CoefficientField(
        n=matrix.shape[0],
        fn=_ConstantMatrix(tuple(map(tuple, matrix))),
        regularity="constant",
        growth=(float(np.max(np.abs(matrix))), 0.0),
        name=name,
    )
    field_.check_psd(points=np.zeros((1, matrix.shape[0])))
    return field_


def from_function(n: int, fn: Callable[[np.ndarray], np.ndarray], regularity: str = "smooth",
                  growth: Optional[Tuple[float, float]] = None, name: str = "field",
                  check: bool = True) -> CoefficientField:
    """Wraps a vectorized (m, n) -> (m, n, n) function, checking PSD on seeded samples."""
    field_ = CoefficientField(n=n, fn=fn, regularity=regularity, growth=growth, name=name)
    if check:
        field_.check_psd()
    return field_


@dataclass(frozen=True)
class _SineModulated:
    matrix: Tuple[Tuple[float, ...], ...]
    amplitude: float
    axis: int
    row: int

    def __call__(self, points: np.ndarray) -> np.ndarray:
        base = np.asarray(self.matrix)
        out = np.broadcast_to(base, (points.shape[0],) + base.shape).copy()
        out[:, self.row, self.row] += self.amplitude * np.sin(points[:, self.axis])
        return out


def sine_modulated_field(matrix, amplitude: float, axis: int, row: int = 0) -> CoefficientField:
    """A(x) = matrix + amplitude sin(x_axis) e_row e_row^T."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
    n = matrix.shape[0]
    if not (0 <= axis < n and 0 <= row < n):
        raise ArgumentError(f"Axis {axis} and row {row} must index a {n}x{n} matrix.")
    fn = _SineModulated(tuple(map(tuple, matrix)), float(amplitude), axis, row)
    growth = (float(np.abs(matrix).max()) + abs(amplitude), 0.0)
    return from_function(n, fn, growth=growth, name="sine-modulated")


@dataclass(frozen=True)
class _HalfOuterSum:
    fields: Tuple[Callable, ...]

    def __call__(self, points: np.ndarray) -> np.ndarray:
        out = np.zeros((points.shape[0], points.shape[1], points.shape[1]))
        for k, point in enumerate(points):
            for vector_field in self.fields:
                v = np.asarray(vector_field(point), dtype=float)
                out[k] += 0.5 * np.outer(v, v)
        return out


def diffusion_from_vector_fields(fields: Sequence[Callable], n: int, growth=None,
                                 name: str = "vector-fields") -> CoefficientField:
    """A(x) = 1/2 sum_i V_i(x) V_i(x)^T for the diffusion fields V_1..V_m."""
    return CoefficientField(n=n, fn=_HalfOuterSum(tuple(fields)), regularity="smooth",
                            growth=growth, name=name)


def gauss_hermite_smoothing(f: Callable[[np.ndarray], np.ndarray], eps: float, n: int,
                            order: int = 20) -> Callable[[np.ndarray], np.ndarray]:
    """
    Multivariate Gaussian mollification f_eps(x) = E f(x + eps Z) by tensor
    Gauss-Hermite quadrature with `order` nodes per dimension.
    """
    if eps <= 0:
        return f
    nodes, weights = hermegauss(order)
    weights = weights / weights.sum()
    grids = np.meshgrid(*([nodes] * n), indexing="ij")
    offsets = eps * np.stack([g.reshape(-1) for g in grids], axis=1)
    tensor_weights = np.ones(offsets.shape[0])
    for w in np.meshgrid(*([weights] * n), indexing="ij"):
        tensor_weights = tensor_weights * w.reshape(-1)
    return _GaussHermiteSmoothed(f, offsets, tensor_weights)


@dataclass(frozen=True, eq=False)
class _GaussHermiteSmoothed:
    f: Callable
    offsets: np.ndarray
    weights: np.ndarray

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        shifted = points[:, None, :] + self.offsets[None, :, :]
        values = np.asarray(self.f(shifted.reshape(-1, points.shape[1])), dtype=float)
        return values.reshape(points.shape[0], -1) @ self.weights


# --- Coordinate changes x = ln s ---

def payoff_to_normal(payoff: UnivariatePayoff) -> UnivariatePayoff:
    """h(x) = h^s(exp x) for a payoff written in price coordinates."""
    if payoff.coordinates != "lognormal":
        raise ArgumentError(f"Payoff '{payoff.name}' is already in normal coordinates.")
    return UnivariatePayoff(_ComposeExp(payoff.h), axis=payoff.axis, name=payoff.name, smooth=payoff.smooth,
                            parameters=dict(payoff.parameters))


def payoff_to_lognormal(payoff: UnivariatePayoff) -> UnivariatePayoff:
    """h^s(s) = h(ln s); defined for s > 0 only."""
    if payoff.coordinates != "normal":
        raise ArgumentError(f"Payoff '{payoff.name}' is already in price coordinates.")
    return UnivariatePayoff(_ComposeLog(payoff.h), axis=payoff.axis, name=payoff.name, smooth=payoff.smooth,
                            coordinates="lognormal", parameters=dict(payoff.parameters))


def field_to_lognormal(A: CoefficientField) -> CoefficientField:
    """a^s_ij(s) = a_ij(ln s): the coefficients of v^s_t = sum a^s_ij s_i s_j v^s_{s_i s_j}."""
    if A.coordinates != "normal":
        raise ArgumentError(f"Field '{A.name}' is already in price coordinates.")
    return CoefficientField(n=A.n, fn=_ComposedField(A.fn, to_log=True), regularity=A.regularity,
                            growth=A.growth, name=A.name, coordinates="lognormal")


def field_to_normal(A: CoefficientField) -> CoefficientField:
    if A.coordinates != "lognormal":
        raise ArgumentError(f"Field '{A.name}' is already in normal coordinates.")
    return CoefficientField(n=A.n, fn=_ComposedField(A.fn, to_log=False), regularity=A.regularity,
                            growth=A.growth, name=A.name)
