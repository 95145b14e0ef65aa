import logging
import math
import time
import numpy as np

from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from functools import singledispatch
from pathlib import Path
from typing import Callable, Dict, List, Optional

from core.artifacts import (
    ArtifactHeader, read_surface_binary, write_csv, write_ensemble_csv, write_greek_table, write_policy_csv,
    write_report, write_surface_binary, write_surface_csv, write_timing,
)
from core.config import SUITES, RunConfig, config_hash, output_directory
from core.errors import ArgumentError, ConfigurationError, HypothesisError, LabError, NumericalError
from core.greeks_adjoint import GreekRequest, adjoint_identity_residual, greek_table, regularize
from core.hjb_control import (
    dyadic_battery, named_strategy, passport_grid, policy_agreement, solve_fixed_strategy, solve_passport_hjb,
    solve_symmetric_passport, stop_loss_approximation, stop_loss_strategy, symmetric_grid, symmetric_value,
)
from core.market_model import (
    CoefficientField, UnivariatePayoff, field_to_lognormal, field_to_normal, hinge, payoff_to_lognormal,
    payoff_to_normal,
)
from core.path_engine import (
    IndexState, PathConfig, mc_estimate, simulate_account, simulate_classical_portfolio, simulate_gbm,
    simulate_index_state, simulate_relative_price,
)
from core.pde_core import ValueSurface, Window, fundamental_solution, greens_residual
from core.structure_analysis import (
    convexity_criterion_critical, convexity_criterion_global,
    find_convexity_violation, hormander_rank, local_convexity_preservation, solved_convexity, verify_comparison,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_CONFIGURATION = 2
EXIT_NUMERICAL = 3
DIRECTIONS = ("to-lognormal", "to-normal")
ROUNDING_RESIDUAL = 1e-12
SOLVED_CONVEXITY_TIME = 0.5


@dataclass
class CheckResult:
    name: str
    tolerance: float
    observed: float
    passed: bool
    note: str = ""
    witness: Optional[Dict] = None

    def to_dict(self) -> Dict:
        data = {"name": self.name, "tolerance": float(self.tolerance), "observed": float(self.observed),
                "passed": bool(self.passed), "note": self.note}
        if self.witness is not None:
            data["witness"] = self.witness
        return data


@dataclass
class CommandResult:
    exit_code: int
    artifacts: List[Path] = field(default_factory=list)
    summary: Dict = field(default_factory=dict)
    checks: List[CheckResult] = field(default_factory=list)


@dataclass
class RunContext:
    cfg: RunConfig
    header: ArtifactHeader
    out_dir: Path
    timings: Dict[str, float] = field(default_factory=dict)
    artifacts: List[Path] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: RunConfig) -> "RunContext":
        header = ArtifactHeader(config_hash(cfg), cfg.seed, cfg.command)
        return cls(cfg=cfg, header=header, out_dir=output_directory(cfg))

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def keep(self, path: Path) -> Path:
        self.artifacts.append(path)
        return path

    @contextmanager
    def timed(self, name: str):
        start = time.perf_counter()
        yield
        self.timings[name] = time.perf_counter() - start
        logger.info("%s took %.2fs.", name, self.timings[name])

    def finish(self, exit_code: int, summary: Dict, checks: List[CheckResult] = None) -> CommandResult:
        # Runtimes go to their own file so the CSV artifacts stay reproducible.
        self.keep(write_timing(self.path("timing.yaml"), self.timings))
        return CommandResult(exit_code, list(self.artifacts), summary, checks or [])

    def write_surface(self, surface: ValueSurface, stem: str, names=None):
        if self.cfg.output.surface_csv:
            self.keep(write_surface_csv(surface, self.path(f"{stem}.csv"), self.header, names))
        if self.cfg.output.binary:
            self.keep(write_surface_binary(surface, self.path(f"{stem}.vsrf")))


def _z_score(difference: float, stderr: float) -> float:
    if stderr > 0:
        return difference / stderr
    return 0.0 if difference == 0 else math.copysign(math.inf, difference)


# --- Pricing ---

def cmd_price_passport(cfg: RunConfig) -> CommandResult:
    """
    Solves the classical passport HJB and writes the value surface, the policy
    map and a summary row; optionally prices every dyadic strategy of a level
    on the same grid for comparison.
    """
    ctx = RunContext.create(cfg)
    model = cfg.market.to_model()
    section = cfg.passport
    names = ["p", *[f"x{i + 1}" for i in range(model.n)]]

    with ctx.timed("passport-hjb"):
        grid = passport_grid(model, section.horizon, section.p_nodes, section.x_nodes, p0=section.p0)
        surface, policy = solve_passport_hjb(model, section.strike, grid, section.candidates)
    point = [section.p0, *np.log(model.spot).tolist()]
    value = float(surface.interpolate(point)[0])
    rows = [("optimal", section.p0, section.strike, value, 0.0)]

    if section.dyadic_level is not None:
        if model.n != 1:
            raise ConfigurationError("Dyadic strategy batteries are defined for a single asset.")
        with ctx.timed("dyadic-battery"):
            for strategy in dyadic_battery(section.dyadic_level, section.horizon):
                fixed = float(solve_fixed_strategy(model, strategy, section.strike, grid).interpolate(point)[0])
                rows.append((strategy.name, section.p0, section.strike, fixed, value - fixed))

    ctx.write_surface(surface, "value_surface", names)
    ctx.keep(write_policy_csv(policy, ctx.path("policy.csv"), ctx.header, names))
    ctx.keep(write_csv(ctx.path("summary.csv"), ctx.header, ["strategy", "p0", "strike", "value", "gap"], rows))
    logger.info("Passport value at p0=%g, K=%g: %.6f.", section.p0, section.strike, value)
    return ctx.finish(EXIT_OK, {"value": value})


def _path_config(cfg: RunConfig, horizon: float) -> PathConfig:
    mc = cfg.mc
    return PathConfig(horizon=horizon, paths=mc.paths, steps=mc.steps, seed=cfg.seed, scheme=mc.scheme,
                      antithetic=mc.antithetic, checkpoints=mc.checkpoints, block_size=mc.block_size)


def cmd_price_symmetric(cfg: RunConfig) -> CommandResult:
    """
    Symmetric passport value from the PDE, checked against a Monte Carlo estimate
    under the stop-loss strategy and against the optimal policy.
    """
    ctx = RunContext.create(cfg)
    section, mc = cfg.symmetric, cfg.mc

    with ctx.timed("symmetric-pde"):
        grid = symmetric_grid(section.sigma, section.horizon, section.nodes_per_ln2, section.z1_min,
                              (section.z2_min, section.z2_max), section.z2_nodes, eps=section.eps)
        surface, policy = solve_symmetric_passport(section.sigma, section.strike, grid, eps=section.eps)
    pde_value = symmetric_value(surface, section.m0, section.x0)
    agreement, gamma_nodes = policy_agreement(surface, policy)

    with ctx.timed("stop-loss-mc"):
        ensemble = simulate_account(section.sigma, stop_loss_strategy(), _path_config(cfg, section.horizon),
                                    IndexState(section.m0, section.x0), threads=mc.threads, progress=mc.progress)
        estimate = mc_estimate(ensemble, hinge(section.strike))
    difference = pde_value - estimate.mean
    z = _z_score(difference, estimate.stderr)

    rows = [(pde_value, estimate.mean, estimate.stderr, estimate.samples, z, agreement, gamma_nodes)]
    columns = ["pde_value", "mc_value", "mc_stderr", "mc_samples", "z_score", "policy_agreement", "gamma_nodes"]
    ctx.keep(write_csv(ctx.path("summary.csv"), ctx.header, columns, rows))

    if section.stop_loss_eps:
        with ctx.timed("stop-loss-approximation"):
            values = stop_loss_approximation(section.sigma, section.strike, grid, section.stop_loss_eps)
        approx = [(eps, symmetric_value(s, section.m0, section.x0), pde_value) for eps, s in values.items()]
        ctx.keep(write_csv(ctx.path("stop_loss_approximation.csv"), ctx.header,
                           ["eps", "value", "optimal_value"], approx))

    names = ["z1", "z2"]
    ctx.write_surface(surface, "value_surface", names)
    ctx.keep(write_policy_csv(policy, ctx.path("policy.csv"), ctx.header, names))
    logger.info("Symmetric passport: PDE %.6f, MC %.6f +- %.6f (z=%.2f), policy agreement %.4f.",
                pde_value, estimate.mean, estimate.stderr, z, agreement)
    return ctx.finish(EXIT_OK, {"pde_value": pde_value, "mc_value": estimate.mean, "mc_stderr": estimate.stderr,
                                "z_score": z, "policy_agreement": agreement})


# --- Simulation ---

def cmd_simulate(cfg: RunConfig) -> CommandResult:
    """Simulates the configured process and writes per-checkpoint means (and, optionally, every path)."""
    ctx = RunContext.create(cfg)
    mc = cfg.mc
    path_cfg = _path_config(cfg, mc.horizon)
    symmetric = cfg.symmetric
    options = {"threads": mc.threads, "progress": mc.progress}

    with ctx.timed(f"simulate-{mc.process}"):
        if mc.process == "gbm":
            ensemble = simulate_gbm(cfg.market.to_model(), path_cfg, **options)
        elif mc.process == "portfolio":
            model = cfg.market.to_model()
            strategy = named_strategy(mc.strategy, model, mc.horizon)
            p0 = cfg.passport.p0 if cfg.passport is not None else 0.0
            ensemble = simulate_classical_portfolio(model, strategy, path_cfg, p0=p0, **options)
        else:
            if symmetric is None:
                raise ConfigurationError(f"Simulating '{mc.process}' needs the symmetric section.")
            if mc.process == "index-state":
                ensemble = simulate_index_state(symmetric.sigma, path_cfg, symmetric.m0, **options)
            elif mc.process == "relative-price":
                if symmetric.m0 == 0:
                    raise ConfigurationError("The relative price S/M needs m0 > 0.")
                s_m0 = (2.0 - symmetric.m0) / symmetric.m0
                ensemble = simulate_relative_price(symmetric.sigma, path_cfg, s_m0, **options)
            else:
                strategy = named_strategy(mc.strategy, horizon=mc.horizon)
                ensemble = simulate_account(symmetric.sigma, strategy, path_cfg,
                                            IndexState(symmetric.m0, symmetric.x0), **options)

    rows = []
    for c, t in enumerate(ensemble.times):
        for d in range(ensemble.values.shape[2]):
            estimate = mc_estimate(ensemble, lambda v, d=d: v[:, d], checkpoint=c)
            rows.append((float(t), f"v{d + 1}", estimate.mean, estimate.stderr))
    for key, values in ensemble.extras.items():
        if values.ndim == 1:
            rows.append((float(ensemble.times[-1]), key, float(values.mean()),
                         float(values.std(ddof=1) / math.sqrt(values.shape[0])) if values.shape[0] > 1 else 0.0))
    ctx.keep(write_csv(ctx.path("summary.csv"), ctx.header, ["t", "quantity", "mean", "stderr"], rows))
    if mc.write_paths:
        ctx.keep(write_ensemble_csv(ensemble, ctx.path("paths.csv"), ctx.header))
    return ctx.finish(EXIT_OK, {"process": mc.process, "paths": ensemble.paths})


# --- Coordinate transforms ---

def _check_direction(direction: str):
    if direction not in DIRECTIONS:
        raise ArgumentError(f"Unknown direction '{direction}'; expected one of {DIRECTIONS}.")


@singledispatch
def transform_coordinates(obj, direction: str):
    """
    Moves an object between normal coordinates x and price coordinates s = exp(x).
    Values are invariant: v^s(t, s) = v(t, x) and a^s_ij(s) = a_ij(x).
    """
    raise ArgumentError(f"Cannot transform an object of type {type(obj).__name__}.")


@transform_coordinates.register
def _(payoff: UnivariatePayoff, direction: str) -> UnivariatePayoff:
    _check_direction(direction)
    return payoff_to_lognormal(payoff) if direction == "to-lognormal" else payoff_to_normal(payoff)


@transform_coordinates.register
def _(A: CoefficientField, direction: str) -> CoefficientField:
    _check_direction(direction)
    return field_to_lognormal(A) if direction == "to-lognormal" else field_to_normal(A)


@transform_coordinates.register
def _(surface: ValueSurface, direction: str) -> ValueSurface:
    _check_direction(direction)
    target = "lognormal" if direction == "to-lognormal" else "normal"
    if surface.grid.coordinates == target:
        raise ArgumentError(f"The surface is already in {target} coordinates.")
    metadata = {**surface.metadata, "coordinates": target}
    return ValueSurface(replace(surface.grid, coordinates=target), surface.times, surface.values, metadata)


@transform_coordinates.register
def _(points: np.ndarray, direction: str) -> np.ndarray:
    _check_direction(direction)
    if direction == "to-lognormal":
        return np.exp(points)
    if np.any(points <= 0):
        raise ArgumentError("Price coordinates must be strictly positive.")
    return np.log(points)


def cmd_transform(cfg: RunConfig) -> CommandResult:
    ctx = RunContext.create(cfg)
    section = cfg.transform

    if section.target == "surface":
        if section.input is None:
            raise ConfigurationError("transform.input must name a binary surface file.")
        surface = transform_coordinates(read_surface_binary(section.input), section.direction)
        ctx.write_surface(surface, "transformed")
        return ctx.finish(EXIT_OK, {"coordinates": surface.grid.coordinates})

    payoff = cfg.payoff.build()
    transformed = transform_coordinates(payoff, section.direction)
    x = np.linspace(section.lower, section.upper, section.nodes)
    s = np.exp(x)
    source = payoff(s if payoff.coordinates == "lognormal" else x)
    target = transformed(s if transformed.coordinates == "lognormal" else x)
    rows = list(zip(x.tolist(), s.tolist(), source.tolist(), target.tolist()))
    ctx.keep(write_csv(ctx.path("transformed.csv"), ctx.header, ["x", "s", "source", "target"], rows))
    mismatch = float(np.max(np.abs(source - target)))
    return ctx.finish(EXIT_OK, {"max_mismatch": mismatch})


# --- Verification suites ---

def _field(cfg: RunConfig, name: str = "field") -> CoefficientField:
    section = getattr(cfg.verify, name)
    if section is None:
        raise ConfigurationError(f"Suite '{cfg.verify.suite}' needs verify.{name}.")
    return section.build()


def _grid_for(cfg: RunConfig, *fields: CoefficientField):
    """The configured grid with time steps that are stable for every field."""
    mesh = cfg.grid.to_grid().mesh()
    return cfg.grid.to_grid(max(A.max_norm(mesh) for A in fields))


def _normal_payoff(cfg: RunConfig) -> UnivariatePayoff:
    payoff = cfg.payoff.build()
    return payoff_to_normal(payoff) if payoff.coordinates == "lognormal" else payoff


def _bachelier_gap(lower: CoefficientField, upper: CoefficientField, strike: float, t: float) -> float:
    """Closed-form v' - v at x_1 = K for the hinge under constant coefficients."""
    a, a_prime = lower(np.zeros(lower.n))[0, 0], upper(np.zeros(upper.n))[0, 0]
    return (math.sqrt(2.0 * a_prime * t) - math.sqrt(2.0 * a * t)) / math.sqrt(2.0 * math.pi)


def suite_comparison(cfg: RunConfig, ctx: RunContext) -> List[CheckResult]:
    verify = cfg.verify
    A, A_prime = _field(cfg), _field(cfg, "upper_field")
    payoff = _normal_payoff(cfg)
    grid = _grid_for(cfg, A, A_prime)
    try:
        report = verify_comparison(A, A_prime, payoff, grid, t_eval=verify.t_eval, scheme=cfg.grid.scheme)
    except HypothesisError as e:
        return [CheckResult("coefficient-order", 1e-10, float("nan"), False, note=str(e))]

    note = "; ".join(report.notes)
    tolerance = verify.tolerance or 1e-8
    checks = [
        CheckResult("coefficient-order", 1e-10, report.order.psd_gap, True, note=report.order.verdict),
        CheckResult("min-gap", tolerance, report.min_gap, report.min_gap >= -tolerance, note=note),
        CheckResult("gap-positive-on-gamma", 0.0, report.strict_fraction, report.positive_on_gamma, note=note),
    ]
    t = report.lower.grid.final_time
    point = np.zeros(grid.ndim)
    point[0] = payoff.parameters.get("strike", 0.0)
    closed_form = A.is_constant and A_prime.is_constant and cfg.payoff.kind == "hinge" \
        and cfg.payoff.coordinates == "normal"
    if closed_form and report.lower.grid.contains(point):
        gap = float(report.upper.interpolate(point)[0] - report.lower.interpolate(point)[0])
        oracle = _bachelier_gap(A, A_prime, point[0], t)
        checks.append(CheckResult("bachelier-gap", 5e-3, abs(gap - oracle), abs(gap - oracle) <= 5e-3,
                                  note=f"gap {gap:.6f}, closed form {oracle:.6f}"))
    return checks


def _graded(cfg: RunConfig, criterion: str, name: str, tolerance: float, observed: float, clean: bool,
            note: str, witness: Optional[Dict]) -> CheckResult:
    """A convexity check passes when its outcome is the one verify.expect names (default "pass")."""
    expected = cfg.verify.expect.get(criterion, "pass")
    outcome = "pass" if clean else "witness"
    if expected != "pass":
        note = f"{note}; expected {expected}, got {outcome}"
    return CheckResult(name, tolerance, observed, outcome == expected, note=note, witness=witness)


def suite_convexity(cfg: RunConfig, ctx: RunContext) -> List[CheckResult]:
    verify = cfg.verify
    A = _field(cfg)
    payoff = _normal_payoff(cfg)
    checks = []
    for criterion in verify.criteria:
        if criterion == "search":
            witness = find_convexity_violation(A, budget=verify.budget, seed=cfg.seed, family=verify.family,
                                               box=verify.box, nodes=verify.nodes)
            observed = witness.value if witness is not None else 0.0
            checks.append(_graded(cfg, criterion, "violation-search", 1e-4, observed, witness is None,
                                  f"budget {verify.budget}, family {verify.family}",
                                  witness.to_dict() if witness is not None else None))
            continue
        if criterion == "global":
            report = convexity_criterion_global(A, payoff, verify.eps, verify.box, verify.nodes)
        elif criterion == "critical-set":
            report = convexity_criterion_critical(A, payoff, verify.eps, verify.box, verify.nodes)
        elif criterion == "solved":
            report = solved_convexity(A, payoff, verify.t_eval or SOLVED_CONVEXITY_TIME, verify.box, verify.nodes)
        else:
            report = local_convexity_preservation(A, payoff, verify.box, verify.nodes)
        tolerance = 1e-4 if criterion == "solved" else 1e-6
        checks.append(_graded(cfg, criterion, f"{report.mode}-criterion", tolerance, report.min_value,
                              report.passed, "; ".join(report.notes) or f"{report.nodes_checked} nodes",
                              report.witness.to_dict() if report.witness is not None else None))
    return checks


def _coordinate_field(i: int) -> Callable:
    return lambda x: np.eye(len(x))[i]


def _monomial_field(power: int) -> Callable:
    """x_1^power d_2."""
    return lambda x: np.array([0.0, x[0] ** power] + [0.0] * (len(x) - 2))


VECTOR_FIELDS = {
    "coordinate": lambda: [_coordinate_field(0), _coordinate_field(1)],
    "grushin": lambda: [_coordinate_field(0), _monomial_field(1)],
    "depth-two": lambda: [_coordinate_field(0), _monomial_field(2)],
    "single": lambda: [_coordinate_field(0)],
}


def suite_hormander(cfg: RunConfig, ctx: RunContext) -> List[CheckResult]:
    verify = cfg.verify
    result = hormander_rank(VECTOR_FIELDS[verify.vector_fields](), verify.point, max_depth=verify.max_depth)
    note = f"depth {result.depth}" if result.satisfied else f"rank {result.rank} after depth {verify.max_depth}"
    return [CheckResult("hormander-rank", 1e-8, float(result.rank), result.satisfied, note=note)]


def suite_adjoint_identity(cfg: RunConfig, ctx: RunContext) -> List[CheckResult]:
    verify = cfg.verify
    A = _field(cfg)
    grid = _grid_for(cfg, A)
    tolerance = verify.tolerance or 5e-3
    t, x = verify.forward_point[0], verify.forward_point[1:]
    s, y = verify.adjoint_point[0], verify.adjoint_point[1:]

    checks = []
    for alpha in verify.alphas:
        residual = adjoint_identity_residual(A, (t, x), (s, y), alpha, grid)
        label = "".join(str(a) for a in alpha)
        checks.append(CheckResult(f"adjoint-identity-{label}", tolerance, residual, residual <= tolerance))

    if cfg.payoff is not None:
        payoff = regularize(_normal_payoff(cfg), grid)
        requests = [GreekRequest(tuple(alpha), tuple(x), t, method)
                    for alpha in verify.alphas for method in ("direct", "adjoint", "payoff-shift")]
        rows = greek_table(A, payoff, requests, grid)
        ctx.keep(write_greek_table(rows, ctx.path("greeks.csv"), ctx.header, A.n))
        values = {(row[-3], row[-2]): row[-1] for row in rows}
        for alpha in verify.alphas:
            label = "".join(str(a) for a in alpha)
            gap = abs(values[(label, "adjoint")] - values[(label, "direct")])
            checks.append(CheckResult(f"greek-{label}-adjoint-vs-direct", 10 * tolerance, gap, gap <= 10 * tolerance))
    return checks


def _greens_residual_on(A: CoefficientField, grid, cfg: RunConfig, width: float) -> float:
    verify = cfg.verify
    grid = replace(grid, stored_layers=None)
    v = fundamental_solution(A, verify.adjoint_point[1:], grid, width)
    u = fundamental_solution(A, verify.forward_point[1:], grid, width, adjoint=True)
    lower = verify.window_lower or [lo + 0.25 * (hi - lo) for lo, hi in zip(grid.lower, grid.upper)]
    upper = verify.window_upper or [hi - 0.25 * (hi - lo) for lo, hi in zip(grid.lower, grid.upper)]
    t_start, t_end = verify.window_times
    return greens_residual(A, u, v, Window(t_start, t_end, tuple(lower), tuple(upper)))


def suite_greens(cfg: RunConfig, ctx: RunContext) -> List[CheckResult]:
    verify = cfg.verify
    A = _field(cfg)
    grid = _grid_for(cfg, A)
    tolerance = verify.tolerance or 1e-3
    # the same bumps on both grids, so refinement compares one problem
    width = 2.0 * max(grid.spacing)
    residual = _greens_residual_on(A, grid, cfg, width)
    checks = [CheckResult("greens-residual", tolerance, residual, residual <= tolerance)]
    if verify.refine:
        fine = replace(grid, nodes=tuple(2 * (n - 1) + 1 for n in grid.nodes), steps=4 * grid.steps)
        refined = _greens_residual_on(A, fine, cfg, width)
        ratio = residual / refined if refined > 0 else math.inf
        at_rounding = max(residual, refined) <= ROUNDING_RESIDUAL
        checks.append(CheckResult("greens-refinement", 1.8, ratio, ratio >= 1.8 or at_rounding,
                                  note=f"residual {residual:.3e} -> {refined:.3e}"))
    return checks


VERIFICATION_SUITES = {
    "comparison": suite_comparison,
    "convexity": suite_convexity,
    "hormander": suite_hormander,
    "adjoint-identity": suite_adjoint_identity,
    "greens": suite_greens,
}


def cmd_verify(cfg: RunConfig) -> CommandResult:
    """Runs one verification battery and writes its report; exit 0 iff every check passed."""
    suite = cfg.verify.suite
    if suite not in VERIFICATION_SUITES:
        raise ConfigurationError(f"Unknown verification suite '{suite}'; expected one of {SUITES}.")
    ctx = RunContext.create(cfg)
    with ctx.timed(f"verify-{suite}"):
        checks = VERIFICATION_SUITES[suite](cfg, ctx)
    ctx.keep(write_report(ctx.path(f"report_{suite}.yaml"), ctx.header, suite, [c.to_dict() for c in checks]))

    for check in checks:
        logger.info("%-32s %s (observed %.3e, tolerance %.1e)%s", check.name, "PASS" if check.passed else "FAIL",
                    check.observed, check.tolerance, f" [{check.note}]" if check.note else "")
    passed = all(check.passed for check in checks)
    return ctx.finish(EXIT_OK if passed else EXIT_CHECKS_FAILED, {"suite": suite, "passed": passed}, checks)


COMMAND_HANDLERS = {
    "price-passport": cmd_price_passport,
    "price-symmetric": cmd_price_symmetric,
    "verify": cmd_verify,
    "transform": cmd_transform,
    "simulate": cmd_simulate,
}


def execute(cfg: RunConfig) -> CommandResult:
    """
    Runs the configured command and maps failures onto exit codes: 2 for
    configuration and argument errors, 3 for numerical failures.
    """
    try:
        return COMMAND_HANDLERS[cfg.command](cfg)
    except NumericalError as e:
        logger.error("Numerical failure%s: %s",
                     f" at time index {e.time_index}" if e.time_index is not None else "", e)
        return CommandResult(EXIT_NUMERICAL, summary={"error": str(e)})
    except LabError as e:
        logger.error("Configuration error: %s", e)
        return CommandResult(EXIT_CONFIGURATION, summary={"error": str(e)})
