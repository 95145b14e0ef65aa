import logging
import math
import multiprocessing
import numpy as np

from dataclasses import dataclass, field
from tqdm import tqdm
from typing import Callable, Dict, List, Optional, Tuple

from core.errors import ArgumentError, NotPSDError, StrategyInfeasibleError
from core.hjb_control import StrategyField
from core.market_model import RHO_TOLERANCE, MarketModel

logger = logging.getLogger(__name__)

SCHEMES = ("euler", "log-euler")
STEPS_PER_YEAR = 512
BLOCK_SIZE = 4096
FEASIBILITY_TOLERANCE = 1e-12


@dataclass(frozen=True)
class PathConfig:
    """
    Monte Carlo run parameters.

    steps defaults to 512 per year of horizon. checkpoints is the number of evenly
    spaced recorded times, always including 0 and T. With antithetic pairing,
    paths 2k and 2k+1 are driven by opposite normals.
    """
    horizon: float
    paths: int = 10000
    steps: Optional[int] = None
    seed: int = 0
    scheme: str = "log-euler"
    antithetic: bool = False
    checkpoints: int = 2
    block_size: int = BLOCK_SIZE

    def __post_init__(self):
        if not self.horizon > 0:
            raise ArgumentError("The horizon must be positive.")
        if self.steps is None:
            object.__setattr__(self, "steps", max(1, math.ceil(STEPS_PER_YEAR * self.horizon)))
        if self.steps < 1 or self.paths < 1:
            raise ArgumentError("A run needs at least one step and one path.")
        if self.scheme not in SCHEMES:
            raise ArgumentError(f"Unknown scheme '{self.scheme}'; expected one of {SCHEMES}.")
        if self.seed < 0:
            raise ArgumentError("Seeds must be nonnegative.")
        if self.checkpoints < 2:
            raise ArgumentError("Record at least the first and the last time.")
        if self.antithetic and (self.paths % 2 or self.block_size % 2):
            raise ArgumentError("Antithetic runs need an even path count and block size.")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def checkpoint_steps(self) -> np.ndarray:
        return np.unique(np.round(np.linspace(0, self.steps, min(self.checkpoints, self.steps + 1))).astype(int))

    @property
    def times(self) -> np.ndarray:
        return self.checkpoint_steps * self.dt

    def blocks(self) -> List[Tuple[int, int]]:
        """(block index, paths in block) covering all paths."""
        full, rest = divmod(self.paths, self.block_size)
        jobs = [(b, self.block_size) for b in range(full)]
        if rest:
            jobs.append((full, rest))
        return jobs


@dataclass(frozen=True)
class IndexState:
    """Index-numeraire prices; S_N is always read as 2 - M_N."""
    m_n: float
    x_n: float

    def __post_init__(self):
        if not 0.0 <= self.m_n <= 2.0:
            raise ArgumentError(f"M_N must lie in [0, 2], got {self.m_n}.")
        if self.x_n < 0:
            raise ArgumentError("X_N must be nonnegative.")

    @property
    def s_n(self) -> float:
        return 2.0 - self.m_n


@dataclass(eq=False)
class Ensemble:
    """
    Simulated paths at the checkpoint times.

    values has shape (paths, checkpoints, dim); extras holds per-path arrays
    whose first axis is the path index.
    """
    times: np.ndarray
    values: np.ndarray
    extras: Dict[str, np.ndarray] = field(default_factory=dict)
    antithetic: bool = False
    label: str = "ensemble"

    @property
    def paths(self) -> int:
        return int(self.values.shape[0])

    @property
    def terminal(self) -> np.ndarray:
        return self.values[:, -1, :]


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    samples: int


def correlation_factor(rho: np.ndarray) -> np.ndarray:
    """
    L with L L^T = rho: the Cholesky factor, or an eigenvalue factor when rho is
    singular but PSD (perfect correlation).

    Raises:
        NotPSDError: if rho has an eigenvalue below -1e-12.
    """
    rho = np.asarray(rho, dtype=float)
    try:
        return np.linalg.cholesky(rho)
    except np.linalg.LinAlgError:
        eigenvalues, eigenvectors = np.linalg.eigh(rho)
        if eigenvalues.min() < -RHO_TOLERANCE:
            raise NotPSDError(f"Correlation matrix is not PSD (min eigenvalue {eigenvalues.min():.3e}).")
        return eigenvectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


def path_stream(seed: int, path: int) -> np.random.Generator:
    """The stream of one path is a pure function of (seed, path)."""
    return np.random.Generator(np.random.Philox(key=[seed, path]))


def path_normals(seed: int, first_path: int, count: int, steps: int, dim: int,
                 antithetic: bool = False) -> np.ndarray:
    """
    Standard normals of shape (count, steps, dim) for paths first_path onwards.

    Path p takes its steps * dim draws in step order from its own stream, so the
    increment of path p at step s depends on (seed, p, s) only and not on how the
    paths are cut into blocks. With antithetic pairing, paths 2q and 2q + 1 share
    the stream of pair q with opposite signs.
    """
    if antithetic:
        pairs = range(first_path // 2, (first_path + count) // 2)
        half = np.stack([path_stream(seed, q).standard_normal((steps, dim)) for q in pairs])
        return np.stack([half, -half], axis=1).reshape(count, steps, dim)
    return np.stack([path_stream(seed, p).standard_normal((steps, dim))
                     for p in range(first_path, first_path + count)])


class _Recorder:
    """Collects state snapshots at the checkpoint steps."""
    def __init__(self, cfg: PathConfig, count: int, dim: int):
        self.steps = {int(s): k for k, s in enumerate(cfg.checkpoint_steps)}
        self.values = np.empty((count, len(self.steps), dim))

    def __call__(self, step: int, state: np.ndarray):
        k = self.steps.get(step)
        if k is not None:
            self.values[:, k, :] = state.reshape(state.shape[0], -1)


# --- Block tasks ---
# A task simulates one block of paths from its pre-drawn normals of shape
# (paths, steps, dim) and returns (values, extras). Tasks are picklable so they
# can be sent to pool workers; dim defaults to one driving Brownian motion.

@dataclass(frozen=True, eq=False)
class _GBMTask:
    model: MarketModel
    cfg: PathConfig

    @property
    def dim(self) -> int:
        return self.model.n

    def __call__(self, normals: np.ndarray):
        count = normals.shape[0]
        cfg, model = self.cfg, self.model
        factor = correlation_factor(model.rho)
        dt, sqrt_dt = cfg.dt, math.sqrt(cfg.dt)
        s = np.tile(model.spot, (count, 1))
        record = _Recorder(cfg, count, model.n)
        record(0, s)
        for step in range(1, cfg.steps + 1):
            z = normals[:, step - 1, :] @ factor.T
            if cfg.scheme == "log-euler":
                s = s * np.exp(-0.5 * model.sigma ** 2 * dt + model.sigma * sqrt_dt * z)
            else:
                s = s + model.sigma * s * sqrt_dt * z
            record(step, s)
        return record.values, {}


@dataclass(frozen=True, eq=False)
class _IndexTask:
    sigma: float
    m0: float
    cfg: PathConfig

    def __call__(self, normals: np.ndarray):
        count = normals.shape[0]
        cfg = self.cfg
        sqrt_dt = math.sqrt(cfg.dt)
        m = np.full(count, self.m0)
        record = _Recorder(cfg, count, 1)
        record(0, m)
        for step in range(1, cfg.steps + 1):
            z = normals[:, step - 1, 0]
            m = np.clip(m + 0.5 * self.sigma * m * (2.0 - m) * sqrt_dt * z, 0.0, 2.0)
            record(step, m)
        return record.values, {"s_n": 2.0 - record.values[:, :, 0]}


@dataclass(frozen=True, eq=False)
class _RelativePriceTask:
    sigma: float
    s0: float
    cfg: PathConfig

    def __call__(self, normals: np.ndarray):
        count = normals.shape[0]
        cfg = self.cfg
        dt, sqrt_dt = cfg.dt, math.sqrt(cfg.dt)
        s = np.full(count, self.s0)
        record = _Recorder(cfg, count, 1)
        record(0, s)
        for step in range(1, cfg.steps + 1):
            z = normals[:, step - 1, 0]
            s = s * np.exp(-0.5 * self.sigma ** 2 * dt + self.sigma * sqrt_dt * z)
            record(step, s)
        return record.values, {}


@dataclass(frozen=True, eq=False)
class _AccountTask:
    sigma: float
    strategy: StrategyField
    state0: IndexState
    cfg: PathConfig

    def __call__(self, normals: np.ndarray):
        count = normals.shape[0]
        cfg = self.cfg
        sqrt_dt = math.sqrt(cfg.dt)
        m = np.full(count, self.state0.m_n)
        x = np.full(count, self.state0.x_n)
        record = _Recorder(cfg, count, 1)
        index_record = _Recorder(cfg, count, 1)
        record(0, x)
        index_record(0, m)
        for step in range(1, cfg.steps + 1):
            t = (step - 1) * cfg.dt
            w = self.strategy.exposure(t, m, x)
            if np.any(w < -FEASIBILITY_TOLERANCE) or np.any(w > x * (1.0 + FEASIBILITY_TOLERANCE) + FEASIBILITY_TOLERANCE):
                raise StrategyInfeasibleError(
                    f"Strategy '{self.strategy.name}' left 0 <= Delta^S S_N <= X_N at time index {step - 1}.",
                    time_index=step - 1,
                )
            z = normals[:, step - 1, 0]
            s_n = 2.0 - m
            # Both processes are driven by the same increment dW^N.
            x = np.maximum(x + 0.5 * self.sigma * (x * s_n - 2.0 * w) * sqrt_dt * z, 0.0)
            m = np.clip(m + 0.5 * self.sigma * m * s_n * sqrt_dt * z, 0.0, 2.0)
            record(step, x)
            index_record(step, m)
        return record.values, {"m_n": index_record.values[:, :, 0]}


@dataclass(frozen=True, eq=False)
class _PortfolioTask:
    model: MarketModel
    strategy: StrategyField
    cfg: PathConfig
    p0: float = 0.0

    @property
    def dim(self) -> int:
        return self.model.n

    def __call__(self, normals: np.ndarray):
        count = normals.shape[0]
        cfg, model = self.cfg, self.model
        factor = correlation_factor(model.rho)
        dt, sqrt_dt = cfg.dt, math.sqrt(cfg.dt)
        s = np.tile(model.spot, (count, 1))
        p = np.full(count, self.p0)
        realized = np.zeros(count)
        modelled = np.zeros(count)
        record = _Recorder(cfg, count, 1)
        record(0, p)
        for step in range(1, cfg.steps + 1):
            t = (step - 1) * dt
            delta = self.strategy.control(t, s)
            if np.any(np.abs(delta) > 1.0 + FEASIBILITY_TOLERANCE):
                raise StrategyInfeasibleError(
                    f"Strategy '{self.strategy.name}' left [-1, 1]^n at time index {step - 1}.",
                    time_index=step - 1,
                )
            weights = delta * model.sigma * s
            modelled += np.einsum("pi,ij,pj->p", weights, model.rho, weights) * dt

            z = normals[:, step - 1, :] @ factor.T
            if cfg.scheme == "log-euler":
                s_next = s * np.exp(-0.5 * model.sigma ** 2 * dt + model.sigma * sqrt_dt * z)
            else:
                s_next = s + model.sigma * s * sqrt_dt * z
            increment = np.sum(delta * (s_next - s), axis=1)
            p = p + increment
            realized += increment ** 2
            s = s_next
            record(step, p)
        return record.values, {"realized_qv": realized, "model_qv": modelled}


_worker_task = None


def _init_worker(task: Callable):
    """Runs once per worker process and keeps the block task in a process global."""
    global _worker_task
    _worker_task = task


def _run_block(job: Tuple[int, int, int]):
    seed, first_path, count = job
    cfg = _worker_task.cfg
    normals = path_normals(seed, first_path, count, cfg.steps, getattr(_worker_task, "dim", 1), cfg.antithetic)
    return _worker_task(normals)


def run_parallel_mc(task: Callable, cfg: PathConfig, threads: int = 1, progress: bool = False,
                    label: str = "ensemble") -> Ensemble:
    """
    Simulates all blocks of a task and concatenates them in block order.

    Every path draws from its own (seed, path) stream, so the ensemble depends
    neither on the number of worker processes nor on the block size.
    """
    jobs = [(cfg.seed, block * cfg.block_size, count) for block, count in cfg.blocks()]
    logger.info("Simulating %s: %d paths in %d blocks, %d steps, %d worker(s).",
                label, cfg.paths, len(jobs), cfg.steps, threads)

    if threads > 1 and len(jobs) > 1:
        with multiprocessing.Pool(processes=threads, initializer=_init_worker, initargs=(task,)) as pool:
            results = list(tqdm(pool.imap(_run_block, jobs), total=len(jobs), desc=label, disable=not progress))
    else:
        _init_worker(task)
        results = [_run_block(job) for job in tqdm(jobs, desc=label, disable=not progress)]

    values = np.concatenate([r[0] for r in results], axis=0)
    extras = {key: np.concatenate([r[1][key] for r in results], axis=0) for key in results[0][1]}
    return Ensemble(times=cfg.times, values=values, extras=extras, antithetic=cfg.antithetic, label=label)


def simulate_gbm(model: MarketModel, cfg: PathConfig, threads: int = 1, progress: bool = False) -> Ensemble:
    """Correlated driftless lognormal prices; log-euler steps are exact."""
    correlation_factor(model.rho)
    return run_parallel_mc(_GBMTask(model, cfg), cfg, threads, progress, label="gbm")


def simulate_index_state(sigma: float, cfg: PathConfig, m0: float, threads: int = 1,
                         progress: bool = False) -> Ensemble:
    """
    M_N under the index numeraire, dM_N = 1/2 sigma M_N (2 - M_N) dW^N, by Euler
    steps clamped to [0, 2]; extras["s_n"] holds 2 - M_N.
    """
    if not 0.0 <= m0 <= 2.0:
        raise ArgumentError(f"m0 must lie in [0, 2], got {m0}.")
    return run_parallel_mc(_IndexTask(float(sigma), float(m0), cfg), cfg, threads, progress, label="index-state")


def simulate_relative_price(sigma: float, cfg: PathConfig, s_m0: float, threads: int = 1,
                            progress: bool = False) -> Ensemble:
    """S_M = S / M under the M numeraire, dS_M = sigma S_M dW^M, stepped exactly."""
    if s_m0 <= 0:
        raise ArgumentError("The relative price must be positive.")
    return run_parallel_mc(_RelativePriceTask(float(sigma), float(s_m0), cfg), cfg, threads, progress,
                           label="relative-price")


def simulate_account(sigma: float, strategy: StrategyField, cfg: PathConfig, state0: IndexState,
                     threads: int = 1, progress: bool = False) -> Ensemble:
    """
    X_N with dX_N = 1/2 sigma (X_N S_N - 2 w) dW^N, w = Delta^S S_N the strategy's
    exposure, driven by the same increments as M_N (returned in extras["m_n"]).
    Zero wealth is absorbing.

    Raises:
        StrategyInfeasibleError: if w leaves [0, X_N] at some step.
    """
    if strategy.contract != "symmetric":
        raise ArgumentError(f"'{strategy.name}' is not a symmetric-passport strategy.")
    return run_parallel_mc(_AccountTask(float(sigma), strategy, state0, cfg), cfg, threads, progress,
                           label="account")


def simulate_classical_portfolio(model: MarketModel, strategy: StrategyField, cfg: PathConfig, p0: float = 0.0,
                                 threads: int = 1, progress: bool = False) -> Ensemble:
    """
    Pi accumulated as sum_i delta_i dS_i on the simulated prices. extras carry the
    realized quadratic variation sum (dPi)^2 and the model one, int sum_ij
    (sigma sigma^T)_ij(delta, S) dt, per path.
    """
    if strategy.contract != "classical":
        raise ArgumentError(f"'{strategy.name}' is not a classical-passport strategy.")
    correlation_factor(model.rho)
    return run_parallel_mc(_PortfolioTask(model, strategy, cfg, float(p0)), cfg, threads, progress,
                           label="portfolio")


def mc_estimate(ensemble: Ensemble, payoff: Callable[[np.ndarray], np.ndarray], checkpoint: int = -1) -> MCEstimate:
    """
    Sample mean and standard error of payoff(values at a checkpoint, by default
    the last). Antithetic partners are averaged before the statistics are taken.

    Raises:
        ArgumentError: for an empty ensemble.
    """
    if ensemble.paths == 0:
        raise ArgumentError("Cannot estimate from an empty ensemble.")
    samples = np.asarray(payoff(ensemble.values[:, checkpoint, :]), dtype=float).reshape(-1)
    if ensemble.antithetic:
        samples = 0.5 * (samples[0::2] + samples[1::2])
    count = samples.shape[0]
    stderr = float(samples.std(ddof=1) / math.sqrt(count)) if count > 1 else 0.0
    return MCEstimate(mean=float(samples.mean()), stderr=stderr, samples=count)
