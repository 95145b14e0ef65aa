import numpy as np
import pytest

from core.errors import ArgumentError, StrategyInfeasibleError
from core.hjb_control import (
    StrategyField, constant_strategy, fraction_strategy, stop_loss_strategy, zero_diffusion_strategy,
)
from core.market_model import MarketModel
from core.path_engine import (
    Ensemble, IndexState, PathConfig, correlation_factor, mc_estimate, path_normals, run_parallel_mc, simulate_account,
    simulate_classical_portfolio, simulate_gbm, simulate_index_state, simulate_relative_price,
)
from core.path_engine import _GBMTask


def _overinvested(t, m, x):
    # Twice the account in S breaks 0 <= Delta^S S_N <= X_N immediately.
    return 2.0 * x


@pytest.fixture
def single_asset():
    return MarketModel(sigma=[0.2], rho=[[1.0]], spot=[1.0])


# --- PathConfig ---

def test_path_config_defaults_and_checkpoints():
    cfg = PathConfig(horizon=1.0, checkpoints=5)
    assert cfg.steps == 512
    assert cfg.times[0] == 0.0
    assert cfg.times[-1] == pytest.approx(1.0)
    assert len(cfg.times) == 5


@pytest.mark.parametrize("kwargs", [
    {"horizon": 0.0},
    {"horizon": 1.0, "paths": 0},
    {"horizon": 1.0, "scheme": "milstein"},
    {"horizon": 1.0, "checkpoints": 1},
    {"horizon": 1.0, "paths": 11, "antithetic": True},
])
def test_path_config_rejects_invalid_arguments(kwargs):
    with pytest.raises(ArgumentError):
        PathConfig(**kwargs)


def test_blocks_cover_every_path():
    cfg = PathConfig(horizon=1.0, paths=100, block_size=32)
    assert cfg.blocks() == [(0, 32), (1, 32), (2, 32), (3, 4)]


# --- Price paths ---

def test_zero_volatility_paths_stay_at_spot():
    model = MarketModel.uncorrelated([0.0, 0.0], [1.0, 3.0])
    ensemble = simulate_gbm(model, PathConfig(horizon=1.0, paths=50, steps=16, checkpoints=4))
    assert np.all(ensemble.values == np.array([1.0, 3.0]))


def test_gbm_is_a_martingale(single_asset):
    ensemble = simulate_gbm(single_asset, PathConfig(horizon=1.0, paths=20000, steps=64, seed=7))
    estimate = mc_estimate(ensemble, lambda v: v[:, 0])
    assert abs(estimate.mean - 1.0) <= 4.0 * estimate.stderr


def test_perfectly_correlated_assets_move_together():
    model = MarketModel(sigma=[0.3, 0.3], rho=[[1.0, 1.0], [1.0, 1.0]], spot=[1.0, 2.0])
    ensemble = simulate_gbm(model, PathConfig(horizon=1.0, paths=200, steps=32))
    log_returns = np.log(ensemble.terminal / model.spot)
    assert np.max(np.abs(log_returns[:, 0] - log_returns[:, 1])) <= 1e-12


def test_correlation_factor_reproduces_singular_correlation():
    rho = np.array([[1.0, 1.0], [1.0, 1.0]])
    factor = correlation_factor(rho)
    assert np.allclose(factor @ factor.T, rho, atol=1e-12)


def test_same_seed_same_paths_different_seed_different_paths(single_asset):
    cfg = PathConfig(horizon=1.0, paths=64, steps=8, seed=3)
    first = simulate_gbm(single_asset, cfg)
    second = simulate_gbm(single_asset, cfg)
    other = simulate_gbm(single_asset, PathConfig(horizon=1.0, paths=64, steps=8, seed=4))
    assert np.array_equal(first.values, second.values)
    assert not np.array_equal(first.values, other.values)


def test_ensemble_does_not_depend_on_worker_count(single_asset):
    """
    Tests that the block decomposition makes results independent of parallelism.

    Purpose:
        Every path draws from its own (seed, path) stream, so running the
        same task in one process and in a two-worker pool must give the same
        paths bit for bit.
    """
    cfg = PathConfig(horizon=1.0, paths=64, steps=8, seed=11, block_size=16)
    serial = run_parallel_mc(_GBMTask(single_asset, cfg), cfg, threads=1)
    pooled = run_parallel_mc(_GBMTask(single_asset, cfg), cfg, threads=2)
    assert np.array_equal(serial.values, pooled.values)


@pytest.mark.parametrize("antithetic", [False, True])
def test_ensemble_does_not_depend_on_block_size(antithetic):
    model = MarketModel.uncorrelated([0.2, 0.3], [1.0, 1.0])
    small = simulate_gbm(model, PathConfig(horizon=1.0, paths=40, steps=8, seed=3, block_size=6, antithetic=antithetic))
    large = simulate_gbm(model, PathConfig(horizon=1.0, paths=40, steps=8, seed=3, block_size=64, antithetic=antithetic))
    assert np.array_equal(small.values, large.values)


def test_path_normals_are_keyed_by_path():
    whole = path_normals(seed=2, first_path=0, count=10, steps=5, dim=2)
    tail = path_normals(seed=2, first_path=6, count=4, steps=5, dim=2)
    assert whole.shape == (10, 5, 2)
    assert np.array_equal(whole[6:], tail)

    paired = path_normals(seed=2, first_path=4, count=4, steps=5, dim=1, antithetic=True)
    assert np.array_equal(paired[0::2], -paired[1::2])


def test_relative_price_is_a_martingale():
    ensemble = simulate_relative_price(0.2, PathConfig(horizon=1.0, paths=20000, steps=16, seed=5), s_m0=1.0)
    estimate = mc_estimate(ensemble, lambda v: v[:, 0])
    assert abs(estimate.mean - 1.0) <= 4.0 * estimate.stderr


# --- Index numeraire ---

@pytest.mark.parametrize("m0", [0.0, 2.0])
def test_index_state_is_absorbed_at_the_edges(m0):
    ensemble = simulate_index_state(0.2, PathConfig(horizon=1.0, paths=100, steps=32), m0=m0)
    assert np.all(ensemble.values == m0)
    assert np.all(ensemble.extras["s_n"] == 2.0 - m0)


def test_index_state_is_a_martingale():
    ensemble = simulate_index_state(0.2, PathConfig(horizon=1.0, paths=20000, steps=64, seed=1), m0=1.0)
    estimate = mc_estimate(ensemble, lambda v: v[:, 0])
    assert abs(estimate.mean - 1.0) <= 4.0 * estimate.stderr
    assert np.all((ensemble.values >= 0.0) & (ensemble.values <= 2.0))


def test_index_state_rejects_out_of_range_start():
    with pytest.raises(ArgumentError):
        simulate_index_state(0.2, PathConfig(horizon=1.0), m0=2.5)


# --- Symmetric passport account ---

def test_zero_diffusion_strategy_freezes_the_account():
    cfg = PathConfig(horizon=1.0, paths=200, steps=32, checkpoints=3)
    ensemble = simulate_account(0.2, zero_diffusion_strategy(), cfg, IndexState(m_n=1.0, x_n=1.3))
    assert np.allclose(ensemble.values, 1.3, atol=1e-14)


def test_zero_volatility_account_is_constant():
    cfg = PathConfig(horizon=1.0, paths=50, steps=16)
    ensemble = simulate_account(0.0, stop_loss_strategy(), cfg, IndexState(m_n=1.0, x_n=1.5))
    estimate = mc_estimate(ensemble, lambda v: np.maximum(v[:, 0] - 1.0, 0.0))
    assert estimate.mean == pytest.approx(0.5)
    assert estimate.stderr == 0.0


def test_account_shares_increments_with_the_index_state():
    cfg = PathConfig(horizon=1.0, paths=100, steps=16, seed=2)
    ensemble = simulate_account(0.2, fraction_strategy(0.0), cfg, IndexState(m_n=1.0, x_n=1.0))
    index = simulate_index_state(0.2, cfg, m0=1.0)
    assert np.allclose(ensemble.extras["m_n"], index.values[:, :, 0])


def test_infeasible_strategy_is_reported_with_its_time_index():
    strategy = StrategyField("smooth", "symmetric", _overinvested, name="overinvested")
    with pytest.raises(StrategyInfeasibleError) as excinfo:
        simulate_account(0.2, strategy, PathConfig(horizon=1.0, paths=10, steps=4), IndexState(1.0, 1.0))
    assert excinfo.value.time_index == 0


def test_account_rejects_classical_strategy():
    with pytest.raises(ArgumentError):
        simulate_account(0.2, constant_strategy([1.0]), PathConfig(horizon=1.0), IndexState(1.0, 1.0))


def test_index_state_validates_ranges():
    with pytest.raises(ArgumentError):
        IndexState(m_n=2.1, x_n=1.0)
    with pytest.raises(ArgumentError):
        IndexState(m_n=1.0, x_n=-0.1)
    assert IndexState(m_n=0.5, x_n=1.0).s_n == 1.5


# --- Classical passport portfolio ---

def test_zero_control_portfolio_is_constant(single_asset):
    cfg = PathConfig(horizon=1.0, paths=100, steps=16)
    ensemble = simulate_classical_portfolio(single_asset, constant_strategy([0.0]), cfg, p0=0.25)
    assert np.all(ensemble.values == 0.25)


def test_full_control_portfolio_replicates_the_asset(single_asset):
    cfg = PathConfig(horizon=1.0, paths=100, steps=16, seed=9)
    portfolio = simulate_classical_portfolio(single_asset, constant_strategy([1.0]), cfg)
    prices = simulate_gbm(single_asset, cfg)
    assert np.allclose(portfolio.terminal[:, 0], prices.terminal[:, 0] - 1.0, atol=1e-12)


def test_portfolio_quadratic_variation_matches_the_model():
    """
    Tests the Ito isometry on a two-asset uncorrelated portfolio.

    Purpose:
        With delta = (1, 1), the realized sum of squared portfolio increments
        and the model integral of sigma_1^2 S_1^2 + sigma_2^2 S_2^2 must agree
        on average over paths.
    """
    model = MarketModel.uncorrelated([0.2, 0.3], [1.0, 1.0])
    cfg = PathConfig(horizon=1.0, paths=4000, steps=128, seed=13)
    ensemble = simulate_classical_portfolio(model, constant_strategy([1.0, 1.0]), cfg)
    difference = ensemble.extras["realized_qv"] - ensemble.extras["model_qv"]
    stderr = difference.std(ddof=1) / np.sqrt(difference.size)
    assert abs(difference.mean()) <= 4.0 * stderr + 1e-3


def test_portfolio_rejects_symmetric_strategy(single_asset):
    with pytest.raises(ArgumentError):
        simulate_classical_portfolio(single_asset, stop_loss_strategy(), PathConfig(horizon=1.0))


# --- Estimation ---

def test_constant_payoff_estimate():
    ensemble = Ensemble(times=np.array([0.0, 1.0]), values=np.random.default_rng(0).normal(size=(10, 2, 1)))
    estimate = mc_estimate(ensemble, lambda v: np.ones(v.shape[0]))
    assert (estimate.mean, estimate.stderr, estimate.samples) == (1.0, 0.0, 10)


def test_out_of_the_money_estimate_is_zero(single_asset):
    ensemble = simulate_gbm(single_asset, PathConfig(horizon=1.0, paths=100, steps=8))
    estimate = mc_estimate(ensemble, lambda v: np.maximum(v[:, 0] - 1e6, 0.0))
    assert (estimate.mean, estimate.stderr) == (0.0, 0.0)


def test_antithetic_pairs_cancel_a_linear_payoff(single_asset):
    # One Euler step makes S(T) linear in the driving normal.
    cfg = PathConfig(horizon=1.0, paths=1000, steps=1, scheme="euler", antithetic=True)
    estimate = mc_estimate(simulate_gbm(single_asset, cfg), lambda v: v[:, 0])
    assert estimate.samples == 500
    assert estimate.mean == pytest.approx(1.0, abs=1e-12)
    assert estimate.stderr <= 1e-12


def test_estimate_rejects_empty_ensemble():
    ensemble = Ensemble(times=np.array([0.0]), values=np.empty((0, 1, 1)))
    with pytest.raises(ArgumentError):
        mc_estimate(ensemble, lambda v: v[:, 0])
