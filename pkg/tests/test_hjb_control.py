import math
import numpy as np
import pytest

from scipy.stats import norm

from core.errors import ArgumentError, ConfigurationError
from core.hjb_control import (
    LOG_TWO, PolicyMap, _AccountLattice, bs_boundary_value, constant_strategy, dyadic_battery, dyadic_strategy,
    maximize_basket_volatility_grid, named_strategy, optimal_passport_vertex, optimal_symmetric_strategy,
    passport_grid, policy_agreement, solve_fixed_strategy, solve_passport_hjb, solve_symmetric_fixed,
    solve_symmetric_passport, stop_loss_approximation, stop_loss_strategy, symmetric_grid, symmetric_value,
    vertex_candidates,
)
from core.market_model import MarketModel, basket_volatility, hinge
from core.path_engine import IndexState, PathConfig, mc_estimate, simulate_account, simulate_classical_portfolio
from core.pde_core import SpaceTimeGrid


@pytest.fixture
def single_asset():
    return MarketModel(sigma=[0.2], rho=[[1.0]], spot=[1.0])


@pytest.fixture(scope="module")
def symmetric_solution():
    """A coarse symmetric passport solve shared by the policy and boundary tests."""
    grid = symmetric_grid(0.2, 1.0, nodes_per_ln2=8, z1_min=-2.0, z2_range=(-2.0, 2.0), z2_nodes=51)
    surface, policy = solve_symmetric_passport(0.2, 1.0, grid)
    return grid, surface, policy


# --- Strategies ---

def test_optimal_symmetric_strategy():
    assert optimal_symmetric_strategy(0.8, 5.0) == 5.0
    assert optimal_symmetric_strategy(1.2, 5.0) == 0.0
    assert optimal_symmetric_strategy(0.5, 0.0) == 0.0
    with pytest.raises(ArgumentError):
        optimal_symmetric_strategy(2.5, 1.0)


@pytest.mark.parametrize("name, kind, contract", [
    ("none", "smooth", "symmetric"),
    ("full", "smooth", "symmetric"),
    ("stop-loss", "stop-loss", "symmetric"),
    ("stop-loss~0.1", "smooth", "symmetric"),
    ("zero-diffusion", "smooth", "symmetric"),
    ("fraction:0.25", "smooth", "symmetric"),
    ("constant:1,-0.5", "smooth", "classical"),
    ("dyadic:+-+-", "dyadic-piecewise", "classical"),
])
def test_named_strategy(name, kind, contract):
    strategy = named_strategy(name)
    assert (strategy.kind, strategy.contract) == (kind, contract)


@pytest.mark.parametrize("name", ["sometimes", "fraction:1.5", "dyadic:+-+", "constant:2", "vertex:1,1"])
def test_named_strategy_rejects_bad_names(name):
    with pytest.raises(ArgumentError):
        named_strategy(name)


def test_dyadic_strategy_switches_on_its_intervals():
    strategy = dyadic_strategy(1, [1.0, -1.0], horizon=2.0)
    s = np.ones((3, 1))
    assert np.all(strategy.control(0.5, s) == 1.0)
    assert np.all(strategy.control(1.5, s) == -1.0)
    assert np.all(strategy.control(2.0, s) == -1.0)


def test_dyadic_battery_covers_every_sign_pattern():
    battery = dyadic_battery(level=2)
    assert len(battery) == 16
    assert len({strategy.name for strategy in battery}) == 16


def test_constant_strategy_rejects_controls_outside_the_box():
    with pytest.raises(ArgumentError):
        constant_strategy([1.5])


# --- Rotated vertices ---

def test_vertex_for_uncorrelated_assets_is_a_box_vertex():
    model = MarketModel.uncorrelated([0.2, 0.3], [1.0, 1.0])
    choice = optimal_passport_vertex(model, [1.0, -1.0])
    assert not choice.clamped
    assert np.allclose(np.abs(choice.control), 1.0)
    assert np.allclose(sorted(choice.control.tolist()), [-1.0, 1.0])


def test_rotated_vertex_is_clamped_and_reported(caplog):
    """
    Tests the feasibility handling of a rotated vertex outside the box.

    Purpose:
        With sigma = (1, 1) and rho_12 = 0.5 the eigenvectors are (1, +-1)/sqrt(2),
        so Q^T (1, 1) = (sqrt(2), 0). The control must be clamped to (1, 0),
        a warning logged, and both basket volatilities reported.
    """
    model = MarketModel(sigma=[1.0, 1.0], rho=[[1.0, 0.5], [0.5, 1.0]], spot=[1.0, 1.0])
    choice = optimal_passport_vertex(model, [1.0, 1.0])

    assert np.allclose(choice.literal, [math.sqrt(2.0), 0.0])
    assert np.allclose(choice.control, [1.0, 0.0])
    assert choice.clamped
    assert choice.basket_vol_literal == pytest.approx(math.sqrt(2.0))
    assert choice.basket_vol_clamped == pytest.approx(1.0)
    assert "clamped" in caplog.text

    negated = optimal_passport_vertex(model, [-1.0, -1.0])
    assert np.allclose(negated.literal, -choice.literal)


def test_vertex_rejects_non_sign_input():
    with pytest.raises(ArgumentError):
        optimal_passport_vertex(MarketModel.uncorrelated([0.2], [1.0]), [0.5])


def test_candidates_stay_in_the_box_and_include_zero():
    model = MarketModel(sigma=[1.0, 1.0], rho=[[1.0, 0.5], [0.5, 1.0]], spot=[1.0, 1.0])
    rotated = vertex_candidates(model, "rotated")
    extended = vertex_candidates(model, "extended")
    assert np.all(np.abs(extended) <= 1.0)
    assert any(np.all(row == 0.0) for row in rotated)
    assert len(extended) > len(rotated)
    with pytest.raises(ConfigurationError):
        vertex_candidates(model, "everything")


# --- Classical passport ---

def test_zero_volatility_passport_keeps_its_payoff():
    model = MarketModel.uncorrelated([0.0], [1.0])
    grid = passport_grid(model, 1.0, p_nodes=21, x_nodes=5)
    surface, _ = solve_passport_hjb(model, 0.25, grid)
    p = grid.mesh()[:, 0].reshape(grid.shape)
    for layer in surface.values:
        assert np.allclose(layer, np.maximum(p - 0.25, 0.0))


def test_passport_policy_maximizes_basket_volatility():
    """
    Tests the recorded HJB control against a brute-force control grid.

    Purpose:
        On the first layer the data (p - K)^+ has no cross derivatives, so at the
        kink nodes the Hamiltonian is a_pp v_pp and the chosen candidate must
        attain the largest basket volatility. The oracle searches a 41 x 41 grid
        of controls in [-1, 1]^2.
    """
    model = MarketModel(sigma=[0.3, 0.3], rho=[[1.0, -0.9], [-0.9, 1.0]], spot=[1.0, 1.0])
    grid = passport_grid(model, 0.01, p_nodes=21, x_nodes=7)
    surface, policy = solve_passport_hjb(model, 0.0, grid)

    kink = grid.nearest_index([0.0, 0.0, 0.0])[0]
    controls = policy.controls(0.0)
    x1, x2 = grid.axes()[1], grid.axes()[2]
    for j in range(1, len(x1) - 1):
        for k in range(1, len(x2) - 1):
            s = np.exp([x1[j], x2[k]])
            _, best = maximize_basket_volatility_grid(model, s)
            chosen = basket_volatility(model, s, controls[kink, j, k])
            assert chosen == pytest.approx(best, abs=1e-6)


def test_optimal_value_dominates_every_dyadic_strategy(single_asset):
    grid = passport_grid(single_asset, 1.0, p_nodes=41, x_nodes=15)
    surface, _ = solve_passport_hjb(single_asset, 0.0, grid)
    point = [0.0, 0.0]
    value = float(surface.interpolate(point)[0])
    assert value > 0.0

    for strategy in dyadic_battery(level=2):
        fixed = float(solve_fixed_strategy(single_asset, strategy, 0.0, grid).interpolate(point)[0])
        assert value >= fixed - 1e-3, strategy.name


@pytest.mark.slow
def test_fixed_strategy_pde_matches_monte_carlo(single_asset):
    grid = passport_grid(single_asset, 1.0, p_nodes=61, x_nodes=21)
    pde = float(solve_fixed_strategy(single_asset, constant_strategy([1.0]), 0.0, grid).interpolate([0.0, 0.0])[0])
    ensemble = simulate_classical_portfolio(single_asset, constant_strategy([1.0]),
                                            PathConfig(horizon=1.0, paths=20000, steps=128, seed=17))
    estimate = mc_estimate(ensemble, hinge())
    assert abs(pde - estimate.mean) <= 3.0 * estimate.stderr + 1e-2


def test_passport_grid_rejects_four_assets():
    model = MarketModel.uncorrelated([0.2] * 4, [1.0] * 4)
    with pytest.raises(ConfigurationError):
        passport_grid(model, 1.0)


def test_policy_rows_enumerate_every_stored_node():
    grid = SpaceTimeGrid((0.0,), (1.0,), (3,), final_time=1.0, steps=1)
    policy = PolicyMap(grid, np.array([0.0, 1.0]), np.zeros((2, 3), dtype=int), np.array([[1.0], [-1.0]]),
                       "classical")
    rows = list(policy.rows())
    assert len(rows) == 6
    assert rows[0] == (0.0, 0.0, 1.0)


# --- Symmetric passport ---

def test_bs_boundary_value():
    assert bs_boundary_value(0.0, 1.0, 0.2) == pytest.approx(2.0 * norm.cdf(0.1) - 1.0, abs=1e-12)
    assert bs_boundary_value(0.0, 1.0, 0.2) == pytest.approx(0.0796557, abs=1e-6)
    assert bs_boundary_value(1.0, 0.0, 0.2) == pytest.approx(math.e - 1.0)
    assert bs_boundary_value(-40.0, 1.0, 0.2) == pytest.approx(0.0, abs=1e-12)


def test_boundary_row_is_the_closed_form(symmetric_solution):
    grid, surface, _ = symmetric_solution
    z2 = grid.axes()[1]
    assert grid.axes()[0][-1] == pytest.approx(LOG_TWO)
    for t, layer in zip(surface.times, surface.values):
        assert np.allclose(layer[-1, :], bs_boundary_value(z2, t, 0.2), atol=1e-12)


def test_policy_is_stop_loss_where_gamma_is_positive(symmetric_solution):
    _, surface, policy = symmetric_solution
    agreement, count = policy_agreement(surface, policy)
    assert count > 0
    assert agreement >= 0.99


def test_forced_strategy_is_dominated(symmetric_solution):
    grid, surface, _ = symmetric_solution
    for forced in ("none", "full"):
        fixed = solve_symmetric_fixed(0.2, 1.0, grid, forced)
        assert np.all(fixed.final <= surface.final + 1e-4)


def test_pure_strategies_diffuse_along_one_lattice_axis():
    """
    Tests the account-lattice generators of the two symmetric candidates.

    Purpose:
        All in S must leave ln X_S untouched and nothing in S must leave ln X_M
        untouched, so that each candidate is a 1-D diffusion with a monotone
        3-point stencil and no mixed term.
    """
    grid = symmetric_grid(0.2, 1.0, nodes_per_ln2=4, z2_nodes=21)
    lattice = _AccountLattice(grid, 0.2)
    a, b = lattice.coefficients(0.2, np.array([1.0, 0.0]))
    full, none = 0, 1
    assert np.all(a[:, :, 0, 1] == 0.0)
    assert np.allclose(a[full, :, 0, 0], 0.0) and np.allclose(b[full, :, 0], 0.0)
    assert np.allclose(a[none, :, 1, 1], 0.0) and np.allclose(b[none, :, 1], 0.0)
    assert np.allclose(a[full, :, 1, 1], 0.02) and np.allclose(a[none, :, 0, 0], 0.02)
    assert np.allclose(b[full, :, 1], 0.02 * (lattice.s - 1.0))
    assert np.allclose(lattice.s + lattice.m, 2.0)


def test_lattice_samples_back_onto_the_target_nodes():
    grid = symmetric_grid(0.2, 1.0, nodes_per_ln2=4, z2_nodes=21)
    lattice = _AccountLattice(grid, 0.2)
    sampled = lattice.sample(np.exp(lattice.grid.mesh()[:, 1]))
    z1, z2 = grid.axes()
    m = 2.0 - np.exp(z1[:-1])
    # e^B = X_N / M_N; linear sampling of the exponential is exact to O(h^2)
    assert np.allclose(sampled, np.exp(z2)[None, :] / m[:, None], rtol=2.0 * min(grid.spacing) ** 2)


def test_fixed_strategies_share_the_optimum_lattice(symmetric_solution):
    grid, surface, _ = symmetric_solution
    fixed = solve_symmetric_fixed(0.2, 1.0, grid, "full")
    assert np.array_equal(fixed.times, surface.times)
    assert np.array_equal(fixed.final[-1, :], surface.final[-1, :])
    assert symmetric_value(fixed, 1.0, 1.0) <= symmetric_value(surface, 1.0, 1.0)


def test_smoothed_stop_loss_approaches_the_optimum(symmetric_solution):
    grid, surface, _ = symmetric_solution
    optimum = symmetric_value(surface, 1.0, 1.0)
    values = stop_loss_approximation(0.2, 1.0, grid, eps_values=(0.4, 0.05))
    gaps = [optimum - symmetric_value(values[eps], 1.0, 1.0) for eps in (0.4, 0.05)]
    assert gaps[1] <= gaps[0] + 1e-6
    assert gaps[1] >= -1e-4


def test_zero_volatility_symmetric_value_is_intrinsic():
    grid = symmetric_grid(0.0, 1.0, nodes_per_ln2=8, z2_nodes=51, z2_range=(-1.0, 1.0))
    surface, _ = solve_symmetric_passport(0.0, 0.5, grid)
    assert symmetric_value(surface, 1.0, 2.0) == pytest.approx(1.5, abs=1e-2)


def test_symmetric_grid_must_end_at_log_two():
    grid = SpaceTimeGrid((-1.0, -1.0), (0.5, 1.0), (11, 11), final_time=1.0)
    with pytest.raises(ConfigurationError):
        solve_symmetric_passport(0.2, 1.0, grid)


def test_symmetric_value_rejects_bad_start():
    grid = symmetric_grid(0.2, 0.1, nodes_per_ln2=4, z2_nodes=11)
    surface, _ = solve_symmetric_passport(0.2, 1.0, grid)
    with pytest.raises(ArgumentError):
        symmetric_value(surface, 2.0, 1.0)


@pytest.mark.slow
def test_symmetric_pde_matches_stop_loss_monte_carlo():
    grid = symmetric_grid(0.2, 1.0)
    surface, _ = solve_symmetric_passport(0.2, 1.0, grid)
    pde = symmetric_value(surface, 1.0, 1.0)
    ensemble = simulate_account(0.2, stop_loss_strategy(), PathConfig(horizon=1.0, paths=40000, seed=23),
                                IndexState(1.0, 1.0))
    estimate = mc_estimate(ensemble, hinge(1.0))
    assert abs(pde - estimate.mean) <= 3.0 * estimate.stderr + 5e-3
