import math
import numpy as np
import pytest

from core.errors import ArgumentError, HypothesisError
from core.market_model import constant_field, from_function, hinge, quadratic, quartic, sine_modulated_field
from core.pde_core import SpaceTimeGrid
from core.structure_analysis import (
    CriterionFunction, check_matrix_order, convexity_criterion_critical, convexity_criterion_global,
    find_convexity_violation, hormander_rank, local_convexity_preservation, numerical_hessian, replay_witness,
    solved_convexity, verify_comparison,
)


def _unit(i: int, n: int = 2):
    return lambda x: np.eye(n)[i]


def _x1_power(power: int):
    return lambda x: np.array([0.0, x[0] ** power])


def _first_coordinate_field(points: np.ndarray) -> np.ndarray:
    out = np.zeros((points.shape[0], 2, 2))
    out[:, 0, 0] = 1.0 + 0.5 * np.sin(points[:, 0])
    out[:, 1, 1] = 1.0
    return out


@pytest.fixture
def comparison_pair():
    return constant_field(np.diag([0.5, 0.5])), constant_field(np.diag([1.0, 0.5]))


@pytest.fixture
def comparison_grid():
    return SpaceTimeGrid((-6.0, -1.0), (6.0, 1.0), (241, 3), final_time=0.5, stored_layers=2)


# --- Coefficient order ---

def test_identical_fields_are_ordered_but_not_strictly():
    A = constant_field(np.diag([0.5, 0.5]))
    report = check_matrix_order(A, A)
    assert report.verdict == "ordered"
    assert report.psd_gap == 0.0 and report.entry11_gap == 0.0


def test_strict_order_in_the_first_entry(comparison_pair):
    report = check_matrix_order(*comparison_pair)
    assert report.verdict == "ordered-strict-11"
    assert report.psd_gap == pytest.approx(0.0, abs=1e-15)
    assert report.entry11_gap == pytest.approx(0.5)


def test_crossed_fields_are_unordered():
    report = check_matrix_order(constant_field(np.diag([1.0, 0.0])), constant_field(np.diag([0.0, 1.0])))
    assert report.verdict == "unordered"


def test_order_needs_matching_dimensions():
    with pytest.raises(ArgumentError):
        check_matrix_order(constant_field([[1.0]]), constant_field(np.eye(2)))


# --- Comparison ---

def test_comparison_gap_matches_bachelier(comparison_pair, comparison_grid):
    """
    Tests the comparison principle on a pair with a closed-form gap.

    Purpose:
        Under constant a_11 the hinge solves to the Bachelier price with
        s = sqrt(2 a_11 t), so at x_1 = 0 the gap is (s' - s) phi(0). The gap must
        be nonnegative everywhere in the interior and the run must sit inside the
        theorem's hypotheses (strict a_11 order, data in x_1 only).
    """
    report = verify_comparison(*comparison_pair, hinge(), comparison_grid)
    oracle = (math.sqrt(2.0 * 1.0 * 0.5) - math.sqrt(2.0 * 0.5 * 0.5)) / math.sqrt(2.0 * math.pi)
    gap_at_strike = float(report.upper.interpolate([0.0, 0.0])[0] - report.lower.interpolate([0.0, 0.0])[0])

    assert report.within_hypotheses
    assert report.min_gap >= -1e-6
    assert gap_at_strike == pytest.approx(oracle, abs=5e-3)
    assert report.positive_on_gamma


def test_comparison_of_a_field_with_itself_has_no_gap(comparison_grid):
    A = constant_field(np.diag([0.5, 0.5]))
    report = verify_comparison(A, A, hinge(), comparison_grid)
    assert np.max(np.abs(report.gap())) <= 1e-12
    assert not report.within_hypotheses


def test_comparison_tags_multivariate_data(comparison_pair):
    grid = SpaceTimeGrid((-3.0, -3.0), (3.0, 3.0), (31, 31), final_time=0.1, stored_layers=2)
    payoff = lambda mesh: np.maximum(mesh[:, 0], 0.0) + np.maximum(mesh[:, 1], 0.0)  # noqa: E731
    report = verify_comparison(*comparison_pair, payoff, grid)
    assert not report.within_hypotheses
    assert any("x_1 only" in note for note in report.notes)


def test_comparison_refuses_unordered_fields(comparison_grid):
    with pytest.raises(HypothesisError):
        verify_comparison(constant_field(np.diag([1.0, 0.0])), constant_field(np.diag([0.0, 1.0])), hinge(),
                          comparison_grid)


def test_comparison_evaluates_at_the_requested_time(comparison_pair, comparison_grid):
    report = verify_comparison(*comparison_pair, hinge(), comparison_grid, t_eval=0.25)
    assert report.lower.grid.final_time == 0.25


# --- Convexity criteria ---

def test_numerical_hessian_is_exact_on_quadratics():
    points = np.array([[0.3, -1.2], [2.0, 0.5]])
    hessian = numerical_hessian(lambda p: p[:, 0] ** 2 + 3.0 * p[:, 0] * p[:, 1], points)
    assert np.allclose(hessian, [[2.0, 3.0], [3.0, 0.0]], atol=1e-6)


def test_criterion_function_of_quartic_data():
    A = constant_field(np.diag([0.5, 1.0]))
    g = CriterionFunction(A, quartic())
    x = np.array([[1.0, 0.0], [-2.0, 1.0]])
    assert np.allclose(g(x), 12.0 * 0.5 * x[:, 0] ** 2, atol=1e-6)


def test_global_criterion_passes_for_constant_coefficients():
    A = constant_field(np.diag([0.5, 1.0]))
    assert convexity_criterion_global(A, quadratic()).passed
    assert convexity_criterion_global(A, quartic()).passed


def test_global_criterion_fails_with_replayable_witness():
    """
    Tests the sine-coefficient counterexample to the global criterion.

    Purpose:
        With a_11 = 1 + sin(x_2) / 2 and f = x_1^2, g = 2 + sin(x_2) has a
        negative second derivative in x_2 wherever sin(x_2) > 0. The report must
        fail and carry a witness whose replayed value is negative.
    """
    A = sine_modulated_field(np.eye(2), 0.5, axis=1)
    report = convexity_criterion_global(A, quadratic())

    assert not report.passed
    assert report.witness is not None
    assert report.min_value < 0.0
    replayed = replay_witness(report.witness, A, quadratic())
    assert replayed == pytest.approx(report.witness.value, abs=1e-9)
    assert replayed < 0.0
    assert report.witness.to_dict()["kind"] == "criterion"


def test_replaying_a_criterion_witness_needs_the_payoff():
    A = sine_modulated_field(np.eye(2), 0.5, axis=1)
    witness = convexity_criterion_global(A, quadratic()).witness
    with pytest.raises(ArgumentError):
        replay_witness(witness, A)


def test_critical_set_criterion_is_vacuous_for_strictly_curved_data():
    A = sine_modulated_field(np.eye(2), 0.5, axis=1)
    report = convexity_criterion_critical(A, quadratic())
    assert report.passed
    assert report.nodes_checked == 0
    assert any("vacuously" in note for note in report.notes)


def test_critical_set_criterion_for_quartic_data():
    A = sine_modulated_field(np.eye(2), 0.5, axis=1)
    report = convexity_criterion_critical(A, quartic())
    assert report.passed
    assert report.nodes_checked > 0


def test_solved_sine_example_is_not_convex_despite_the_critical_set_criterion():
    """
    Tests the solve-and-scan check on the sine example with f = x_1^2.

    Purpose:
        The critical-set criterion passes vacuously there, but the solution is
        x_1^2 + 2t + (1 - e^-t) sin(x_2), whose second derivative in x_2 is
        -(1 - e^-t) sin(x_2). The scan must find that negative curvature along
        e_2 where sin(x_2) peaks, and its witness must replay.
    """
    A = sine_modulated_field(np.eye(2), 0.5, axis=1)
    t = 0.5
    assert convexity_criterion_critical(A, quadratic()).passed

    report = solved_convexity(A, quadratic(), t=t)

    assert not report.passed
    assert report.mode == "solved"
    assert report.min_value == pytest.approx(-(1.0 - math.exp(-t)), abs=1e-2)
    witness = report.witness
    assert witness.kind == "solved"
    assert witness.direction == (0, 1)
    assert math.sin(witness.point[1]) > 0.95
    assert all(abs(x) <= 3.0 + 1e-9 for x in witness.point)
    assert replay_witness(witness, A, quadratic()) == pytest.approx(witness.value, rel=1e-9, abs=1e-12)


def test_solved_quartic_data_under_the_sine_field_is_not_convex():
    A = sine_modulated_field(np.eye(2), 0.5, axis=1)
    assert convexity_criterion_critical(A, quartic()).passed
    report = solved_convexity(A, quartic(), t=0.1, box=2.0, nodes=21)
    assert not report.passed
    assert report.witness.direction == (0, 1)


def test_solved_value_under_constant_coefficients_stays_convex():
    report = solved_convexity(constant_field(np.diag([0.5, 1.0])), quartic(), t=0.2, box=2.0, nodes=21)
    assert report.passed
    assert report.witness is None
    assert report.nodes_checked == 21 * 21


def test_replaying_a_solved_witness_needs_the_payoff():
    A = sine_modulated_field(np.eye(2), 0.5, axis=1)
    witness = solved_convexity(A, quadratic(), t=0.5).witness
    with pytest.raises(ArgumentError, match="solved"):
        replay_witness(witness, A)
    with pytest.raises(ArgumentError):
        solved_convexity(A, quadratic(), t=0.0)


def test_local_preservation_for_constant_coefficients():
    report = local_convexity_preservation(constant_field(np.diag([0.5, 1.0])), quadratic())
    assert report.passed


# --- Violation search ---

@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_no_violation_under_constant_coefficients(seed):
    """
    Tests that hinge sums stay convex under constant coefficients.

    Purpose:
        Heat flow preserves convexity, so any witness here would come from the
        extrapolated box edges. The search solves on a padded grid and must
        come back empty for every seed.
    """
    assert find_convexity_violation(constant_field(np.eye(2)), budget=5, seed=seed) is None


def test_violation_found_under_sine_coefficients():
    A = sine_modulated_field(np.eye(2), 0.5, axis=1)
    witness = find_convexity_violation(A, budget=200, seed=0)

    assert witness is not None
    assert witness.value < -1e-4
    assert all(abs(x) <= 3.0 + 1e-9 for x in witness.point)
    assert witness.to_dict()["grid"]["lower"][0] < -3.0
    assert replay_witness(witness, A) == pytest.approx(witness.value, rel=1e-9, abs=1e-12)
    assert witness.to_dict()["payoff"]["family"] == "hinge-sum"


def test_univariate_data_stays_convex():
    A = from_function(2, _first_coordinate_field, growth=(1.5, 0.0))
    assert find_convexity_violation(A, budget=20, family="univariate") is None


def test_violation_search_rejects_unknown_family():
    with pytest.raises(ArgumentError):
        find_convexity_violation(constant_field(np.eye(2)), family="spline")


# --- Hormander condition ---

def test_coordinate_fields_span_at_depth_zero():
    result = hormander_rank([_unit(0), _unit(1)], [0.3, -0.7])
    assert result.satisfied and result.depth == 0


def test_grushin_pair_needs_one_bracket():
    result = hormander_rank([_unit(0), _x1_power(1)], [0.0, 0.0])
    assert result.satisfied
    assert result.depth == 1


def test_grushin_pair_spans_immediately_off_the_axis():
    assert hormander_rank([_unit(0), _x1_power(1)], [1.0, 0.0]).depth == 0


def test_quadratic_degeneracy_needs_two_brackets():
    result = hormander_rank([_unit(0), _x1_power(2)], [0.0, 0.0])
    assert result.satisfied
    assert result.depth == 2


def test_single_field_never_spans():
    result = hormander_rank([_unit(0)], [0.0, 0.0], max_depth=3)
    assert not result.satisfied
    assert result.depth is None
    assert result.rank == 1


def test_drift_brackets_count_towards_the_span():
    drift = _x1_power(1)
    result = hormander_rank([_unit(0)], [0.0, 0.0], drift=drift)
    assert result.satisfied and result.depth == 1


def test_hormander_rejects_empty_field_list():
    with pytest.raises(ArgumentError):
        hormander_rank([], [0.0, 0.0])
