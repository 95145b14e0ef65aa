import pytest

from core.surface_cache import SymmetricSurfaceCache, get_surface_cache
from unittest.mock import MagicMock


@pytest.fixture
def mock_cache(mocker):
    """
    A SymmetricSurfaceCache whose solver and interpolation are mocked.

    Solving a real surface takes seconds per key, and these tests are about the
    keying and eviction logic only.

    Args:
        mocker: The mocker fixture provided by the pytest-mock plugin.

    Returns:
        A cache holding at most two surfaces, with `_solve` replaced by a mock.
    """
    cache = SymmetricSurfaceCache(max_surfaces=2)
    mocker.patch.object(cache, "_solve", side_effect=lambda *key: (MagicMock(), MagicMock(), 0.99, 10))
    mocker.patch("core.surface_cache.symmetric_value", return_value=0.08)
    return cache


def test_quote_solves_once_per_contract(mock_cache):
    """
    Tests that a second quote on the same contract reuses the surface.

    Purpose:
        Only (sigma, strike, horizon, nodes per ln 2) identify a surface; a
        different (m0, x0) must not trigger another solve.

    Mocks:
        - `_solve`: returns placeholder surfaces with a fixed agreement.
        - `symmetric_value`: returns a fixed value instead of interpolating.
    """
    first = mock_cache.quote(0.2, 1.0, 1.0, 1.0, 1.0, 0.0433)
    second = mock_cache.quote(0.2, 1.0, 1.0, 0.5, 1.2, 0.0433)

    assert first.cached is False
    assert second.cached is True
    assert (second.value, second.policy_agreement, second.gamma_nodes) == (0.08, 0.99, 10)
    mock_cache._solve.assert_called_once_with(0.2, 1.0, 1.0, 17)


def test_least_recently_used_surface_is_evicted(mock_cache):
    mock_cache.quote(0.2, 1.0, 1.0, 1.0, 1.0, 0.0433)
    mock_cache.quote(0.3, 1.0, 1.0, 1.0, 1.0, 0.0433)
    mock_cache.quote(0.2, 1.0, 1.0, 1.0, 1.0, 0.0433)
    mock_cache.quote(0.4, 1.0, 1.0, 1.0, 1.0, 0.0433)

    assert len(mock_cache) == 2
    assert mock_cache.quote(0.2, 1.0, 1.0, 1.0, 1.0, 0.0433).cached is True
    assert mock_cache.quote(0.3, 1.0, 1.0, 1.0, 1.0, 0.0433).cached is False


@pytest.mark.parametrize("space_step, expected", [(0.0433, 17), (0.35, 2), (0.1, 7), (0.6931471805599453 / 8, 8)])
def test_space_step_rounds_to_whole_cells_per_ln2(space_step, expected):
    assert SymmetricSurfaceCache.nodes_per_ln2(space_step) == expected


def test_get_surface_cache_is_a_singleton():
    assert get_surface_cache() is get_surface_cache()
