import logging
import math
import threading

from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache
from typing import Tuple

from core.hjb_control import (
    LOG_TWO, PolicyMap, policy_agreement, solve_symmetric_passport, symmetric_grid, symmetric_value,
)
from core.pde_core import ValueSurface

logger = logging.getLogger(__name__)

MAX_SURFACES = 8


@dataclass(frozen=True)
class SymmetricQuote:
    value: float
    policy_agreement: float
    gamma_nodes: int
    cached: bool


class SymmetricSurfaceCache:
    """
    Keeps recently solved symmetric passport surfaces in memory.

    A solve takes seconds, while a request for another (m0, x0) on the same
    contract only needs an interpolation, so surfaces are keyed by
    (sigma, strike, horizon, nodes per ln 2) and evicted least-recently-used.
    """
    def __init__(self, max_surfaces: int = MAX_SURFACES):
        self.max_surfaces = max_surfaces
        self._surfaces: "OrderedDict[Tuple, Tuple[ValueSurface, PolicyMap, float, int]]" = OrderedDict()
        self._lock = threading.Lock()

    @staticmethod
    def nodes_per_ln2(space_step: float) -> int:
        return max(2, math.ceil(LOG_TWO / space_step - 1e-9))

    def _solve(self, sigma: float, strike: float, horizon: float, nodes: int):
        grid = symmetric_grid(sigma, horizon, nodes_per_ln2=nodes)
        surface, policy = solve_symmetric_passport(sigma, strike, grid)
        agreement, count = policy_agreement(surface, policy)
        return surface, policy, agreement, count

    def quote(self, sigma: float, strike: float, horizon: float, m0: float, x0: float,
              space_step: float) -> SymmetricQuote:
        """
        Value of the symmetric passport at (m0, x0), solving the surface only if
        it is not cached.

        Raises:
            ArgumentError: if (m0, x0) falls outside the solved grid.
        """
        key = (float(sigma), float(strike), float(horizon), self.nodes_per_ln2(space_step))
        with self._lock:
            entry = self._surfaces.get(key)
            cached = entry is not None
            if cached:
                self._surfaces.move_to_end(key)
        if not cached:
            logger.info("Solving symmetric surface for sigma=%g, K=%g, T=%g, %d nodes per ln 2.", *key)
            entry = self._solve(*key)
            with self._lock:
                self._surfaces[key] = entry
                while len(self._surfaces) > self.max_surfaces:
                    self._surfaces.popitem(last=False)

        surface, _, agreement, count = entry
        return SymmetricQuote(value=symmetric_value(surface, m0, x0), policy_agreement=agreement,
                              gamma_nodes=count, cached=cached)

    def __len__(self) -> int:
        return len(self._surfaces)


# One cache per process; FastAPI resolves the dependency to the same instance on every request.
@lru_cache
def get_surface_cache() -> SymmetricSurfaceCache:
    return SymmetricSurfaceCache()
