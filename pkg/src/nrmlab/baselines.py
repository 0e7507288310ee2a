"""Comparison policies: the clairvoyant fluid price and an explore-then-commit
grid policy (a transparent stand-in for the blind-pricing benchmark of the
earlier literature, not a reimplementation of it)."""

import numpy as np
from dataclasses import dataclass
from scipy.optimize import linprog

from .instance import Instance
from .fluid import FluidSolution
from .sim import CommitPolicy

_FOREVER = 1 << 62


@dataclass(frozen=True)
class EtcConfig:
    grid_points_per_axis: int = 8
    exploration_fraction: float = None  # None: clamp(5 T^{-1/3}, .05, .5)

    def __post_init__(self):
        if self.grid_points_per_axis < 2:
            raise ValueError("need at least 2 grid points per axis")
        if self.exploration_fraction is not None and not 0 < self.exploration_fraction < 1:
            raise ValueError("exploration_fraction must lie in (0, 1)")

    def resolve_fraction(self, T: int) -> float:
        if self.exploration_fraction is not None:
            return self.exploration_fraction
        return min(0.5, max(0.05, 5.0 * T ** (-1.0 / 3.0)))


class ClairvoyantPolicy(CommitPolicy):
    """Posts the fluid-optimal price every period."""

    name = "clairvoyant"

    def __init__(self, instance: Instance, fluid: FluidSolution):
        self.p_star = np.asarray(fluid.p_star, float)
        super().__init__(instance.N)

    def _driver(self):
        while True:
            yield (self.p_star, _FOREVER)


def clairvoyant_policy(instance: Instance, fluid: FluidSolution) -> ClairvoyantPolicy:
    return ClairvoyantPolicy(instance, fluid)


class ExploreThenCommitPolicy(CommitPolicy):
    """Phase 1 cycles a uniform price grid recording average demand per point;
    phase 2 plays the revenue-maximizing inventory-feasible mixture of grid
    prices found by a small LP over mixture weights."""

    name = "etc"

    def __init__(self, instance: Instance, config: EtcConfig = None):
        self.instance = instance
        self.config = config or EtcConfig()
        g = np.linspace(instance.price_min, instance.price_max,
                        self.config.grid_points_per_axis)
        mesh = np.meshgrid(*([g] * instance.N), indexing="ij")
        self.grid = np.stack([m.ravel() for m in mesh], axis=1)
        frac = self.config.resolve_fraction(instance.T)
        self.n_explore = max(len(self.grid), int(round(frac * instance.T)))
        self.D_hat = np.zeros((len(self.grid), instance.N))
        self.mixture = None
        super().__init__(instance.N)

    def _driver(self):
        K = len(self.grid)
        per = self.n_explore // K
        extra = self.n_explore - per * K
        for k in range(K):
            length = per + (1 if k < extra else 0)
            if length <= 0:
                continue
            self.D_hat[k] = yield (self.grid[k], length)
        schedule = self._commit_schedule()
        for price, length in schedule[:-1]:
            yield (price, length)
        while True:
            yield (schedule[-1][0], _FOREVER)

    def _commit_schedule(self):
        inst = self.instance
        K = len(self.grid)
        remaining = max(inst.T - self.n_explore, 1)
        rev = np.einsum("kn,kn->k", self.grid, self.D_hat)
        consumption = inst.A @ self.D_hat.T  # (M, K)
        res = linprog(-rev, A_ub=consumption, b_ub=inst.gamma,
                      A_eq=np.ones((1, K)), b_eq=[1.0], bounds=[(0.0, 1.0)] * K,
                      method="highs")
        if not res.success:
            # No feasible mixture: fall back to the highest-price grid point.
            self.mixture = None
            return [(self.grid[-1], remaining)]
        weights = np.maximum(res.x, 0.0)
        self.mixture = weights
        lengths = np.floor(weights * remaining).astype(int)
        order = np.argsort(-weights)
        schedule = [(self.grid[k], int(lengths[k])) for k in order if lengths[k] > 0]
        if not schedule:
            schedule = [(self.grid[int(np.argmax(rev))], remaining)]
        return schedule


def explore_then_commit_policy(instance: Instance,
                               config: EtcConfig = None) -> ExploreThenCommitPolicy:
    return ExploreThenCommitPolicy(instance, config)
