"""Alternating-projection utilities for halfspace systems {x : G x <= h}."""

import numpy as np


def max_violation(G, h, x) -> float:
    return float(np.max(G @ x - h, initial=0.0))


def project_polytope(G, h, x, sweeps: int = 500, tol: float = 1e-12) -> np.ndarray:
    """Euclidean projection onto {x : G x <= h} by Dykstra's alternating method.

    Exact in the limit for intersections of halfspaces; each sweep costs
    O(rows * dim).
    """
    G = np.asarray(G, float)
    h = np.asarray(h, float)
    x = np.asarray(x, float).copy()
    if max_violation(G, h, x) <= tol:
        return x
    K = G.shape[0]
    norms2 = np.einsum("ij,ij->i", G, G)
    corrections = np.zeros((K, x.shape[0]))
    for _ in range(sweeps):
        shift = 0.0
        for k in range(K):
            if norms2[k] <= 1e-30:
                continue
            y = x + corrections[k]
            excess = (G[k] @ y - h[k]) / norms2[k]
            x_new = y - max(excess, 0.0) * G[k]
            corrections[k] = y - x_new
            shift = max(shift, float(np.max(np.abs(x_new - x))))
            x = x_new
        if shift <= tol and max_violation(G, h, x) <= 10 * tol:
            break
    return x


def feasible_point(G, h, x0, lo=None, hi=None, sweeps: int = 500,
                   tol: float = 1e-9):
    """Cyclic projections from x0 toward {G x <= h} intersected with box [lo, hi].

    Returns (x, ok). ok is False when the residual stays above tol after the
    sweep cap (the system may be infeasible or just slow).
    """
    G = np.asarray(G, float)
    h = np.asarray(h, float)
    x = np.asarray(x0, float).copy()
    norms2 = np.einsum("ij,ij->i", G, G)
    for k in range(G.shape[0]):
        if norms2[k] <= 1e-30 and h[k] < -tol:
            return x, False

    def clip(v):
        if lo is not None:
            v = np.maximum(v, lo)
        if hi is not None:
            v = np.minimum(v, hi)
        return v

    x = clip(x)
    for _ in range(sweeps):
        for k in range(G.shape[0]):
            if norms2[k] <= 1e-30:
                continue
            excess = G[k] @ x - h[k]
            if excess > 0:
                x = x - (excess / norms2[k]) * G[k]
        x = clip(x)
        if max_violation(G, h, x) <= tol:
            return x, True
    return x, max_violation(G, h, x) <= tol
