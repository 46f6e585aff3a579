"""Closed-set label fusion: per-voxel Dirichlet-Categorical updates.

Each voxel with num_classes = k carries concentrations alpha (k,), realized
as a symmetric prior alpha_0 plus integer observation counts.  Absorbing c
observations of class z is exact conjugacy: alpha_z += c.  The predictive
label distribution is alpha normalized.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import NDArray
from scipy.special import gammaln

from .errors import SemvoxError


def absorb(alpha: NDArray, z: int, c: int = 1) -> NDArray[np.float64]:
    """Posterior concentrations after c observations of class z in {1..k}."""
    alpha = np.asarray(alpha, np.float64)
    if not (1 <= z <= alpha.shape[-1]):
        raise SemvoxError(f"class id {z} outside {{1..{alpha.shape[-1]}}}")
    if c < 1 or int(c) != c:
        raise SemvoxError(f"absorb count must be a positive integer, got {c}")
    out = alpha.copy()
    out[..., z - 1] += c
    return out


def predictive(alpha: NDArray) -> NDArray[np.float64]:
    """Posterior predictive class probabilities alpha_i / sum(alpha)."""
    alpha = np.asarray(alpha, np.float64)
    if np.any(alpha <= 0):
        raise SemvoxError("concentrations must be positive")
    return alpha / alpha.sum(axis=-1, keepdims=True)


def argmax_class(alpha: NDArray) -> NDArray[np.int64]:
    """Most probable class id in {1..k}; ties resolve to the lowest id."""
    alpha = np.asarray(alpha)
    return np.argmax(alpha, axis=-1).astype(np.int64) + 1


def log_pdf(theta: NDArray, alpha: NDArray) -> float:
    """Dirichlet log-density at a point of the probability simplex."""
    theta = np.asarray(theta, np.float64)
    alpha = np.asarray(alpha, np.float64)
    if np.any(alpha <= 0):
        raise SemvoxError("concentrations must be positive")
    if theta.shape[-1] != alpha.shape[-1]:
        raise SemvoxError("theta and alpha dimensionality differ")
    if np.any(theta < 0) or not np.allclose(theta.sum(axis=-1), 1.0, atol=1e-9):
        raise SemvoxError("theta must lie on the probability simplex")
    norm = gammaln(alpha.sum(axis=-1)) - gammaln(alpha).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(theta > 0, np.log(theta), 0.0)
        bad = (theta == 0) & (alpha - 1 != 0)
        body = ((alpha - 1) * t).sum(axis=-1)
        body = np.where(np.any(bad & (alpha < 1), axis=-1), np.inf, body)
        body = np.where(np.any(bad & (alpha > 1), axis=-1), -np.inf, body)
    return float(norm + body)


def alpha_from_counts(counts: NDArray, prior_alpha: float) -> NDArray[np.float64]:
    return np.asarray(counts, np.float64) + prior_alpha


def counts_at(grid, coord) -> NDArray[np.float64]:
    (counts,) = grid.get(coord)
    return np.asarray(counts, np.float64)


def alpha_at(grid, coord) -> NDArray[np.float64]:
    return alpha_from_counts(counts_at(grid, coord), grid.payload.cfg.prior_alpha)


def predictive_at(grid, coord) -> NDArray[np.float64]:
    return predictive(alpha_at(grid, coord))


def label_map(grid):
    """(coords (N,3), labels (N,)) over active voxels; labels in {1..k}.

    Prior ties (zero counts everywhere) resolve to class 1 by the lowest-id
    rule; fused voxels always have at least one count.
    """
    coords, (counts,) = grid.active_values()
    return coords, argmax_class(counts)
