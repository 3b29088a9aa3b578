"""Numerical primitives: multivariate-normal rectangle probabilities and
tensor-product Gauss-Hermite quadrature for standard-normal expectations.

Every analytic quantity in this package reduces to integrals of
multivariate-normal rectangle probabilities against a standard-normal
outer measure.  Two rectangle integrators are provided:

* a deterministic recursive-quadrature evaluator for correlation matrices
  with product structure ``rho[i, j] = lam[i] / lam[j]`` (i <= j).  All
  sequences of nested group means have this structure, so it covers every
  internal caller and is exact to quadrature accuracy;
* a deterministic Genz separation-of-variables integrator on an
  unscrambled Sobol sequence for general positive semi-definite matrices.

Infinite limits are represented by ``numpy.inf`` and handled natively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from numpy.polynomial.legendre import leggauss
from scipy.special import ndtr, ndtri

__all__ = [
    "GridCapacityError",
    "MatrixDomainError",
    "QuadratureGrid",
    "Rectangle",
    "chain_weights",
    "gauss_hermite_grid",
    "integrate_over_grid",
    "mvn_rect_prob",
    "validate_correlation",
]

# Plenty for spectral-accuracy band recursions at the dimensions used here.
_BAND_NODES = 48
# Hard cap on materialised tensor grids (64**4 points exactly).
MAX_GRID_POINTS = 2**24
# Standard-normal mass beyond +-8.5 is < 1e-16; used only to truncate
# genuinely infinite limits inside the integrators.
_TAIL = 8.5

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class MatrixDomainError(ValueError):
    """Correlation matrix is not symmetric PSD with unit diagonal."""


class GridCapacityError(ValueError):
    """Requested tensor grid exceeds the configured size budget."""


@dataclass(frozen=True)
class Rectangle:
    """Integration region ``lower <= x <= upper``; entries may be +-inf."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-d and the same length")
        if np.any(lo > hi):
            raise ValueError("rectangle requires lower <= upper elementwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.size


def validate_correlation(mat) -> np.ndarray:
    """Validate a correlation matrix; returns it as a float ndarray."""
    m = np.asarray(mat, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise MatrixDomainError("correlation matrix must be square")
    if not np.allclose(m, m.T, atol=1e-10):
        raise MatrixDomainError("correlation matrix must be symmetric")
    if not np.allclose(np.diag(m), 1.0, atol=1e-10):
        raise MatrixDomainError("correlation matrix must have unit diagonal")
    if np.any(np.abs(m) > 1.0 + 1e-10):
        raise MatrixDomainError("correlation entries must lie in [-1, 1]")
    evals = np.linalg.eigvalsh(m)
    if evals.min() < -1e-8:
        raise MatrixDomainError(f"matrix is not PSD (min eigenvalue {evals.min():.3g})")
    return m


def _chain_lambdas(corr: np.ndarray) -> np.ndarray | None:
    """Detect product structure rho[i,j] = lam[i]/lam[j]; return lam or None."""
    d = corr.shape[0]
    lam = corr[:, -1].copy()
    lam[-1] = 1.0
    if np.any(lam <= 0.0) or np.any(np.diff(lam) < -1e-12):
        return None
    pred = np.minimum(lam[:, None] / lam[None, :], lam[None, :] / lam[:, None])
    if np.max(np.abs(pred - corr)) > 1e-10:
        return None
    return lam


def chain_weights(lam, lower, upper, n_nodes: int = _BAND_NODES) -> float:
    """Rectangle probability for a Gaussian sequence with ``corr = lam_i/lam_j``.

    The sequence is Markov: ``Y[j+1] = rho_j Y[j] + s_j eps`` with
    ``rho_j = lam[j]/lam[j+1]``.  The banded density is propagated forward
    on Gauss-Legendre panels; deterministic and spectrally accurate.
    """
    lam = np.asarray(lam, dtype=float)
    lo = np.clip(np.asarray(lower, dtype=float), -_TAIL, _TAIL)
    hi = np.clip(np.asarray(upper, dtype=float), -_TAIL, _TAIL)
    d = lam.size
    if d == 1:
        return float(ndtr(hi[0]) - ndtr(lo[0]))
    gx, gw = leggauss(n_nodes)
    xi = 0.5 * (gx + 1.0)
    om = 0.5 * gw
    width = hi[0] - lo[0]
    if width <= 0.0:
        return 0.0
    y = lo[0] + width * xi
    state = width * om * np.exp(-0.5 * y * y) / _SQRT_2PI
    for j in range(1, d):
        rho = lam[j - 1] / lam[j]
        s2 = 1.0 - rho * rho
        if s2 < 1e-14:
            # Perfectly correlated step: intersect the band on the same nodes.
            state = state * ((y >= lo[j]) & (y <= hi[j]))
            if j == d - 1:
                return float(state.sum())
            continue
        s = math.sqrt(s2)
        if j == d - 1:
            z_hi = ndtr((hi[j] - rho * y) / s)
            z_lo = ndtr((lo[j] - rho * y) / s)
            return float(np.dot(state, z_hi - z_lo))
        width = hi[j] - lo[j]
        if width <= 0.0:
            return 0.0
        y_new = lo[j] + width * xi
        kern = np.exp(-0.5 * ((y_new[:, None] - rho * y[None, :]) / s) ** 2) / (s * _SQRT_2PI)
        state = width * om * (kern @ state)
        y = y_new
    return float(state.sum())


def _genz_sobol(corr: np.ndarray, lower: np.ndarray, upper: np.ndarray, tol: float) -> float:
    """Genz separation-of-variables transform on an unscrambled Sobol net."""
    from scipy.stats import qmc

    d = corr.shape[0]
    try:
        chol = np.linalg.cholesky(corr)
    except np.linalg.LinAlgError:
        try:
            chol = np.linalg.cholesky(corr + 1e-10 * np.eye(d))
        except np.linalg.LinAlgError as exc:
            raise MatrixDomainError("matrix is not positive semi-definite") from exc

    def estimate(n_pts: int) -> float:
        sob = qmc.Sobol(d=max(d - 1, 1), scramble=False)
        w = sob.random(n_pts)
        dlo = np.full(n_pts, ndtr(lower[0] / chol[0, 0]))
        ehi = np.full(n_pts, ndtr(upper[0] / chol[0, 0]))
        f = ehi - dlo
        y = np.zeros((n_pts, d - 1))
        for i in range(1, d):
            q = np.clip(dlo + w[:, i - 1] * (ehi - dlo), 1e-15, 1.0 - 1e-15)
            y[:, i - 1] = ndtri(q)
            drift = y[:, :i] @ chol[i, :i]
            dlo = ndtr((lower[i] - drift) / chol[i, i])
            ehi = ndtr((upper[i] - drift) / chol[i, i])
            f = f * np.maximum(ehi - dlo, 0.0)
        return float(f.mean())

    n = 2048
    prev = estimate(n)
    for _ in range(10):
        n *= 2
        cur = estimate(n)
        if abs(cur - prev) <= 0.5 * tol:
            return cur
        prev = cur
    raise RuntimeError(f"MVN integration did not reach tol={tol:g} (last delta {abs(cur - prev):.2g})")


def mvn_rect_prob(corr, rect, tol: float = 1e-6) -> float:
    """P(lower <= X <= upper) for X ~ N(0, corr).

    ``rect`` may be a :class:`Rectangle` or a ``(lower, upper)`` pair.
    Deterministic for a fixed configuration; absolute error <= tol.
    """
    if not isinstance(rect, Rectangle):
        rect = Rectangle(*rect)
    if tol <= 0.0:
        raise ValueError("tol must be positive")
    m = validate_correlation(corr)
    if rect.dim != m.shape[0]:
        raise ValueError(f"rectangle dim {rect.dim} != matrix dim {m.shape[0]}")
    lo, hi = rect.lower, rect.upper
    if rect.dim == 1:
        return float(ndtr(hi[0]) - ndtr(lo[0]))
    off = m[~np.eye(rect.dim, dtype=bool)]
    if np.max(np.abs(off)) < 1e-14:
        return float(np.prod(ndtr(hi) - ndtr(lo)))
    lam = _chain_lambdas(m)
    if lam is not None:
        return chain_weights(lam, lo, hi)
    return _genz_sobol(m, lo, hi, tol)


@dataclass(frozen=True)
class QuadratureGrid:
    """Tensor-product Gauss-Hermite rule normalised against the N(0,1) weight.

    ``nodes1d``/``weights1d`` define the one-dimensional rule; the full grid
    is the ``dims``-fold tensor product and is only materialised on demand.
    Weights sum to one per dimension, so the rule computes expectations.
    """

    nodes_per_dim: int
    dims: int
    nodes1d: np.ndarray
    weights1d: np.ndarray

    @property
    def size(self) -> int:
        return self.nodes_per_dim**self.dims

    def points(self) -> Iterator[tuple[np.ndarray, float]]:
        """Yield (point, weight) over the full grid in a fixed C order."""
        idx = np.indices((self.nodes_per_dim,) * self.dims).reshape(self.dims, -1).T
        for multi in idx:
            yield self.nodes1d[multi], float(np.prod(self.weights1d[multi]))


def gauss_hermite_grid(nodes_per_dim: int, dims: int) -> QuadratureGrid:
    """Probabilist-normalised Gauss-Hermite tensor grid.

    Exact for per-dimension polynomials of degree <= 2*nodes_per_dim - 1
    against the standard-normal density.
    """
    if nodes_per_dim < 2:
        raise ValueError("nodes_per_dim must be >= 2")
    if dims < 1:
        raise ValueError("dims must be >= 1")
    if nodes_per_dim**dims > MAX_GRID_POINTS:
        raise GridCapacityError(
            f"grid of {nodes_per_dim}^{dims} points exceeds budget {MAX_GRID_POINTS}"
        )
    x, w = hermegauss(nodes_per_dim)
    w = w / w.sum()
    return QuadratureGrid(nodes_per_dim, dims, x, w)


def integrate_over_grid(grid: QuadratureGrid, integrand: Callable[[np.ndarray], float]) -> float:
    """Sum ``weight * integrand(point)`` over the grid in a fixed order."""
    total = 0.0
    for point, weight in grid.points():
        val = float(integrand(point))
        if not math.isfinite(val):
            raise ArithmeticError(f"integrand returned non-finite value {val!r} at point {point}")
        total += weight * val
    return total
