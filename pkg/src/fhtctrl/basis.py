"""Orthonormal Legendre bases on arbitrary intervals.

A :class:`BasisSet` holds the first ``n = q + 1`` shifted Legendre
polynomials on ``[lo, hi]``, scaled so that they are orthonormal in
``L2([lo, hi])``.  Evaluation clamps to the interval by default.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial import legendre as npleg


@lru_cache(maxsize=64)
def gauss_legendre(npts: int, lo: float = -1.0, hi: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped to ``[lo, hi]``."""
    t, w = npleg.leggauss(npts)
    half = 0.5 * (hi - lo)
    nodes = 0.5 * (hi + lo) + half * t
    weights = half * w
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@dataclass(frozen=True)
class BasisSet:
    """First ``n`` orthonormal shifted Legendre polynomials on ``[lo, hi]``.

    ``coef`` stores, row by row, the Legendre-series coefficients (in the
    reference variable ``t in [-1, 1]``) of each basis function, including
    the normalisation factor ``sqrt((2i+1)/(hi-lo))``.
    """

    lo: float
    hi: float
    n: int
    coef: np.ndarray = field(repr=False, compare=False)

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def _to_ref(self, x: np.ndarray) -> np.ndarray:
        return (2.0 * x - (self.lo + self.hi)) / self.length

    def eval(self, x, deriv: int = 0, clamp: bool = True) -> np.ndarray:
        """Evaluate all basis functions (or a derivative) at ``x``.

        Returns an array of shape ``x.shape + (n,)``.  With ``clamp`` the
        input is clipped to the interval first.
        """
        x = np.asarray(x, dtype=float)
        if clamp:
            x = np.clip(x, self.lo, self.hi)
        t = self._to_ref(x)
        # legval broadcasts the coefficient axis first
        c = self.coef.T
        if deriv:
            c = npleg.legder(c, m=deriv, axis=0) * (2.0 / self.length) ** deriv
            if c.shape[0] == 0:
                return np.zeros(x.shape + (self.n,))
        out = npleg.legval(t, c, tensor=True)  # (n, *x.shape)
        return np.moveaxis(out, 0, -1)

    def project(self, func: Callable[[np.ndarray], np.ndarray], npts: int | None = None) -> np.ndarray:
        """L2 projection coefficients of ``func`` onto the basis."""
        npts = npts or 2 * self.n + 2
        nodes, weights = gauss_legendre(npts, self.lo, self.hi)
        vals = np.asarray(func(np.array(nodes)), dtype=float)
        return self.eval(nodes).T @ (weights * vals)

    def integrals(self) -> np.ndarray:
        """Integral of each basis function over the interval."""
        c = np.zeros(self.n)
        c[0] = np.sqrt(self.length)
        return c


def legendre_basis(q: int, lo: float, hi: float) -> BasisSet:
    """Build the orthonormal Legendre basis of maximal degree ``q`` on ``[lo, hi]``."""
    if q < 0:
        raise ValueError(f"degree q must be non-negative, got {q}")
    if not (np.isfinite(lo) and np.isfinite(hi)) or lo >= hi:
        raise ValueError(f"invalid interval [{lo}, {hi}]")
    n = q + 1
    scale = np.sqrt((2.0 * np.arange(n) + 1.0) / (hi - lo))
    coef = np.diag(scale)
    coef.setflags(write=False)
    return BasisSet(float(lo), float(hi), n, coef)


def eval_vec(b: BasisSet, x: float) -> np.ndarray:
    """Length-``n`` vector of basis values at a single point (clamped)."""
    return b.eval(np.asarray(x, dtype=float))


def sobolev_gram(b: BasisSet) -> np.ndarray:
    """Gram matrix of ``{psi_i + psi_i'}`` over the basis interval."""
    nodes, weights = gauss_legendre(2 * b.n + 2, b.lo, b.hi)
    phi = b.eval(nodes) + b.eval(nodes, deriv=1)
    K = phi.T @ (weights[:, None] * phi)
    return 0.5 * (K + K.T)


def mixed_sobolev_gram(b: BasisSet) -> np.ndarray:
    """Gram matrix of the ``H^1`` inner product ``<f, g> + <f', g'>``.

    Unlike :func:`sobolev_gram` this is positive definite with smallest
    eigenvalue at least one, so tensor products of it bound every mixed
    derivative and leave no cheap exponentially growing directions.
    """
    nodes, weights = gauss_legendre(2 * b.n + 2, b.lo, b.hi)
    phi, dphi = b.eval(nodes), b.eval(nodes, deriv=1)
    K = phi.T @ (weights[:, None] * phi) + dphi.T @ (weights[:, None] * dphi)
    return 0.5 * (K + K.T)


def l2_gram(b: BasisSet) -> np.ndarray:
    """Quadrature Gram matrix of the basis itself (identity up to rounding)."""
    nodes, weights = gauss_legendre(2 * b.n + 2, b.lo, b.hi)
    phi = b.eval(nodes)
    return phi.T @ (weights[:, None] * phi)
