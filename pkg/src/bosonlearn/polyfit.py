"""Polynomial recovery from noisy evaluations and derivative estimation.

The univariate workhorse is a least-squares fit in the Chebyshev basis at
one node per Chebyshev arc.  Multivariate derivatives at the origin are
obtained by applying that fit one variable at a time; since each step is
linear in the data, the whole procedure reduces to tensor contractions
with small precomputed weight matrices.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from math import comb, e as EULER, factorial, lgamma

import numpy as np
from numpy.polynomial import chebyshev as C

from .poly import Poly

log = logging.getLogger(__name__)


class InterpolationError(ValueError):
    """Raised when an interpolation problem is singular or badly posed."""


# -- multivariate Lagrange interpolation -----------------------------------------


def total_degree_exponents(m: int, n: int):
    """Exponent tuples of total degree ``<= n`` in ``m`` variables, graded order."""
    out = [e for e in itertools.product(range(n + 1), repeat=m) if sum(e) <= n]
    return sorted(out, key=lambda e: (sum(e), tuple(-x for x in e)))


def chebyshev_total_degree_points(m: int, n: int) -> np.ndarray:
    """Unisolvent points for total degree ``n``: Chebyshev nodes indexed by
    the exponent set itself (a lower set), ``x_e = (c_{e_1}, ..., c_{e_m})``."""
    nodes = np.cos(np.pi * (np.arange(n + 1) + 0.5) / (n + 1))
    return np.array([[nodes[i] for i in e] for e in total_degree_exponents(m, n)])


@dataclass
class Interpolant:
    """Result of a Lagrange solve.

    Attributes
    ----------
    poly : Poly
        The interpolating polynomial.
    log_abs_det : float
        ``ln |Delta|`` of the generalized Vandermonde matrix.
    exponents : list of tuple
        Monomial basis used.
    """

    poly: Poly
    log_abs_det: float
    exponents: list

    @property
    def n_points(self) -> int:
        return len(self.exponents)

    def sup_bound(self, eps: float) -> float:
        """``eps * rho * rho! / |Delta|`` with ``rho`` the number of points."""
        r = self.n_points
        return float(eps * r * np.exp(lgamma(r + 1) - self.log_abs_det))


def vandermonde(points: np.ndarray, exponents) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    exps = np.asarray(exponents)
    return np.prod(points[:, None, :] ** exps[None, :, :], axis=2)


def lagrange_multivariate(points, values, m: int, n: int | None = None, exponents=None, rcond=1e-13):
    """Interpolate ``values`` at ``points`` by a polynomial in ``m`` variables.

    Parameters
    ----------
    points : array, shape (rho, m)
    values : array, shape (rho,) or (rho, k)
        Several right-hand sides may be solved at once.
    n : int, optional
        Total degree; the basis is all monomials of total degree ``<= n``.
    exponents : sequence of tuples, optional
        Custom monomial basis (overrides ``n``).

    Returns
    -------
    Interpolant or list of Interpolant
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[1] != m:
        raise ValueError(f"points have {points.shape[1]} coordinates, expected {m}")
    if exponents is None:
        if n is None:
            raise ValueError("give a degree or an exponent set")
        exponents = total_degree_exponents(m, n)
        if len(exponents) != comb(n + m, n):
            raise AssertionError("exponent count mismatch")
    exponents = [tuple(e) for e in exponents]
    if len(points) != len(exponents):
        raise InterpolationError(f"need exactly {len(exponents)} points, got {len(points)}")
    V = vandermonde(points, exponents)
    sign, logdet = np.linalg.slogdet(V)
    if sign == 0 or not np.isfinite(logdet):
        raise InterpolationError("generalized Vandermonde determinant vanishes")
    if np.linalg.cond(V) > 1 / rcond:
        raise InterpolationError(f"interpolation too ill-conditioned (cond={np.linalg.cond(V):.2e})")
    vals = np.asarray(values)
    coeffs = np.linalg.solve(V, vals.reshape(len(points), -1))
    out = [
        Interpolant(Poly(m, dict(zip(exponents, coeffs[:, c]))), float(logdet), exponents)
        for c in range(coeffs.shape[1])
    ]
    return out[0] if vals.ndim == 1 else out


# -- univariate robust fit --------------------------------------------------------


@dataclass
class UnivariatePoly:
    """Polynomial on ``domain`` stored in the Chebyshev basis of that domain."""

    coeffs: np.ndarray
    domain: tuple = (-1.0, 1.0)
    basis: str = "chebyshev"

    def __post_init__(self):
        if self.basis != "chebyshev":
            raise ValueError("only the chebyshev basis is stored")

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def _series(self):
        return C.Chebyshev(self.coeffs, domain=list(self.domain))

    def __call__(self, x):
        return self._series()(x)

    def deriv(self, k: int = 1) -> "UnivariatePoly":
        s = self._series().deriv(k)
        return UnivariatePoly(np.asarray(s.coef), self.domain)

    def monomial_coeffs(self) -> np.ndarray:
        return np.asarray(self._series().convert(kind=np.polynomial.Polynomial, domain=[-1, 1], window=[-1, 1]).coef)


def chebyshev_arc_nodes(n: int, domain=(-1.0, 1.0)) -> np.ndarray:
    """Midpoints of the ``n`` Chebyshev arcs mapped onto ``domain``,
    ordered so that node ``j`` lies in arc ``j`` (decreasing)."""
    x = np.cos(np.pi * (np.arange(1, n + 1) - 0.5) / n)
    a, b = domain
    return a + (x + 1) * (b - a) / 2


def check_arc_coverage(x, domain=(-1.0, 1.0)) -> np.ndarray:
    """Return ``x`` sorted in decreasing order after checking there is exactly
    one node per Chebyshev arc of ``domain``."""
    a, b = domain
    t = 2 * (np.sort(np.asarray(x, dtype=float))[::-1] - a) / (b - a) - 1
    n = len(t)
    j = np.arange(1, n + 1)
    lo, hi = np.cos(np.pi * j / n), np.cos(np.pi * (j - 1) / n)
    tol = 1e-12
    if np.any(t < lo - tol) or np.any(t > hi + tol):
        raise ValueError("nodes do not cover the Chebyshev arcs one per arc")
    return np.sort(np.asarray(x, dtype=float))[::-1]


def fit_matrix(x, M: int, domain=(-1.0, 1.0)) -> np.ndarray:
    """Linear map from values at ``x`` to Chebyshev coefficients (degree ``M``)."""
    a, b = domain
    t = 2 * (np.asarray(x, dtype=float) - a) / (b - a) - 1
    V = C.chebvander(t, M)
    return np.linalg.pinv(V)


def robust_cheb_fit(x, y, M: int, domain=(-1.0, 1.0), check=True) -> UnivariatePoly:
    """Degree-``M`` least-squares Chebyshev fit of noisy samples ``y`` at ``x``.

    ``x`` must hold one node per Chebyshev arc of ``domain`` and at least
    ``M + 1`` nodes.  With bounded noise ``sigma`` the sup-error on the
    domain is expected to stay below ``3 sigma`` for ``n = 4M`` nodes.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y)
    if len(x) < M + 1:
        raise ValueError(f"need at least {M + 1} nodes for degree {M}")
    if check:
        check_arc_coverage(x, domain)
    coeffs = fit_matrix(x, M, domain) @ y
    return UnivariatePoly(coeffs, tuple(domain))


def markov_factor(D: int, k: int) -> float:
    """``T_D^{(k)}(1) = prod_{j<k} (D^2 - j^2) / (1 * 3 * ... * (2k-1))``."""
    if k > D:
        raise ValueError(f"k={k} exceeds degree D={D}")
    if k < 0:
        raise ValueError("k must be nonnegative")
    num = 1.0
    den = 1.0
    for j in range(k):
        num *= D * D - j * j
        den *= 2 * j + 1
    return num / den


# -- derivatives at the origin ----------------------------------------------------


def derivative_weights(x, M: int, k_max: int, at: float = 0.0, domain=(-1.0, 1.0)) -> np.ndarray:
    """Matrix ``W`` of shape ``(k_max+1, n)`` with ``W @ y`` the derivatives of
    orders ``0..k_max`` at ``at`` of the degree-``M`` fit to ``(x, y)``."""
    a, b = domain
    P = fit_matrix(x, M, domain)
    t0 = 2 * (at - a) / (b - a) - 1
    scale = 2 / (b - a)
    eye = np.eye(M + 1)
    rows = []
    for k in range(k_max + 1):
        at_t0 = np.array([C.chebval(t0, C.chebder(eye[i], k)) for i in range(M + 1)])
        rows.append(scale**k * at_t0 @ P)
    return np.array(rows)


@dataclass
class DerivativeTable:
    """Estimated partial derivatives at the origin keyed by multi-index."""

    values: dict
    k_max: int
    bound: float | None = None

    def __getitem__(self, idx):
        return self.values[tuple(idx)]

    def as_array(self) -> np.ndarray:
        a = len(next(iter(self.values)))
        out = np.zeros((self.k_max + 1,) * a, dtype=complex)
        for idx, v in self.values.items():
            out[idx] = v
        return out


def derivatives_from_grid(values, M, k_max, a: int, half_widths=None) -> np.ndarray:
    """Iterated 1-D fits on a tensor grid of Chebyshev arc nodes.

    ``values`` has shape ``(n_0, ..., n_{a-1})`` (plus optional trailing batch
    axes) with axis ``j`` sampled at ``chebyshev_arc_nodes(n_j) * half_widths[j]``.
    ``M`` and ``k_max`` are either scalars or one value per axis.  Returns an
    array of shape ``(k_max_0+1, ..., k_max_{a-1}+1)`` (plus batch axes)
    holding the derivative estimates at the origin.
    """
    values = np.asarray(values)
    Ms = [M] * a if np.isscalar(M) else list(M)
    ks = [k_max] * a if np.isscalar(k_max) else list(k_max)
    hs = [1.0] * a if half_widths is None else list(half_widths)
    if not len(Ms) == len(ks) == len(hs) == a:
        raise ValueError("one degree, order and half-width per variable")
    out = values
    for j in range(a):
        h = hs[j]
        x = chebyshev_arc_nodes(values.shape[j], (-h, h))
        W = derivative_weights(x, Ms[j], ks[j], 0.0, (-h, h))
        out = np.moveaxis(np.tensordot(W, out, axes=([1], [j])), 0, j)
    return out


def poly_derivatives(oracle, a: int, M: int, k_max: int, n: int | None = None, sigma: float | None = None):
    """Estimate all partial derivatives of orders ``<= k_max`` per variable at
    the origin from a ``sigma``-noisy oracle on ``[-1, 1]^a``.

    ``oracle`` maps an array of points ``(npts, a)`` to values ``(npts,)``.
    ``n`` nodes per variable (default ``4M``) are queried on a tensor grid.
    """
    if k_max > M:
        log.debug("k_max=%d exceeds degree M=%d; higher derivatives vanish", k_max, M)
    n = 4 * M if n is None else n
    x = chebyshev_arc_nodes(n)
    grid = np.array(list(itertools.product(x, repeat=a)))
    vals = np.asarray(oracle(grid)).reshape((n,) * a)
    D = derivatives_from_grid(vals, M, k_max, a)
    table = {idx: D[idx] for idx in itertools.product(range(k_max + 1), repeat=a)}
    bound = None if sigma is None else derivative_error_bound(M, k_max, a, sigma)
    return DerivativeTable(table, k_max, bound)


def derivative_error_bound(M: int, k_max: int, a: int, sigma: float) -> float:
    """``(3 * 2^{2 k_max - 1} * M^{2 k_max})^a * sigma``."""
    return (3 * 2 ** (2 * k_max - 1) * M ** (2 * k_max)) ** a * sigma


# -- time derivative --------------------------------------------------------------


def time_window(M: int):
    """``(b1, b2) = (M^-2, 2 + M^-2)``."""
    b1 = 1.0 / M**2
    return b1, 2.0 + b1


def time_nodes(M: int, n: int | None = None) -> np.ndarray:
    """Chebyshev arc midpoints mapped affinely onto ``[b1, b2]``."""
    n = 4 * M if n is None else n
    return chebyshev_arc_nodes(n, time_window(M))


def time_derivative_weights(M: int, n: int | None = None, order: int = 1) -> np.ndarray:
    """Weights ``w`` with ``w @ f(time_nodes(M, n))`` estimating ``f^{(order)}(0)``."""
    x = time_nodes(M, n)
    return derivative_weights(x, M, order, 0.0, time_window(M))[order]


def derivative_at_zero_time(oracle, M: int, n: int | None = None, x=None) -> float:
    """Estimate ``f'(0)`` from noisy values of ``f`` on ``[b1, b2]``.

    ``oracle`` maps an array of times to values.  Custom nodes ``x`` must
    cover the Chebyshev arcs of ``[b1, b2]``.  The error is at most
    ``3 e M^2 sigma`` for ``sigma``-noisy values (see ``time_derivative_bound``).
    """
    window = time_window(M)
    if x is None:
        x = time_nodes(M, n)
    else:
        x = check_arc_coverage(x, window)
    y = np.asarray(oracle(np.asarray(x)))
    w = derivative_weights(x, M, 1, 0.0, window)[1]
    return w @ y


def time_derivative_bound(M: int, sigma: float) -> float:
    return 3 * EULER * M**2 * sigma


def chebyshev_kth_derivative_at_one(D: int, k: int) -> float:
    """Reference value of ``T_D^{(k)}(1)`` by explicit differentiation."""
    unit = np.zeros(D + 1)
    unit[D] = 1
    return float(C.chebval(1.0, C.chebder(unit, k)))


def multi_factorial(idx) -> int:
    out = 1
    for i in idx:
        out *= factorial(i)
    return out
