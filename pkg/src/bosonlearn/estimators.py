"""Box-indicator statistics of two-mode heterodyne samples.

A box with corner ``c`` in R^4 is the oriented product of intervals
``[min(0, c_k), max(0, c_k)]`` carrying the sign ``prod sgn(c_k)``.  All
boxes of a net are cut along the union of their breakpoints into cells;
every box is a union of cells.  Sample sums, exact expectations under a
two-mode operator and exact second moments are then linear in per-cell
quantities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

__all__ = ["BoxNet", "mode_cell_integrals", "operator_cell_integrals", "weight_range"]


def _coordinate_membership(corners_k, edges):
    lo = np.minimum(0.0, corners_k)[:, None]
    hi = np.maximum(0.0, corners_k)[:, None]
    return ((edges[None, :-1] >= lo) & (edges[None, 1:] <= hi)).astype(float)


@dataclass
class BoxNet:
    """Signed boxes anchored at the origin, one per row of ``corners`` (P, 4)."""

    corners: np.ndarray
    edges: list = field(init=False)
    members: list = field(init=False)
    signs: np.ndarray = field(init=False)

    def __post_init__(self):
        self.corners = np.atleast_2d(np.asarray(self.corners, dtype=float))
        if self.corners.shape[1] != 4:
            raise ValueError("box corners must have four real coordinates")
        self.edges = [np.unique(np.append(self.corners[:, k], 0.0)) for k in range(4)]
        self.members = [_coordinate_membership(self.corners[:, k], self.edges[k]) for k in range(4)]
        self.signs = np.prod(np.sign(self.corners), axis=1)

    def __len__(self):
        return len(self.corners)

    @property
    def cell_shape(self):
        return tuple(len(e) - 1 for e in self.edges)

    def signed_volumes(self) -> np.ndarray:
        """``sgn * vol`` of each box, i.e. the product of the corner coordinates."""
        return np.prod(self.corners, axis=1)

    def cell_index(self, samples) -> np.ndarray:
        """Flat cell index per sample, ``-1`` outside the covered region."""
        samples = np.atleast_2d(samples)
        idx = np.zeros(len(samples), dtype=np.int64)
        ok = np.ones(len(samples), dtype=bool)
        for k, e in enumerate(self.edges):
            i = np.searchsorted(e, samples[:, k], side="right") - 1
            ok &= (i >= 0) & (i < len(e) - 1)
            idx = idx * (len(e) - 1) + np.clip(i, 0, len(e) - 2)
        idx[~ok] = -1
        return idx

    def histogram(self, samples, weights) -> np.ndarray:
        """Per-cell sums of ``weights`` over the samples falling in each cell."""
        idx = self.cell_index(samples)
        ok = idx >= 0
        n = int(np.prod(self.cell_shape))
        h = np.bincount(idx[ok], weights=np.asarray(weights)[ok], minlength=n)
        return h.reshape(self.cell_shape)

    def box_sums(self, cells) -> np.ndarray:
        """Signed box sums ``s_p * sum_{cells in box p} cells`` for a cell array
        (optionally with trailing batch axes)."""
        m0, m1, m2, m3 = self.members
        out = np.einsum("pa,pb,pc,pd,abcd...->p...", m0, m1, m2, m3, cells, optimize=True)
        return self.signs.reshape((-1,) + (1,) * (out.ndim - 1)) * out

    def functional_cells(self, w) -> np.ndarray:
        """Per-cell coefficient of the functional ``sum_p w_p * box_sum_p``."""
        m0, m1, m2, m3 = self.members
        return np.einsum("p,pa,pb,pc,pd->abcd", np.asarray(w) * self.signs, m0, m1, m2, m3, optimize=True)

    def inside_any(self, samples) -> np.ndarray:
        """Mask of samples lying in at least one box."""
        idx = self.cell_index(samples)
        covered = (self.functional_cells(np.ones(len(self)) * self.signs) != 0).ravel()
        out = np.zeros(len(idx), dtype=bool)
        ok = idx >= 0
        out[ok] = covered[idx[ok]]
        return out


def mode_cell_integrals(xedges, yedges, cutoff: int, kappa: float, shift: complex, nq: int = 32) -> np.ndarray:
    """Integrals over every (x-interval, y-interval) cell of
    ``conj(b)^n b^m exp((kappa-1)|b|^2 - 2 Re(conj(shift) b)) / sqrt(n! m!)``.

    Returns an array of shape ``(nx, ny, cutoff+1, cutoff+1)``.
    """
    gx, gw = np.polynomial.legendre.leggauss(nq)

    def nodes(edges):
        a, b = edges[:-1, None], edges[1:, None]
        return 0.5 * (b - a) * gx[None, :] + 0.5 * (a + b), 0.5 * (b - a) * gw[None, :]

    X, WX = nodes(np.asarray(xedges, dtype=float))
    Y, WY = nodes(np.asarray(yedges, dtype=float))
    b = X[:, None, :, None] + 1j * Y[None, :, None, :]
    w = WX[:, None, :, None] * WY[None, :, None, :]
    sr, si = np.real(shift), np.imag(shift)
    w = w * np.exp((kappa - 1.0) * np.abs(b) ** 2 - 2.0 * (sr * b.real + si * b.imag))
    n = np.arange(cutoff + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logr = n * np.log(np.abs(b))[..., None] - 0.5 * gammaln(n + 1)
    ph = np.exp(1j * n * np.angle(b)[..., None])
    pw = np.exp(logr) * ph
    pw[..., 0] = 1.0
    return np.einsum("xyijn,xyijm,xyij->xynm", pw.conj(), pw, w, optimize=True)


def operator_cell_integrals(net: BoxNet, X, cutoff: int, kappa: float = 1.0, shift=(0.0, 0.0), nq: int = 32) -> np.ndarray:
    """``int_cell exp(kappa|b|^2 - 2 Re(conj(shift) . b)) <b|X|b> d^4 b`` per cell
    for a two-mode operator ``X`` (no ``1/pi^2``)."""
    D = cutoff + 1
    X = np.asarray(X).reshape(D, D, D, D)
    Ii = mode_cell_integrals(net.edges[0], net.edges[1], cutoff, kappa, shift[0], nq)
    Ij = mode_cell_integrals(net.edges[2], net.edges[3], cutoff, kappa, shift[1], nq)
    return np.einsum("nmNM,abnN,cdmM->abcd", X, Ii, Ij, optimize=True)


def weight_range(net: BoxNet, alpha=(0.0, 0.0)) -> float:
    """``max |alpha - b|^2`` over all boxes; ``alpha`` is a pair of complex amplitudes."""
    a = np.array([np.real(alpha[0]), np.imag(alpha[0]), np.real(alpha[1]), np.imag(alpha[1])])
    c = net.corners
    per = np.maximum(a[None, :] ** 2, (a[None, :] - c) ** 2)
    live = np.all(c != 0, axis=1)
    if not live.any():
        return 0.0
    return float(per[live].sum(axis=1).max())
