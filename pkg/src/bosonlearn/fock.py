"""Truncated Fock-space algebra for one or several bosonic modes.

Multi-mode operators are Kronecker products with the lowest site index as
the leftmost factor.  Operators are returned as ``scipy.sparse`` CSR
matrices when they act on the full multi-mode space and as dense arrays
for single-mode building blocks.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln


@dataclass(frozen=True)
class TruncationSpec:
    """Per-mode Fock cutoff ``cutoff`` (levels 0..cutoff) on ``modes`` modes."""

    cutoff: int
    modes: int = 1

    def __post_init__(self):
        if self.cutoff < 1:
            raise ValueError(f"cutoff must be >= 1, got {self.cutoff}")
        if self.modes < 1:
            raise ValueError(f"modes must be >= 1, got {self.modes}")

    @property
    def local_dim(self) -> int:
        return self.cutoff + 1

    @property
    def dim(self) -> int:
        return self.local_dim**self.modes

    def with_modes(self, modes: int) -> "TruncationSpec":
        return TruncationSpec(self.cutoff, modes)


def annihilation_op(trunc: TruncationSpec) -> np.ndarray:
    """Single-mode annihilation operator, ``a|n> = sqrt(n)|n-1>``."""
    n = np.arange(1, trunc.local_dim)
    return np.diag(np.sqrt(n).astype(complex), k=1)


def creation_op(trunc: TruncationSpec) -> np.ndarray:
    return annihilation_op(trunc).conj().T


def number_op(trunc: TruncationSpec) -> np.ndarray:
    return np.diag(np.arange(trunc.local_dim, dtype=float)).astype(complex)


def fock_state(n, trunc: TruncationSpec) -> np.ndarray:
    """Basis vector |n_0, n_1, ...>; ``n`` is an int or a sequence of ints."""
    levels = np.atleast_1d(n)
    if len(levels) != trunc.modes:
        raise ValueError("need one occupation number per mode")
    if np.any(levels < 0) or np.any(levels > trunc.cutoff):
        raise ValueError(f"occupation {levels} outside cutoff {trunc.cutoff}")
    idx = np.ravel_multi_index(tuple(levels), (trunc.local_dim,) * trunc.modes)
    psi = np.zeros(trunc.dim, dtype=complex)
    psi[idx] = 1.0
    return psi


def coherent_norm_sq(alpha: complex, cutoff: int) -> float:
    """Squared norm of the cutoff-projected coherent state,
    ``exp(-|a|^2) * sum_{k<=cutoff} |a|^{2k}/k!``."""
    x = abs(alpha) ** 2
    k = np.arange(cutoff + 1)
    if x == 0:
        return 1.0
    return float(np.exp(-x + k * np.log(x) - gammaln(k + 1)).sum())


def coherent_state(alpha, trunc: TruncationSpec, projected_normalized: bool = False):
    """Fock amplitudes of the coherent state ``|alpha>`` up to the cutoff.

    ``alpha`` is a scalar (single mode) or one amplitude per mode.  With
    ``projected_normalized`` the truncated vector is rescaled to unit norm.
    Returns ``(psi, norm_sq)`` where ``norm_sq`` is the squared norm of the
    truncated, un-rescaled vector.
    """
    alphas = np.atleast_1d(np.asarray(alpha, dtype=complex))
    if len(alphas) != trunc.modes:
        raise ValueError("need one amplitude per mode")
    n = np.arange(trunc.local_dim)
    log_fact = 0.5 * gammaln(n + 1)
    psi = np.ones(1, dtype=complex)
    norm_sq = 1.0
    for a in alphas:
        if a != 0:
            amp = np.exp(-0.5 * abs(a) ** 2 + n * np.log(a) - log_fact)
        else:
            amp = np.zeros(trunc.local_dim, dtype=complex)
            amp[0] = 1.0
        norm_sq *= coherent_norm_sq(a, trunc.cutoff)
        psi = np.kron(psi, amp)
    if projected_normalized:
        psi = psi / np.sqrt(norm_sq)
    return psi, norm_sq


def _check_sites(sites, modes):
    sites = list(sites)
    if len(set(sites)) != len(sites):
        raise ValueError(f"sites must be distinct, got {sites}")
    for s in sites:
        if not 0 <= s < modes:
            raise ValueError(f"site {s} out of range for {modes} modes")
    return sites


def embed_operator(ops, sites, trunc: TruncationSpec) -> sp.csr_matrix:
    """Tensor-embed single-mode operators acting on ``sites``.

    ``ops`` is one matrix (placed on each listed site) or a sequence with one
    matrix per site.  Identity is used on all other modes.
    """
    sites = _check_sites(sites, trunc.modes)
    if isinstance(ops, np.ndarray) and ops.ndim == 2:
        ops = [ops] * len(sites)
    if len(ops) != len(sites):
        raise ValueError("one operator per site required")
    placed = dict(zip(sites, ops))
    eye = sp.identity(trunc.local_dim, format="csr", dtype=complex)
    out = sp.identity(1, format="csr", dtype=complex)
    for mode in range(trunc.modes):
        factor = sp.csr_matrix(placed[mode]) if mode in placed else eye
        out = sp.kron(out, factor, format="csr")
    return out


def local_number_diagonals(trunc: TruncationSpec) -> np.ndarray:
    """Array ``(modes, dim)`` of occupation numbers of each basis state."""
    grid = np.indices((trunc.local_dim,) * trunc.modes).reshape(trunc.modes, -1)
    return grid


def _as_density(rho) -> np.ndarray:
    rho = np.asarray(rho)
    if rho.ndim == 1:
        rho = np.outer(rho, rho.conj())
    return rho


def number_moment(rho, region, k: int, trunc: TruncationSpec) -> float:
    """``tr[rho prod_{i in region} (N_i + 1)^k]``."""
    region = list(region)
    if not region:
        raise ValueError("region must be non-empty")
    if k < 0:
        raise ValueError("k must be nonnegative")
    _check_sites(region, trunc.modes)
    occ = local_number_diagonals(trunc)
    weight = np.prod((occ[region] + 1.0) ** k, axis=0)
    rho = _as_density(rho)
    return float(np.real(np.sum(np.diagonal(rho) * weight)))


def sobolev_norm(rho, k: int, trunc: TruncationSpec) -> float:
    """Trace norm of ``W^{2k}(rho) = prod_j (N_j+1)^{k/2} rho prod_j (N_j+1)^{k/2}``.

    For positive ``rho`` this equals ``tr[rho prod_j (N_j+1)^k]``; the general
    case goes through singular values.
    """
    if k < 0:
        raise ValueError("k must be nonnegative")
    rho = _as_density(rho)
    occ = local_number_diagonals(trunc)
    w = np.sqrt(np.prod((occ + 1.0) ** k, axis=0))
    weighted = w[:, None] * rho * w[None, :]
    return float(np.linalg.svd(weighted, compute_uv=False).sum())


def fock_projector(level: int, region, trunc: TruncationSpec) -> sp.csr_matrix:
    """Diagonal projector onto local Fock levels ``<= level`` on ``region``."""
    if level > trunc.cutoff:
        raise ValueError(f"projector level {level} exceeds simulation cutoff {trunc.cutoff}")
    if level < 0:
        raise ValueError("projector level must be nonnegative")
    region = _check_sites(region, trunc.modes)
    occ = local_number_diagonals(trunc)
    keep = np.ones(trunc.dim, dtype=bool)
    for i in region:
        keep &= occ[i] <= level
    return sp.diags(keep.astype(complex), format="csr")


def partial_trace(rho: np.ndarray, keep, trunc: TruncationSpec) -> np.ndarray:
    """Reduced density matrix on the modes listed in ``keep`` (in that order)."""
    keep = _check_sites(keep, trunc.modes)
    m, dl = trunc.modes, trunc.local_dim
    t = np.asarray(rho).reshape((dl,) * (2 * m))
    traced = [i for i in range(m) if i not in keep]
    letters = "abcdefghijklmnopqrstuvwxyz"
    if 2 * m > len(letters):
        raise ValueError("too many modes for partial_trace")
    row = list(letters[:m])
    col = list(letters[m : 2 * m])
    for i in traced:
        col[i] = row[i]
    out = "".join(row[i] for i in keep) + "".join(col[i] for i in keep)
    red = np.einsum("".join(row) + "".join(col) + "->" + out, t)
    dk = dl ** len(keep)
    return red.reshape(dk, dk)


def factorial_ratio(n: int, k: int) -> float:
    """``n!/(n-k)!`` (zero when k > n)."""
    if k > n:
        return 0.0
    return float(factorial(n) // factorial(n - k))
