"""Master-equation dynamics on truncated Fock spaces.

Density matrices are vectorized row-major, so that
``vec(A X B) = kron(A, B.T) @ vec(X)``.  A :class:`Liouvillian` keeps the
sparse Hamiltonian and jump operators; the full superoperator matrix is
assembled lazily and only used when it is small enough.

Restricting the generator to a region ``R`` and projecting it onto local
Fock levels ``<= M'`` is the same as building the region's operators at
cutoff ``M'``: truncated ladder products agree with ``P op P`` because
each term raises or lowers monotonically.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from math import factorial, sqrt

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply

from .fock import TruncationSpec, annihilation_op, embed_operator, local_number_diagonals
from .lattice import DissipatorSpec, HamiltonianSpec, build_hamiltonian

log = logging.getLogger(__name__)

# dim**2 up to which scipy's expm_multiply is used
EXPM_THRESHOLD = 200_000
# dim**2 above which the superoperator is not assembled
SUPEROP_THRESHOLD = 2_000_000


class IntegrationError(RuntimeError):
    """Raised when the integrator exhausts its step budget."""


@dataclass
class Liouvillian:
    """GKLS generator ``-i[H, .] + sum_j D[L_j]`` on ``vertices`` at a cutoff.

    Attributes
    ----------
    H : sparse matrix
    jumps : list of sparse matrices
    trunc : TruncationSpec
        Cutoff and number of modes of the simulated region.
    vertices : tuple
        Graph vertices in tensor order.
    variant : str
        ``"full"``, ``"region"`` or ``"projected"``.
    projected_level : int or None
    """

    H: sp.csr_matrix
    jumps: list
    trunc: TruncationSpec
    vertices: tuple
    variant: str = "full"
    projected_level: int | None = None
    _superop: sp.csr_matrix | None = field(default=None, repr=False)

    def __post_init__(self):
        self.H = sp.csr_matrix(self.H)
        self.jumps = [sp.csr_matrix(L) for L in self.jumps]
        self._LdL = [(L.conj().T @ L).tocsr() for L in self.jumps]
        K = -1j * self.H
        for LdL in self._LdL:
            K = K - 0.5 * LdL
        self._K = K.tocsr()  # rho -> K rho + rho K^dag + sum L rho L^dag

    @property
    def dim(self) -> int:
        return self.trunc.dim

    def apply(self, rho: np.ndarray) -> np.ndarray:
        """Action on a density matrix."""
        out = self._K @ rho + (self._K @ rho.conj().T).conj().T
        for L in self.jumps:
            out = out + L @ (L @ rho.conj().T).conj().T
        return out

    def apply_adjoint(self, X: np.ndarray) -> np.ndarray:
        """Heisenberg-picture action ``i[H, X] + sum L^dag X L - 1/2 {L^dag L, X}``."""
        Kd = self._K.conj().T
        out = Kd @ X + (Kd @ X.conj().T).conj().T
        for L in self.jumps:
            Ld = L.conj().T
            out = out + Ld @ (Ld @ X.conj().T).conj().T
        return out

    def superop(self) -> sp.csr_matrix:
        """Sparse matrix acting on row-major ``vec(rho)``."""
        if self._superop is None:
            n = self.dim
            eye = sp.identity(n, format="csr", dtype=complex)
            S = sp.kron(self._K, eye) + sp.kron(eye, self._K.conj())
            for L in self.jumps:
                S = S + sp.kron(L, L.conj())
            self._superop = S.tocsr()
        return self._superop

    def norm_bound(self) -> float:
        """Crude bound on the induced trace norm of the generator."""
        h = sp.linalg.norm(self.H, 1)
        j = sum(sp.linalg.norm(L, 1) ** 2 for L in self.jumps)
        return float(2 * h + 2 * j)


def _jump_operator(trunc, site, p, alpha):
    t1 = TruncationSpec(trunc.cutoff)
    a = annihilation_op(t1)
    L = np.linalg.matrix_power(a, p) - (alpha**p) * np.eye(t1.local_dim)
    return embed_operator([L], [site], trunc)


def build_liouvillian(
    h: HamiltonianSpec,
    dspec: DissipatorSpec | None,
    trunc: TruncationSpec,
    region=None,
    projected: int | None = None,
    include_hamiltonian: bool = True,
    include_dissipation: bool = True,
) -> Liouvillian:
    """Assemble the regularized generator.

    Parameters
    ----------
    h : HamiltonianSpec
    dspec : DissipatorSpec or None
        ``None`` switches dissipation off.
    trunc : TruncationSpec
        Only ``trunc.cutoff`` is used; the mode count follows the region.
    region : iterable of vertices, optional
        Keep only the modes in ``region`` and the edges inside it.
    projected : int, optional
        Project onto local levels ``<= projected`` (requires ``region``
        or applies to all vertices).
    """
    g = h.graph
    if region is None:
        verts = g.vertices
        variant = "full"
    else:
        region = set(region)
        missing = region - set(g.vertices)
        if missing:
            raise ValueError(f"region contains vertices not in the graph: {sorted(missing, key=str)}")
        verts = tuple(v for v in g.vertices if v in region)
        variant = "region"
    cutoff = trunc.cutoff
    if projected is not None:
        if projected > trunc.cutoff:
            raise ValueError("projection level exceeds simulation cutoff")
        cutoff = projected
        variant = "projected"
    sub = h.restricted(verts) if region is not None else h
    tr = TruncationSpec(cutoff, len(verts))
    H = build_hamiltonian(sub, tr) if include_hamiltonian else sp.csr_matrix((tr.dim, tr.dim), dtype=complex)
    jumps = []
    if dspec is not None and include_dissipation:
        for i, v in enumerate(verts):
            if dspec.p <= cutoff:
                jumps.append(_jump_operator(tr, i, dspec.p, dspec.amplitude(v)))
            # a^p vanishes when p exceeds the cutoff and the jump is then a
            # multiple of the identity, which generates nothing
    return Liouvillian(H, jumps, tr, verts, variant, projected)


@dataclass
class EvolutionResult:
    """Output of :func:`evolve`.

    Attributes
    ----------
    rho : ndarray
        Evolved density matrix (Hermitized).
    leakage : float
        Population on local levels above ``learning_cutoff``.
    trace_drift : float
        ``|tr rho - tr rho0|``.
    min_eig : float
    method : str
    steps : int
    """

    rho: np.ndarray
    leakage: float
    trace_drift: float
    min_eig: float
    method: str
    steps: int = 0


def leakage(rho, trunc: TruncationSpec, level: int) -> float:
    """Population of basis states with some mode above ``level``."""
    occ = local_number_diagonals(trunc)
    outside = np.any(occ > level, axis=0)
    return float(np.clip(np.real(np.diagonal(rho)[outside].sum()), 0.0, 1.0))


def _hermitize(rho):
    return 0.5 * (rho + rho.conj().T)


def evolve(
    rho0,
    L: Liouvillian,
    t: float,
    method: str = "auto",
    rtol: float = 1e-9,
    atol: float = 1e-12,
    learning_cutoff: int | None = None,
    max_steps: int = 200_000,
    check: bool = True,
) -> EvolutionResult:
    """Evolve ``rho0`` for time ``t`` under ``L``.

    ``method`` is ``"expm"`` (scipy ``expm_multiply`` on the sparse
    superoperator), ``"taylor"`` (adaptive-step Taylor series of the sparse
    superoperator, see :func:`taylor_propagate`), ``"rk"`` (adaptive
    Dormand-Prince in matrix form), ``"stiff"`` (BDF with the sparse
    superoperator as Jacobian, for strongly damped high-``p`` generators) or
    ``"auto"``, which picks ``"expm"`` for
    ``dim**2 <= EXPM_THRESHOLD``, ``"taylor"`` up to ``SUPEROP_THRESHOLD``
    and ``"rk"`` beyond.  With ``check=False`` the minimum eigenvalue is not
    computed (reported as NaN).
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    rho0 = np.asarray(rho0, dtype=complex)
    if rho0.ndim == 1:
        rho0 = np.outer(rho0, rho0.conj())
    n = L.dim
    if rho0.shape != (n, n):
        raise ValueError(f"state dimension {rho0.shape} does not match generator {n}")
    level = L.trunc.cutoff - 1 if learning_cutoff is None else learning_cutoff
    if t == 0:
        return EvolutionResult(rho0.copy(), leakage(rho0, L.trunc, level), 0.0, _min_eig(rho0) if check else np.nan, "identity")
    if method == "auto":
        method = "expm" if n * n <= EXPM_THRESHOLD else "taylor" if n * n <= SUPEROP_THRESHOLD else "rk"
    steps = 0
    if method == "expm":
        vec = expm_multiply(L.superop() * t, rho0.reshape(-1))
        rho = vec.reshape(n, n)
    elif method == "taylor":
        vec, steps = taylor_propagate(L.superop(), rho0.reshape(-1), t, tol=atol)
        rho = vec.reshape(n, n)
    elif method == "stiff":
        S = L.superop().tocsc()
        sol = solve_ivp(lambda _, y: S @ y, (0.0, t), rho0.reshape(-1), method="BDF", jac=S, rtol=rtol, atol=atol)
        if not sol.success:
            raise IntegrationError(sol.message)
        rho = sol.y[:, -1].reshape(n, n)
        steps = sol.nfev
    elif method == "rk":
        counter = [0]

        def rhs(_, y):
            counter[0] += 1
            if counter[0] > max_steps:
                raise IntegrationError("step budget exhausted")
            r = y.reshape(n, n)
            Kr = L._K @ r
            out = Kr + Kr.conj().T
            for J in L.jumps:
                Jr = J @ r
                out = out + (J @ Jr.conj().T).conj().T
            return out.reshape(-1)

        # the right-hand side above assumes a Hermitian state
        sol = solve_ivp(rhs, (0.0, t), _hermitize(rho0).reshape(-1), method="DOP853", rtol=rtol, atol=atol)
        if not sol.success:
            raise IntegrationError(sol.message)
        rho = sol.y[:, -1].reshape(n, n)
        steps = counter[0]
    else:
        raise ValueError(f"unknown method {method!r}")
    rho = _hermitize(rho)
    drift = abs(np.trace(rho) - np.trace(rho0))
    res = EvolutionResult(rho, leakage(rho, L.trunc, level), float(drift), _min_eig(rho) if check else np.nan, method, steps)
    if check:
        if res.min_eig < -1e-8:
            warnings.warn(f"evolved state has negative eigenvalue {res.min_eig:.2e}")
        if drift > 1e-8:
            warnings.warn(f"trace drift {drift:.2e}")
    return res


def taylor_propagate(S, y, t: float, tol: float = 1e-12, max_terms: int = 40):
    """``exp(t S) y`` by truncated Taylor series with adaptive substeps.

    A substep of length ``h`` sums terms ``(h S)^k y / k!`` until the
    1-norm of a term drops below ``tol * ||y||_1``; when that fails within
    ``max_terms`` terms or the terms stop shrinking, ``h`` is halved.  The
    truncation error is thus controlled by the terms actually computed,
    not by the (very pessimistic) operator norm.  Returns ``(y_t, matvecs)``.
    """
    y = np.asarray(y, dtype=complex)
    done, h, mv = 0.0, float(t), 0
    while done < t * (1 - 1e-14):
        h = min(h, t - done)
        ref = np.abs(y).sum()
        acc, term, ok = y.copy(), y, False
        prev = np.inf
        for k in range(1, max_terms + 1):
            term = (S @ term) * (h / k)
            mv += 1
            nt = np.abs(term).sum()
            acc += term
            if nt <= tol * ref:
                ok = True
                break
            if k > 4 and nt > prev:
                break
            prev = nt
        if not ok:
            h *= 0.5
            continue
        y, done = acc, done + h
        if k < max_terms // 3:
            h *= 2.0
    return y, mv


def _min_eig(rho) -> float:
    return float(np.linalg.eigvalsh(_hermitize(rho)).min())


def evolve_times(rho0, L: Liouvillian, times, **kw):
    """Evolve through increasing ``times``; returns one result per time."""
    times = np.asarray(times, dtype=float)
    order = np.argsort(times)
    out = [None] * len(times)
    rho, t_prev = np.asarray(rho0, dtype=complex), 0.0
    if rho.ndim == 1:
        rho = np.outer(rho, rho.conj())
    for idx in order:
        res = evolve(rho, L, times[idx] - t_prev, **kw)
        out[idx] = res
        rho, t_prev = res.rho, times[idx]
    return out


def trotter_evolve(rho0, h: HamiltonianSpec, dspec: DissipatorSpec, trunc: TruncationSpec, t: float, n: int):
    """Lie-Trotter product ``(e^{(t/n) H-part} e^{(t/n) D-part})^n (rho0)``.

    The Hamiltonian step is the unitary conjugation by ``expm(-i H t/n)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    tr = trunc.with_modes(h.graph.n_modes)
    rho = np.asarray(rho0, dtype=complex)
    if rho.ndim == 1:
        rho = np.outer(rho, rho.conj())
    dt = t / n
    U = sla.expm(-1j * dt * build_hamiltonian(h, tr).toarray())
    Ld = build_liouvillian(h, dspec, tr, include_hamiltonian=False)
    for _ in range(n):
        if Ld.jumps:
            rho = evolve(rho, Ld, dt, check=False).rho
        rho = U @ rho @ U.conj().T
    return _hermitize(rho)


def taylor_coefficients(L: Liouvillian, rho0, observable, degree: int) -> np.ndarray:
    """``[tr(L^j(rho0) O) for j <= degree]``."""
    rho = np.asarray(rho0, dtype=complex)
    if rho.ndim == 1:
        rho = np.outer(rho, rho.conj())
    O = observable.toarray() if sp.issparse(observable) else np.asarray(observable)
    out = []
    for j in range(degree + 1):
        out.append(np.trace(rho @ O))
        if j < degree:
            rho = L.apply(rho)
    return np.array(out)


def taylor_sum(coeffs, t: float) -> complex:
    return sum(c * t**j / factorial(j) for j, c in enumerate(coeffs))


def converged_cutoff(observables, start: int, stop: int, tol: float = 1e-6, factor: int = 2):
    """Smallest cutoff ``M`` in ``start, start+1, ...`` for which
    ``observables(M)`` and ``observables(factor*M)`` (capped at ``stop``)
    differ by less than ``tol`` entrywise.

    Returns ``(M, difference)``; raises ``RuntimeError`` if the ladder is
    exhausted.
    """
    cache = {}

    def get(M):
        if M not in cache:
            cache[M] = np.atleast_1d(np.asarray(observables(M)))
        return cache[M]

    for M in range(start, stop + 1):
        M2 = min(factor * M, stop)
        if M2 <= M:
            break
        diff = float(np.max(np.abs(get(M) - get(M2))))
        if diff < tol:
            return M, diff
    raise RuntimeError(f"truncation not converged up to cutoff {stop}")


def hamiltonian_norm_bound(L_mag: float, d: int, M: int) -> float:
    """``L (d+1)^4 d! (M+1)^{2d}``."""
    return L_mag * (d + 1) ** 4 * factorial(d) * (M + 1) ** (2 * d)


def jump_norm_bound(p: int, M: int, alpha: complex) -> float:
    """``sqrt(p!) (M+1)^{p/2} + |alpha|^p``."""
    return sqrt(factorial(p)) * (M + 1) ** (p / 2) + abs(alpha) ** p
