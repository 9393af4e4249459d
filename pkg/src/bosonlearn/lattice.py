"""Interaction graphs, Hamiltonian/dissipator specs and the
coefficient <-> polynomial <-> matrix-element conversions.

Coefficient tensors are indexed ``lam[k, l, kp, lp]`` for the term
``(a_u^dag)^k a_u^l (a_v^dag)^kp a_v^lp`` of the oriented edge ``(u, v)``.
"""

from __future__ import annotations

import itertools
import json
import logging
import warnings
from dataclasses import dataclass, field
from math import factorial, sqrt

import numpy as np
import scipy.sparse as sp

from .fock import TruncationSpec, annihilation_op, creation_op, embed_operator
from .poly import Poly

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatticeGraph:
    vertices: tuple
    edges: tuple
    coords: dict | None = None

    def __post_init__(self):
        vs = tuple(self.vertices)
        object.__setattr__(self, "vertices", vs)
        edges = tuple(tuple(e) for e in self.edges)
        object.__setattr__(self, "edges", edges)
        seen = set()
        for u, v in edges:
            if u == v:
                raise ValueError(f"self-loop at {u}")
            if u not in vs or v not in vs:
                raise ValueError(f"edge {(u, v)} references unknown vertex")
            key = frozenset((u, v))
            if key in seen:
                raise ValueError(f"duplicate edge {(u, v)}")
            seen.add(key)

    @property
    def n_modes(self) -> int:
        return len(self.vertices)

    def index(self, v) -> int:
        return self.vertices.index(v)

    def neighbors(self, v):
        out = []
        for a, b in self.edges:
            if a == v:
                out.append(b)
            elif b == v:
                out.append(a)
        return out

    @property
    def max_degree(self) -> int:
        return max((len(self.neighbors(v)) for v in self.vertices), default=0)

    def distance(self, a, b) -> int:
        """Graph distance between two vertices (BFS)."""
        if a == b:
            return 0
        frontier, seen, dist = {a}, {a}, 0
        while frontier:
            dist += 1
            nxt = set()
            for x in frontier:
                for y in self.neighbors(x):
                    if y == b:
                        return dist
                    if y not in seen:
                        seen.add(y)
                        nxt.add(y)
            frontier = nxt
        return np.iinfo(np.int64).max

    def subgraph(self, region) -> "LatticeGraph":
        region = [v for v in self.vertices if v in set(region)]
        edges = [e for e in self.edges if e[0] in region and e[1] in region]
        coords = {v: self.coords[v] for v in region} if self.coords else None
        return LatticeGraph(tuple(region), tuple(edges), coords)


def chain_graph(n: int) -> LatticeGraph:
    """Open 1-D chain ``0 - 1 - ... - n-1`` with integer coordinates."""
    vs = tuple(range(n))
    return LatticeGraph(vs, tuple((i, i + 1) for i in range(n - 1)), {i: (i,) for i in vs})


def grid_graph(nx: int, ny: int) -> LatticeGraph:
    vs = tuple((x, y) for x in range(nx) for y in range(ny))
    edges = []
    for x, y in vs:
        if x + 1 < nx:
            edges.append(((x, y), (x + 1, y)))
        if y + 1 < ny:
            edges.append(((x, y), (x, y + 1)))
    return LatticeGraph(vs, tuple(edges), {v: v for v in vs})


# -- coefficient tensors ----------------------------------------------------


def partner(idx):
    k, l, kp, lp = idx
    return (l, k, lp, kp)


def is_onsite(idx) -> bool:
    k, l, kp, lp = idx
    return (k, l) == (0, 0) or (kp, lp) == (0, 0)


def coefficient_indices(d: int):
    """All index tuples carrying a free coefficient (no on-site terms)."""
    return [idx for idx in itertools.product(range(d + 1), repeat=4) if not is_onsite(idx)]


@dataclass(frozen=True)
class EdgeCoefficients:
    lam: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=complex)
        if lam.ndim != 4 or len(set(lam.shape)) != 1:
            raise ValueError("coefficient tensor must have shape (d+1,)*4")
        lam = lam.copy()
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def d(self) -> int:
        return self.lam.shape[0] - 1

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros((d + 1,) * 4, dtype=complex))

    @classmethod
    def from_dict(cls, d, entries):
        lam = np.zeros((d + 1,) * 4, dtype=complex)
        for idx, val in entries.items():
            lam[idx] = val
        return cls(lam)

    def check(self, L=None, tol=1e-12):
        """Raise ``ValueError`` unless Hermiticity, no-on-site and the
        magnitude bound hold."""
        lam = self.lam
        herm = np.transpose(lam, (1, 0, 3, 2)).conj()
        if np.max(np.abs(lam - herm)) > tol:
            raise ValueError("coefficients violate Hermiticity")
        onsite = np.abs(lam[:, :, 0, 0]).max() + np.abs(lam[0, 0, :, :]).max()
        if onsite > tol:
            raise ValueError("on-site coefficients must vanish")
        if L is not None and np.abs(lam).max() > L + tol:
            raise ValueError(f"coefficient magnitude exceeds L={L}")
        return self

    def swapped(self) -> "EdgeCoefficients":
        """Same interaction seen from the opposite edge orientation."""
        return EdgeCoefficients(np.transpose(self.lam, (2, 3, 0, 1)))

    def hermitized(self) -> "EdgeCoefficients":
        lam = 0.5 * (self.lam + np.transpose(self.lam, (1, 0, 3, 2)).conj())
        lam[:, :, 0, 0] = 0
        lam[0, 0, :, :] = 0
        return EdgeCoefficients(lam)


@dataclass(frozen=True)
class HamiltonianSpec:
    graph: LatticeGraph
    coeffs: dict  # oriented edge tuple -> EdgeCoefficients
    d: int
    L: float

    def __post_init__(self):
        for e in self.graph.edges:
            if e not in self.coeffs:
                raise ValueError(f"edge {e} has no coefficient tensor")
            c = self.coeffs[e]
            if c.d != self.d:
                raise ValueError(f"edge {e} has degree {c.d}, expected {self.d}")
            c.check(self.L, tol=1e-9)

    def oriented(self, u, v) -> EdgeCoefficients:
        """Coefficients of the edge {u, v} with ``u`` carrying (k, l)."""
        if (u, v) in self.coeffs:
            return self.coeffs[(u, v)]
        return self.coeffs[(v, u)].swapped()

    def restricted(self, region) -> "HamiltonianSpec":
        g = self.graph.subgraph(region)
        return HamiltonianSpec(g, {e: self.coeffs[e] for e in g.edges}, self.d, self.L)


@dataclass(frozen=True)
class DissipatorSpec:
    """Jump operators ``a_j^p - alpha_j^p`` with ``alpha`` keyed by vertex."""

    p: int
    alpha: dict = field(default_factory=dict)
    eta: float = np.inf

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        for v, a in self.alpha.items():
            if abs(a) > self.eta:
                raise ValueError(f"|alpha_{v}| = {abs(a)} exceeds eta = {self.eta}")

    def amplitude(self, v) -> complex:
        return complex(self.alpha.get(v, 0.0))

    def with_alpha(self, alpha: dict) -> "DissipatorSpec":
        return DissipatorSpec(self.p, dict(alpha), self.eta)

    def check_refined(self, d: int):
        if self.p < 2 * d + 2:
            warnings.warn(f"p={self.p} below 2d+2={2 * d + 2}; localization bound not covered")


def random_hamiltonian(graph: LatticeGraph, d: int, L: float, seed) -> HamiltonianSpec:
    """Coefficients uniform in the complex disk of radius ``L``, then
    symmetrized to satisfy Hermiticity and the no-on-site constraint."""
    if d < 1:
        raise ValueError("d must be >= 1")
    rng = np.random.default_rng(seed)
    coeffs = {}
    for e in graph.edges:
        r = L * np.sqrt(rng.random((d + 1,) * 4))
        th = 2 * np.pi * rng.random((d + 1,) * 4)
        coeffs[e] = EdgeCoefficients(r * np.exp(1j * th)).hermitized()
    return HamiltonianSpec(graph, coeffs, d, L)


def single_term_hamiltonian(graph, d, entries, L=None) -> HamiltonianSpec:
    """Spec with the same listed coefficients (and Hermitian partners) on every edge."""
    full = {}
    for idx, val in entries.items():
        full[idx] = val
        full.setdefault(partner(idx), np.conj(val))
    c = EdgeCoefficients.from_dict(d, full).check()
    if L is None:
        L = max(abs(v) for v in full.values()) if full else 0.0
    return HamiltonianSpec(graph, {e: c for e in graph.edges}, d, L)


# -- operators ----------------------------------------------------------------


def _ladder_powers(trunc: TruncationSpec, d: int):
    t1 = TruncationSpec(trunc.cutoff, 1)
    a, ad = annihilation_op(t1), creation_op(t1)
    return {
        (k, l): np.linalg.matrix_power(ad, k) @ np.linalg.matrix_power(a, l)
        for k in range(d + 1)
        for l in range(d + 1)
    }


def build_edge_hamiltonian(coeffs: EdgeCoefficients, trunc: TruncationSpec) -> np.ndarray:
    """Dense two-mode matrix of ``H_e`` on the truncated space."""
    t2 = trunc.with_modes(2)
    if trunc.cutoff < coeffs.d:
        raise ValueError("cutoff must be at least the interaction degree")
    pw = _ladder_powers(t2, coeffs.d)
    H = np.zeros((t2.dim, t2.dim), dtype=complex)
    for idx in itertools.product(range(coeffs.d + 1), repeat=4):
        c = coeffs.lam[idx]
        if c != 0:
            H += c * np.kron(pw[idx[:2]], pw[idx[2:]])
    return H


def build_hamiltonian(spec: HamiltonianSpec, trunc: TruncationSpec, edges=None) -> sp.csr_matrix:
    """Sparse ``sum_e H_e`` on all vertices of ``spec.graph`` (in vertex order)."""
    g = spec.graph
    tr = trunc.with_modes(g.n_modes)
    pw = _ladder_powers(tr, spec.d)
    H = sp.csr_matrix((tr.dim, tr.dim), dtype=complex)
    for e in edges if edges is not None else g.edges:
        lam = spec.coeffs[e].lam
        i, j = g.index(e[0]), g.index(e[1])
        for idx in itertools.product(range(spec.d + 1), repeat=4):
            c = lam[idx]
            if c != 0:
                H = H + c * embed_operator([pw[idx[:2]], pw[idx[2:]]], [i, j], tr)
    return H.tocsr()


# -- g_e polynomial -------------------------------------------------------------


def g_poly_eval(spec: HamiltonianSpec, e, alpha: dict, beta) -> complex:
    """Evaluate ``g_e(alpha, beta)`` with ``alpha`` keyed by vertex.

    ``g_e(alpha, beta) |<alpha_e|beta>|^2 = <alpha|[H, |beta><beta|_e (x) I]|alpha>``.
    """
    i, j = e
    bi, bj = complex(beta[0]), complex(beta[1])
    a = {v: complex(alpha.get(v, 0.0)) for v in spec.graph.vertices}
    rng = range(spec.d + 1)
    total = 0j
    for x, bx, y in ((i, bi, j), (j, bj, i)):
        for nb in spec.graph.neighbors(x):
            if nb == y:
                continue
            lam = spec.oriented(x, nb).lam
            for k, l, kp, lp in itertools.product(rng, repeat=4):
                c = lam[k, l, kp, lp]
                if c == 0:
                    continue
                an = a[nb]
                total += c * (
                    np.conj(a[x]) ** k * np.conj(an) ** kp * bx**l * an**lp
                    - np.conj(bx) ** k * np.conj(an) ** kp * a[x] ** l * an**lp
                )
    lam = spec.oriented(i, j).lam
    ai, aj = a[i], a[j]
    for k, l, kp, lp in itertools.product(rng, repeat=4):
        c = lam[k, l, kp, lp]
        if c == 0:
            continue
        total += c * (
            np.conj(ai) ** k * np.conj(aj) ** kp * bi**l * bj**lp
            - np.conj(bi) ** k * np.conj(bj) ** kp * ai**l * aj**lp
        )
    return total


# Real variables of the edge-local polynomial: alpha_i, alpha_j (real
# amplitudes), then Re/Im of beta_i and Re/Im of beta_j.
G_VARS = ("alpha_i", "alpha_j", "beta_i_re", "beta_i_im", "beta_j_re", "beta_j_im")


def g_polynomial(coeffs: EdgeCoefficients) -> Poly:
    """``g_e`` for real edge amplitudes (neighbors in vacuum) as a stored
    polynomial in the six real variables of ``G_VARS``."""
    nv = 6
    ai, aj = Poly.variable(nv, 0), Poly.variable(nv, 1)
    bi = Poly.variable(nv, 2) + Poly.variable(nv, 3, 1j)
    bj = Poly.variable(nv, 4) + Poly.variable(nv, 5, 1j)
    bic, bjc = bi.conj(), bj.conj()
    d = coeffs.d
    pw = {}

    def p(base, name, n):
        key = (name, n)
        if key not in pw:
            pw[key] = base**n
        return pw[key]

    g = Poly(nv)
    for k, l, kp, lp in itertools.product(range(d + 1), repeat=4):
        c = coeffs.lam[k, l, kp, lp]
        if c == 0:
            continue
        t1 = p(ai, "ai", k) * p(aj, "aj", kp) * p(bi, "bi", l) * p(bj, "bj", lp)
        t2 = p(bic, "bic", k) * p(bjc, "bjc", kp) * p(ai, "ai", l) * p(aj, "aj", lp)
        g = g + (t1 - t2) * c
    return g


def rotated_beta(poly: Poly, theta: float) -> Poly:
    """Restrict a polynomial in ``G_VARS`` to ``beta = e^{i theta} b`` with
    real ``b``; the result uses variables (alpha_i, alpha_j, b_i, b_j)."""
    nv = 4
    c, s = np.cos(theta), np.sin(theta)
    images = [
        Poly.variable(nv, 0),
        Poly.variable(nv, 1),
        Poly.variable(nv, 2, c),
        Poly.variable(nv, 2, s),
        Poly.variable(nv, 3, c),
        Poly.variable(nv, 3, s),
    ]
    return poly.substitute(images)


def _mixed_derivative(poly4: Poly, idx) -> complex:
    k, l, kp, lp = idx
    return poly4.derivative_at_zero((k, kp, l, lp))


def coefficients_from_g(g: Poly, d: int, scale: complex = 1.0) -> EdgeCoefficients:
    """Invert ``lam -> g_e`` through partial derivatives at the origin.

    The imaginary part of each coefficient is read off the real-``beta``
    restriction and the real part off the restriction rotated by
    ``exp(-i pi / (2(l + l')))``.  ``scale`` divides ``g`` first (the
    learners pass ``i`` since they measure ``i g_e``).  Coefficients with
    ``l = l' = 0`` take their real part from the Hermitian partner.
    """
    for var in (0, 1):
        if g.degree(var) > d:
            raise ValueError(f"polynomial degree {g.degree(var)} in alpha exceeds d={d}")
    g = g * (1.0 / scale)
    real_restr = rotated_beta(g, 0.0)
    rotated = {}
    lam = np.zeros((d + 1,) * 4, dtype=complex)
    for idx in coefficient_indices(d):
        k, l, kp, lp = idx
        fact = factorial(k) * factorial(l) * factorial(kp) * factorial(lp)
        im = _mixed_derivative(real_restr, idx) / (2j * fact)
        if l + lp > 0:
            s = l + lp
            if s not in rotated:
                rotated[s] = rotated_beta(g, -np.pi / (2 * s))
            re = -_mixed_derivative(rotated[s], idx) / (2j * fact)
        else:
            pk, pl, pkp, plp = partner(idx)
            pfact = fact
            s = pl + plp
            if s not in rotated:
                rotated[s] = rotated_beta(g, -np.pi / (2 * s))
            re = -_mixed_derivative(rotated[s], partner(idx)) / (2j * pfact)
        lam[idx] = re.real + 1j * im.real
    return EdgeCoefficients(lam).hermitized()


# -- Fock matrix elements ---------------------------------------------------------


def _ladder_element(u, v, k, l) -> float:
    """``<u|(a^dag)^k a^l|v>`` for a single mode."""
    if u - k != v - l or u < k or v < l:
        return 0.0
    return sqrt(factorial(v) / factorial(v - l) * factorial(u) / factorial(u - k))


def matrix_element_table(coeffs: EdgeCoefficients, u_max: int) -> np.ndarray:
    """Table ``T[u, up, v, vp] = <u up|H_e|v vp>`` for levels ``<= u_max``."""
    d = coeffs.d
    if u_max < d:
        raise ValueError("u_max must be at least d")
    n = u_max + 1
    T = np.zeros((n,) * 4, dtype=complex)
    for u, up, v, vp in itertools.product(range(n), repeat=4):
        s = 0j
        for k in range(min(u, d) + 1):
            l = v + k - u
            if not 0 <= l <= d:
                continue
            f1 = _ladder_element(u, v, k, l)
            for kp in range(min(up, d) + 1):
                lp = vp + kp - up
                if not 0 <= lp <= d:
                    continue
                c = coeffs.lam[k, l, kp, lp]
                if c != 0:
                    s += c * f1 * _ladder_element(up, vp, kp, lp)
        T[u, up, v, vp] = s
    return T


def _substitution_order(d: int):
    return sorted(coefficient_indices(d), key=lambda x: (sum(x), x[0], x[2], x[1], x[3]))


def lambda_from_matrix_elements(table: np.ndarray, d: int) -> EdgeCoefficients:
    """Forward substitution ``<u up|H_e|v vp> -> lam`` in increasing total order.

    For index ``(k, l, kp, lp)`` the matrix element ``<k kp|H_e|l lp>`` contains
    ``lam[k, l, kp, lp] sqrt(k! l! kp! lp!)`` plus contributions of
    coefficients with strictly smaller total order.
    """
    if table.shape[0] < d + 1:
        raise ValueError("table does not cover levels up to d")
    lam = np.zeros((d + 1,) * 4, dtype=complex)
    for idx in _substitution_order(d):
        k, l, kp, lp = idx
        u, up, v, vp = k, kp, l, lp
        rest = 0j
        for kk in range(u + 1):
            ll = v + kk - u
            if not 0 <= ll <= d or kk > d:
                continue
            for kkp in range(up + 1):
                llp = vp + kkp - up
                if not 0 <= llp <= d or kkp > d or (kk, kkp) == (k, kp):
                    continue
                c = lam[kk, ll, kkp, llp]
                if c != 0:
                    rest += c * _ladder_element(u, v, kk, ll) * _ladder_element(up, vp, kkp, llp)
        diag = _ladder_element(u, v, k, l) * _ladder_element(up, vp, kp, lp)
        assert diag > 0, "forward substitution hit a zero pivot"
        lam[idx] = (table[u, up, v, vp] - rest) / diag
    return EdgeCoefficients(lam).hermitized()


def substitution_condition_factor(d: int) -> float:
    """Max row-sum of the linear map (matrix elements -> coefficients): an
    entry-wise table error ``sigma`` yields coefficient errors at most this
    factor times ``sigma``."""
    idxs = _substitution_order(d)
    n = len(idxs)
    A = np.zeros((n, n))
    for col, idx in enumerate(idxs):
        lam = np.zeros((d + 1,) * 4, dtype=complex)
        lam[idx] = 1.0
        T = matrix_element_table(EdgeCoefficients(lam), d)
        for row, (k, l, kp, lp) in enumerate(idxs):
            A[row, col] = T[k, kp, l, lp].real
    inv = np.linalg.inv(A)
    return float(np.abs(inv).sum(axis=1).max())


# -- serialization ----------------------------------------------------------------


def _vertex_to_json(v):
    return list(v) if isinstance(v, tuple) else v


def _vertex_from_json(v):
    return tuple(v) if isinstance(v, list) else v


def spec_to_dict(spec: HamiltonianSpec, dspec: DissipatorSpec | None = None) -> dict:
    g = spec.graph
    doc = {
        "vertices": [_vertex_to_json(v) for v in g.vertices],
        "edges": [[_vertex_to_json(u), _vertex_to_json(v)] for u, v in g.edges],
        "coords": None
        if g.coords is None
        else [[_vertex_to_json(v), list(c)] for v, c in g.coords.items()],
        "d": spec.d,
        "L": spec.L,
        "lambda": [],
    }
    for n, e in enumerate(g.edges):
        lam = spec.coeffs[e].lam
        rows = [
            [int(k), int(l), int(kp), int(lp), float(lam[k, l, kp, lp].real), float(lam[k, l, kp, lp].imag)]
            for k, l, kp, lp in zip(*np.nonzero(lam))
        ]
        doc["lambda"].append({"edge": n, "rows": rows})
    if dspec is not None:
        doc["p"] = dspec.p
        doc["alpha"] = [[_vertex_to_json(v), complex(a).real, complex(a).imag] for v, a in dspec.alpha.items()]
    return doc


def spec_from_dict(doc: dict):
    vertices = tuple(_vertex_from_json(v) for v in doc["vertices"])
    edges = tuple((_vertex_from_json(u), _vertex_from_json(v)) for u, v in doc["edges"])
    coords = None
    if doc.get("coords"):
        coords = {_vertex_from_json(v): tuple(c) for v, c in doc["coords"]}
    graph = LatticeGraph(vertices, edges, coords)
    d = int(doc["d"])
    coeffs = {}
    for block in doc["lambda"]:
        lam = np.zeros((d + 1,) * 4, dtype=complex)
        for k, l, kp, lp, re, im in block["rows"]:
            lam[k, l, kp, lp] = re + 1j * im
        coeffs[edges[block["edge"]]] = EdgeCoefficients(lam)
    for e in edges:
        coeffs.setdefault(e, EdgeCoefficients.zeros(d))
    spec = HamiltonianSpec(graph, coeffs, d, float(doc["L"]))
    dspec = None
    if "p" in doc:
        alpha = {_vertex_from_json(v): re + 1j * im for v, re, im in doc.get("alpha", [])}
        dspec = DissipatorSpec(int(doc["p"]), alpha)
    return spec, dspec


def dump_spec(spec, dspec=None) -> str:
    return json.dumps(spec_to_dict(spec, dspec), indent=2)


def load_spec(text: str):
    return spec_from_dict(json.loads(text))
