"""Heterodyne sampling, input-state preparation, edge partitions and shots.

Random streams are counter-based (Philox) and keyed by
``(seed, plan_id, edge index, block)`` where ``block = shot_id // BLOCK``.
A shot's sample is the ``shot_id % BLOCK``-th draw of its block, so results
do not depend on how shots are batched or distributed across workers.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field

import networkx as nx
import numpy as np
from scipy.special import gammaln

from .dynamics import build_liouvillian, evolve_times
from .fock import TruncationSpec, coherent_state, partial_trace
from .lattice import DissipatorSpec, HamiltonianSpec, LatticeGraph

log = logging.getLogger(__name__)

BLOCK = 4096


class EnvelopeError(RuntimeError):
    """A proposal point exceeded the rejection envelope."""


# -- random streams -------------------------------------------------------------


def stream(seed: int, plan_id: int, edge: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(plan_id), int(edge), int(block)])
    return np.random.Generator(np.random.Philox(ss))


# -- Husimi density -------------------------------------------------------------


def _coherent_rows(beta: np.ndarray, cutoff: int) -> np.ndarray:
    """Rows ``e^{-|b|^2/2} b^n / sqrt(n!)`` for each complex ``b``; shape (npts, M+1)."""
    n = np.arange(cutoff + 1)
    b = np.asarray(beta, dtype=complex).reshape(-1, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        logabs = n * np.log(np.abs(b)) - 0.5 * gammaln(n + 1)
    out = np.exp(logabs - 0.5 * np.abs(b) ** 2) * np.exp(1j * n * np.angle(b))
    out[:, 0] = np.exp(-0.5 * np.abs(b[:, 0]) ** 2)
    return out


def husimi_density(rho, beta, cutoff: int | None = None) -> np.ndarray:
    """``<beta|rho|beta> / pi^m`` for an ``m``-mode state.

    ``beta`` has shape ``(m,)`` or ``(npts, m)`` (complex).
    """
    rho = np.asarray(rho)
    if rho.ndim == 1:
        rho = np.outer(rho, rho.conj())
    scalar = np.ndim(beta) == 1
    beta = np.atleast_2d(np.asarray(beta, dtype=complex))
    m = beta.shape[1]
    if cutoff is None:
        cutoff = int(round(rho.shape[0] ** (1 / m))) - 1
    rows = _coherent_rows(beta[:, 0], cutoff)
    for k in range(1, m):
        r = _coherent_rows(beta[:, k], cutoff)
        rows = (rows[:, :, None] * r[:, None, :]).reshape(len(beta), -1)
    vals = np.einsum("pn,nm,pm->p", rows.conj(), rho, rows).real / np.pi**m
    vals = np.maximum(vals, 0.0)
    return vals[0] if scalar else vals


# -- rejection sampler ------------------------------------------------------------


def _powers_over_sqrt_fact(r: np.ndarray, cutoff: int) -> np.ndarray:
    n = np.arange(cutoff + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        lg = n[None, :] * np.log(r[:, None]) - 0.5 * gammaln(n + 1)[None, :]
    out = np.exp(lg)
    out[:, 0] = 1.0
    return out


@dataclass
class _Envelope:
    s2: tuple  # per-mode proposal variances
    K: float


DEFAULT_S2_GRID = (1.3, 1.6, 2.0, 2.5, 3.2, 4.0, 5.0, 6.5, 8.0, 10.0, 12.0)


def phase_max_modulus(psi: np.ndarray, cutoff: int, r: np.ndarray, oversample: int = 6) -> np.ndarray:
    """Upper bound on ``max_phases |sum_n psi_n z_1^{n_1} z_2^{n_2} / sqrt(n_1! n_2!)|``
    for every radius pair ``(|z_1|, |z_2|) = (r_a, r_b)``.

    The modulus is a trigonometric polynomial of degree ``cutoff`` in each
    phase; its maximum on an ``N``-point grid per phase (``N = oversample *
    cutoff``) is inflated by ``cos(pi cutoff / (2N))^-2`` to bound the
    continuous maximum.
    """
    Psi = psi.reshape(cutoff + 1, cutoff + 1)
    N = max(oversample * cutoff, 8)
    R = _powers_over_sqrt_fact(r, cutoff)
    G = np.fft.fft(Psi[None, :, :] * R[:, None, :], n=N, axis=2)  # (b, n1, phi2)
    E = np.exp(-2j * np.pi * np.outer(np.arange(N), np.arange(cutoff + 1)) / N)
    out = np.empty((len(r), len(r)))
    for a in range(len(r)):
        H = np.matmul(E * R[a][None, :], G)
        out[a] = np.abs(H).max(axis=(1, 2))
    return out / np.cos(np.pi * cutoff / (2 * N)) ** 2


def envelope_for(psi: np.ndarray, cutoff: int, s2_grid=DEFAULT_S2_GRID, margin=1.05, rmax=None, npts=72):
    """Pick per-mode proposal variances minimizing the envelope constant.

    For a two-mode amplitude vector ``psi`` the target density is
    ``e^{-|b|^2} |psi(conj b)|^2 / pi^2`` and the proposal is a product of
    complex Gaussians of variances ``s_i^2``.  The density ratio is bounded
    by ``s_1^2 s_2^2 B(r_1, r_2)^2 exp(-sum (1 - 1/s_i^2) r_i^2)`` where
    ``B`` bounds the modulus over phases (:func:`phase_max_modulus`).  The
    radial maximum is located on a coarse grid and refined locally.
    """
    if rmax is None:
        rmax = 3.0 + 2.5 * np.sqrt(cutoff + 1)
    r = np.linspace(0, rmax, npts)
    logB2 = 2 * np.log(phase_max_modulus(psi, cutoff, r) + 1e-300)
    r2 = r**2
    best = None
    for s1, s2 in itertools.product(s2_grid, repeat=2):
        val = logB2 - (1 - 1 / s1) * r2[:, None] - (1 - 1 / s2) * r2[None, :]
        top = val.max()
        # the maximum must lie well inside the scanned square
        if max(val[-1, :].max(), val[:, -1].max()) > top - 20:
            continue
        K = s1 * s2 * np.exp(top)
        if best is None or K < best[0]:
            best = (K, (s1, s2), np.unravel_index(np.argmax(val), val.shape))
    if best is None:
        raise EnvelopeError("radial scan did not enclose the envelope maximum")
    _, (s1, s2), (ia, ib) = best
    h = r[1] - r[0]
    fine_a = np.linspace(max(r[ia] - 1.5 * h, 0), r[ia] + 1.5 * h, 25)
    fine_b = np.linspace(max(r[ib] - 1.5 * h, 0), r[ib] + 1.5 * h, 25)
    K = best[0]
    # refine on a joint grid around the coarse maximum
    rr = np.union1d(fine_a, fine_b)
    Bf = 2 * np.log(phase_max_modulus(psi, cutoff, rr) + 1e-300)
    valf = Bf - (1 - 1 / s1) * rr[:, None] ** 2 - (1 - 1 / s2) * rr[None, :] ** 2
    K = max(K, s1 * s2 * np.exp(valf.max()))
    return _Envelope((s1, s2), K * margin)


def _sample_pure(psi: np.ndarray, cutoff: int, n: int, rng: np.random.Generator, env: _Envelope, stats: dict):
    """Exact rejection sampling of ``n`` outcomes from a pure two-mode state."""
    Psi = psi.reshape(cutoff + 1, cutoff + 1)
    out = np.empty((0, 2), dtype=complex)
    s2 = np.array(env.s2)
    while len(out) < n:
        need = n - len(out)
        m = int(min(max(need * env.K * 1.2 + 64, 256), 2_000_000))
        z = (rng.standard_normal((m, 2)) + 1j * rng.standard_normal((m, 2))) * np.sqrt(s2 / 2)
        u = rng.random(m)
        V1 = _conj_rows(z[:, 0], cutoff)
        V2 = _conj_rows(z[:, 1], cutoff)
        amp = np.einsum("pi,pi->p", V1 @ Psi, V2)
        r2 = np.abs(z) ** 2
        log_ratio = (
            np.log(np.abs(amp) ** 2 + 1e-300)
            - (r2 * (1 - 1 / s2)).sum(axis=1)
            + np.log(s2).sum()
        )
        ratio = np.exp(log_ratio) / env.K
        stats["proposed"] += m
        if np.any(ratio > 1.0):
            raise EnvelopeError(f"envelope violated (ratio {ratio.max():.3f})")
        acc = z[u < ratio]
        stats["accepted"] += len(acc)
        out = np.vstack([out, acc[:need]])
    return out


def _conj_rows(z: np.ndarray, cutoff: int) -> np.ndarray:
    """Rows ``conj(z)^n / sqrt(n!)``."""
    n = np.arange(cutoff + 1)
    zc = np.conj(z)[:, None]
    out = np.ones((len(z), cutoff + 1), dtype=complex)
    for k in range(1, cutoff + 1):
        out[:, k] = out[:, k - 1] * zc[:, 0] / np.sqrt(k)
    return out


class HeterodyneSampler:
    """Sampler for a fixed two-mode state; envelopes are cached per eigenvector.

    Parameters
    ----------
    rho : ndarray
        Two-mode density matrix of dimension ``(M+1)^2``.
    eig_floor : float
        Eigenvalues below this are discarded before sampling.
    """

    def __init__(self, rho, cutoff: int | None = None, eig_floor: float = 1e-13):
        rho = np.asarray(rho, dtype=complex)
        if cutoff is None:
            cutoff = int(round(np.sqrt(rho.shape[0]))) - 1
        if (cutoff + 1) ** 2 != rho.shape[0]:
            raise ValueError("sampler expects a two-mode state")
        self.cutoff = cutoff
        w, V = np.linalg.eigh(0.5 * (rho + rho.conj().T))
        keep = w > eig_floor
        self.weights = w[keep] / w[keep].sum()
        self.vectors = V[:, keep]
        self._env = {}
        self.stats = {"proposed": 0, "accepted": 0}

    def envelope(self, k: int) -> _Envelope:
        if k not in self._env:
            self._env[k] = envelope_for(self.vectors[:, k], self.cutoff)
        return self._env[k]

    @property
    def acceptance(self) -> float:
        p = self.stats["proposed"]
        return self.stats["accepted"] / p if p else float("nan")

    def expected_acceptance(self) -> float:
        return float(sum(w / self.envelope(k).K for k, w in enumerate(self.weights)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` outcomes as a complex array of shape ``(n, 2)``."""
        counts = rng.multinomial(n, self.weights)
        labels = np.repeat(np.arange(len(counts)), counts)
        rng.shuffle(labels)
        out = np.empty((n, 2), dtype=complex)
        for k in np.nonzero(counts)[0]:
            out[labels == k] = _sample_pure(self.vectors[:, k], self.cutoff, counts[k], rng, self.envelope(k), self.stats)
        return out


def sample_heterodyne(rho_e, rng: np.random.Generator, n: int = 1) -> np.ndarray:
    """Draw ``n`` heterodyne outcomes (shape ``(n, 2)`` complex) from a two-mode state."""
    sampler = HeterodyneSampler(rho_e)
    out = sampler.sample(n, rng)
    log.debug("heterodyne acceptance %.3f", sampler.acceptance)
    return out


# -- partitions -----------------------------------------------------------------


def _line_graph_conflicts(graph: LatticeGraph, strong: bool):
    G = nx.Graph()
    G.add_nodes_from(graph.vertices)
    G.add_edges_from(graph.edges)
    edges = list(graph.edges)
    conflict = nx.Graph()
    conflict.add_nodes_from(range(len(edges)))
    for a, b in itertools.combinations(range(len(edges)), 2):
        ea, eb = set(edges[a]), set(edges[b])
        clash = bool(ea & eb)
        if strong and not clash:
            clash = any(G.has_edge(u, v) for u in ea for v in eb)
        if clash:
            conflict.add_edge(a, b)
    return edges, conflict


def rectangle(graph: LatticeGraph, e, r: int):
    """Vertices within coordinate-wise distance ``r`` of the edge's bounding box."""
    if graph.coords is None:
        raise ValueError("rectangle regions need lattice coordinates")
    c = np.array([graph.coords[e[0]], graph.coords[e[1]]], dtype=float)
    lo, hi = c.min(axis=0) - r, c.max(axis=0) + r
    return [v for v in graph.vertices if np.all(np.asarray(graph.coords[v]) >= lo) and np.all(np.asarray(graph.coords[v]) <= hi)]


def partition_edges(graph: LatticeGraph, mode: str = "edge-disjoint", radius: int | None = None):
    """Split the edges into groups that can be measured simultaneously.

    Modes
    -----
    ``edge-disjoint``
        No two edges in a group share a vertex (greedy line-graph coloring).
    ``strong``
        Additionally no edge joins two edges of a group, so every
        neighbour of a measured edge stays in vacuum.
    ``rectangle-disjoint``
        Shifted coverings of the lattice: rectangles of radius ``radius``
        around edges in one group are disjoint.
    """
    if not graph.edges:
        return []
    if mode in ("edge-disjoint", "strong"):
        edges, conflict = _line_graph_conflicts(graph, strong=(mode == "strong"))
        colors = nx.coloring.greedy_color(conflict, strategy="largest_first")
        groups = {}
        for idx in range(len(edges)):
            groups.setdefault(colors[idx], []).append(edges[idx])
        return [groups[c] for c in sorted(groups)]
    if mode == "rectangle-disjoint":
        if graph.coords is None:
            raise ValueError("rectangle-disjoint partition needs lattice coordinates")
        if radius is None or radius < 0:
            raise ValueError("rectangle-disjoint partition needs a radius >= 0")
        period = 2 * radius + 2
        groups = {}
        for e in graph.edges:
            c = np.array([graph.coords[e[0]], graph.coords[e[1]]])
            axis = int(np.argmax(np.abs(c[1] - c[0])))
            corner = tuple(int(x) % period for x in c.min(axis=0))
            groups.setdefault((axis, corner), []).append(e)
        return [groups[k] for k in sorted(groups)]
    raise ValueError(f"unknown partition mode {mode!r}")


# -- input states -----------------------------------------------------------------


def prepare_input_state(
    alpha: dict,
    edge_set,
    graph: LatticeGraph,
    trunc: TruncationSpec,
    projected: bool = False,
    level: int | None = None,
    as_density: bool = True,
):
    """Product of coherent states on the edges in ``edge_set``, vacuum elsewhere.

    With ``projected`` each measured mode is projected onto Fock levels
    ``<= level`` and the whole state renormalized.  Without projection the
    coherent amplitudes are those of the simulation cutoff, renormalized.
    """
    covered = {v for e in edge_set for v in e}
    for v, a in alpha.items():
        if a != 0 and v not in covered:
            raise ValueError(f"nonzero input amplitude on vertex {v} outside the measured edges")
        if v not in graph.vertices:
            raise ValueError(f"unknown vertex {v}")
    t1 = TruncationSpec(trunc.cutoff)
    if projected and (level is None or level > trunc.cutoff):
        raise ValueError("projected inputs need a level <= simulation cutoff")
    psi = np.ones(1, dtype=complex)
    for v in graph.vertices:
        amp, _ = coherent_state(complex(alpha.get(v, 0.0)), t1)
        if projected and v in covered:
            amp = amp.copy()
            amp[level + 1 :] = 0
        psi = np.kron(psi, amp)
    psi /= np.linalg.norm(psi)
    return np.outer(psi, psi.conj()) if as_density else psi


def projection_correction(alpha_e, level: int) -> float:
    """``prod_i sum_{k<=level} |alpha_i|^{2k}/k!`` for the edge amplitudes."""
    out = 1.0
    for a in alpha_e:
        x = abs(a) ** 2
        k = np.arange(level + 1)
        out *= float(np.exp(k * np.log(x) - gammaln(k + 1)).sum()) if x > 0 else 1.0
    return out


# -- plans, simulation and shots -------------------------------------------------


@dataclass(frozen=True)
class MeasurementPlan:
    """One measurement setting.

    ``alpha`` assigns the same complex pair to every edge of the group, first
    entry on the edge's first vertex.  ``phase`` is a bookkeeping tag for the
    real-part channel; the phase itself enters the evaluation net only.
    """

    edges: tuple
    alpha: tuple
    t: float
    shots: int
    seed: int = 0
    plan_id: int = 0
    partition_index: int = 0
    phase: str = "im"
    projected: bool = False
    level: int | None = None

    def __post_init__(self):
        if self.shots < 1:
            raise ValueError("shots must be >= 1")
        if self.t < 0:
            raise ValueError("t must be nonnegative")
        seen = set()
        for e in self.edges:
            if seen & set(e):
                raise ValueError("edges in one plan must be vertex-disjoint")
            seen |= set(e)

    def amplitudes(self) -> dict:
        a = {}
        for u, v in self.edges:
            a[u], a[v] = complex(self.alpha[0]), complex(self.alpha[1])
        return a


@dataclass
class Simulator:
    """Ground-truth model plus numerical settings used to run experiments."""

    spec: HamiltonianSpec
    p: int
    cutoff: int
    method: str = "auto"
    _cache: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def _key(plan: MeasurementPlan, t=None):
        return (plan.edges, plan.alpha, plan.t if t is None else float(t), plan.projected, plan.level)

    def reduced_states(self, plan: MeasurementPlan):
        """Evolve the plan's input and return ``{edge: two-mode state}``."""
        key = self._key(plan)
        if key not in self._cache:
            self.reduced_states_times(plan, [plan.t])
        return self._cache[key]

    def reduced_states_times(self, plan: MeasurementPlan, times):
        """Reduced states of ``plan``'s input at several times (one sweep)."""
        times = [float(t) for t in times]
        todo = sorted({t for t in times if self._key(plan, t) not in self._cache})
        if todo:
            g = self.spec.graph
            trunc = TruncationSpec(self.cutoff, g.n_modes)
            amps = plan.amplitudes()
            rho0 = prepare_input_state(amps, plan.edges, g, trunc, plan.projected, plan.level)
            L = build_liouvillian(self.spec, DissipatorSpec(self.p, amps), trunc)
            results = evolve_times(rho0, L, todo, method=self.method, check=False)
            for t, res in zip(todo, results):
                out = {}
                for e in plan.edges:
                    keep = [g.index(e[0]), g.index(e[1])]
                    red = partial_trace(res.rho, keep, trunc)
                    out[e] = red / np.trace(red).real
                self._cache[self._key(plan, t)] = out
        return [self._cache[self._key(plan, t)] for t in times]

    def sampler(self, plan: MeasurementPlan, e) -> "HeterodyneSampler":
        """Sampler for edge ``e`` under ``plan``, cached across shot chunks."""
        key = ("sampler", *self._key(plan), e)
        if key not in self._cache:
            self._cache[key] = HeterodyneSampler(self.reduced_states(plan)[e], self.cutoff)
        return self._cache[key]


@dataclass
class SampleBatch:
    """Heterodyne outcomes for one plan.

    Attributes
    ----------
    shot_id, edge_index : int arrays
    beta : float array, shape (n, 4)
        ``(Re b_i, Im b_i, Re b_j, Im b_j)``.
    plan : MeasurementPlan
    vertices : tuple
    edges : tuple
        Graph edge list used for ``edge_index``.
    """

    shot_id: np.ndarray
    edge_index: np.ndarray
    beta: np.ndarray
    plan: MeasurementPlan
    vertices: tuple
    edges: tuple

    def __len__(self):
        return len(self.shot_id)

    def for_edge(self, e) -> np.ndarray:
        return self.beta[self.edge_index == self.edges.index(e)]

    def complex_beta(self, e) -> np.ndarray:
        b = self.for_edge(e)
        return b[:, 0::2] + 1j * b[:, 1::2]

    def columns(self):
        cols = ["shot_id", "edge", "t"]
        for v in self.vertices:
            cols += [f"alpha_re_{v}", f"alpha_im_{v}"]
        cols += ["beta_i_re", "beta_i_im", "beta_j_re", "beta_j_im", "partition", "phase"]
        return cols

    def to_csv(self, path):
        amps = self.plan.amplitudes()
        arow = []
        for v in self.vertices:
            a = amps.get(v, 0j)
            arow += [repr(float(a.real)), repr(float(a.imag))]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.columns())
            for s, ei, b in zip(self.shot_id, self.edge_index, self.beta):
                w.writerow([int(s), int(ei), repr(float(self.plan.t)), *arow, *(repr(float(x)) for x in b), self.plan.partition_index, self.plan.phase])

    @staticmethod
    def read_csv(path):
        """Return the raw columns as a dict of numpy arrays (strings for ``phase``)."""
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        out = {}
        for j, name in enumerate(header):
            col = [r[j] for r in body]
            out[name] = np.array(col) if name == "phase" else np.array(col, dtype=float)
        return out


def run_shots(plan: MeasurementPlan, sim: Simulator, shot_ids=None) -> SampleBatch:
    """Simulate ``plan`` and draw one outcome per measured edge per shot."""
    shot_ids = np.arange(plan.shots) if shot_ids is None else np.asarray(shot_ids)
    g = sim.spec.graph
    sids, eidx, betas = [], [], []
    for e in plan.edges:
        ei = g.edges.index(e)
        sampler = sim.sampler(plan, e)
        vals = np.empty((len(shot_ids), 2), dtype=complex)
        blocks = shot_ids // BLOCK
        for b in np.unique(blocks):
            sel = blocks == b
            draws = sampler.sample(BLOCK, stream(plan.seed, plan.plan_id, ei, b))
            vals[sel] = draws[shot_ids[sel] - b * BLOCK]
        log.debug("edge %s acceptance %.3f", e, sampler.acceptance)
        sids.append(shot_ids)
        eidx.append(np.full(len(shot_ids), ei))
        betas.append(np.column_stack([vals[:, 0].real, vals[:, 0].imag, vals[:, 1].real, vals[:, 1].imag]))
    return SampleBatch(np.concatenate(sids), np.concatenate(eidx), np.vstack(betas), plan, g.vertices, g.edges)


def run_shot(plan: MeasurementPlan, sim: Simulator, shot_id: int = 0) -> SampleBatch:
    """Single shot; bit-identical to the same shot drawn inside a batch."""
    return run_shots(plan, sim, [shot_id])
