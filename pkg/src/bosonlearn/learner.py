"""Hamiltonian-learning protocols, sample budgets and exact expectation oracles.

Two protocols recover the edge coefficients ``lam``:

* vanilla: coherent inputs evolved for one short time ``t``; box estimators
  of the relative change of the heterodyne density are interpolated in
  ``(alpha, beta)`` and differentiated;
* refined: projected coherent inputs evolved for several times; box
  estimators are fitted in ``t`` (derivative at ``t = 0``) and in
  ``(alpha, beta)``, giving matrix elements of ``H_e`` and then ``lam``.

Every reconstruction is a fixed real-linear map of the estimator table,
which is also exposed (``*_linear_map``) for error propagation.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from math import factorial

import numpy as np

from .estimators import BoxNet, operator_cell_integrals, weight_range
from .fock import TruncationSpec, annihilation_op
from .lattice import (
    EdgeCoefficients,
    HamiltonianSpec,
    coefficient_indices,
    coefficients_from_g,
    g_polynomial,
    lambda_from_matrix_elements,
)
from .measurement import MeasurementPlan, Simulator, partition_edges, projection_correction, run_shots
from .poly import Poly
from .polyfit import (
    chebyshev_arc_nodes,
    derivative_weights,
    derivatives_from_grid,
    lagrange_multivariate,
    time_window,
)

log = logging.getLogger(__name__)

CHUNK = 1 << 18


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


# -- budgets ------------------------------------------------------------------------


def sample_budget(eps_stat: float, delta: float, sizes, value_range: float) -> int:
    """Hoeffding shot count for a union bound over ``prod(sizes)`` estimators.

    Each estimator is a mean of ``T`` i.i.d. summands lying in an interval of
    length ``value_range``; ``T = ceil(R^2 ln(2 N / delta) / (2 eps^2))``
    makes all ``N`` of them ``eps_stat``-accurate with probability ``1 - delta``.
    """
    if not (0 < eps_stat and 0 < delta < 1):
        raise ValueError("need eps_stat > 0 and 0 < delta < 1")
    n = float(np.prod([int(s) for s in sizes]))
    return int(np.ceil(value_range**2 * np.log(2 * n / delta) / (2 * eps_stat**2)))


# -- tables and results -------------------------------------------------------------


@dataclass
class EstimateTable:
    """Estimator values per edge.

    ``values[e]`` has shape ``(n_times, n_alpha, n_beta)``; vanilla tables
    have a single time.  ``alpha_net`` rows are real amplitude pairs and
    ``beta_net`` rows are box corners ``(Re b_i, Im b_i, Re b_j, Im b_j)``.
    """

    protocol: str
    values: dict
    times: np.ndarray
    alpha_net: np.ndarray
    beta_net: np.ndarray
    shots: int
    phase: str = "full"
    stderr: dict | None = None

    def items(self):
        """Flat view ``((edge, alpha, beta, t, phase), value)``."""
        for e, arr in self.values.items():
            for (k, t), (a, al), (b, be) in itertools.product(
                enumerate(self.times), enumerate(self.alpha_net), enumerate(self.beta_net)
            ):
                yield (e, tuple(al), tuple(be), float(t), self.phase), float(arr[k, a, b])

    def __len__(self):
        return sum(v.size for v in self.values.values())

    def with_values(self, values: dict) -> "EstimateTable":
        return EstimateTable(
            self.protocol, values, self.times, self.alpha_net, self.beta_net, self.shots, self.phase
        )


@dataclass
class CoefficientEstimate:
    """Reconstructed coefficients per edge plus errors against a known truth."""

    lam: dict
    protocol: str
    metadata: dict = field(default_factory=dict)
    errors: dict | None = None

    def compare(self, truth: HamiltonianSpec) -> float:
        """Fill ``errors`` (per edge, per index) and return the max error."""
        self.errors = {}
        worst = 0.0
        for e, est in self.lam.items():
            err = np.abs(est.lam - truth.coeffs[e].lam)
            self.errors[e] = err
            worst = max(worst, float(err.max()))
        return worst

    def max_error(self) -> float:
        if self.errors is None:
            raise ValueError("no ground truth compared")
        return max(float(e.max()) for e in self.errors.values())


# -- vanilla nets -------------------------------------------------------------------


def _even_chebyshev(n: int) -> np.ndarray:
    """``n`` distinct nonzero nodes: first ``n`` of an even Chebyshev set."""
    m = n + (n % 2)
    nodes = np.cos(np.pi * (np.arange(m) + 0.5) / m)
    order = np.argsort(np.abs(nodes), kind="stable")[::-1]
    return np.sort(nodes[order[:n]])[::-1]


def vanilla_mode_block(d: int):
    """Exponents ``(p, q)`` of one mode's box-integrated polynomial:
    ``x y * {x^a y^b : a + b <= d}``."""
    return [(a + 1, b + 1) for a in range(d + 1) for b in range(d + 1) if a + b <= d]


def vanilla_exponents(d: int):
    """Monomial basis of ``Q(alpha_i, alpha_j, x_i, y_i, x_j, y_j)``."""
    blk = vanilla_mode_block(d)
    return [
        (a1, a2, *bi, *bj)
        for a1, a2 in itertools.product(range(d + 1), repeat=2)
        for bi in blk
        for bj in blk
    ]


def vanilla_nets(d: int, alpha_radius: float = 1.0, beta_radius: float = 1.0):
    """Unisolvent nets for the vanilla basis inside the unit balls.

    The alpha net is a ``(d+1)^2`` tensor grid; the beta net is a tensor of
    one point set per mode, each unisolvent for the shifted total-degree
    block and avoiding the coordinate axes (where boxes are empty).
    """
    nodes = _even_chebyshev(d + 1)
    s_a = alpha_radius / (np.sqrt(2) * np.abs(nodes).max())
    alpha = np.array(list(itertools.product(nodes * s_a, repeat=2)))
    mode = np.array([(nodes[p - 1], nodes[q - 1]) for p, q in vanilla_mode_block(d)])
    s_b = beta_radius / (2 * np.abs(nodes).max())
    beta = np.array([(*u, *v) for u in mode for v in mode]) * s_b
    return alpha, beta


@dataclass
class VanillaPlan:
    """Settings of the vanilla protocol (one shot count for every setting)."""

    d: int
    groups: tuple
    alpha_net: np.ndarray
    beta_net: np.ndarray
    t: float
    shots: int
    delta: float
    eps_stat: float
    p: int
    seed: int = 0
    value_range: float = 0.0
    amplification: float = 0.0

    def __post_init__(self):
        if self.t <= 0:
            raise ValueError("evolution time must be positive")
        need = len(vanilla_exponents(self.d))
        if len(self.alpha_net) * len(self.beta_net) < need:
            raise ValueError(f"nets give {len(self.alpha_net) * len(self.beta_net)} points, need {need}")

    @property
    def n_settings(self) -> int:
        return len(self.groups) * len(self.alpha_net)

    def total_evolution_time(self) -> float:
        return self.shots * self.n_settings * self.t


def vanilla_value_range(alpha_net, beta_net, t: float) -> float:
    """Largest summand range ``max e^{|alpha - b|^2} / t`` over the nets."""
    net = BoxNet(beta_net)
    return max(np.exp(weight_range(net, (a[0], a[1]))) for a in alpha_net) / t


def build_vanilla_plan(
    spec_graph,
    d: int,
    eps: float,
    delta: float,
    t: float = 0.02,
    stat_fraction: float = 0.5,
    p: int | None = None,
    seed: int = 0,
    alpha_radius: float = 1.0,
    beta_radius: float = 1.0,
    shots: int | None = None,
) -> VanillaPlan:
    """Nets, strong edge partition and Hoeffding budget for a target ``eps``.

    ``stat_fraction * eps`` is the statistical share of the error; it is
    divided by the reconstruction's amplification (max l1 row norm of the
    linear map table -> lam) to give ``eps_stat``.
    """
    alpha, beta = vanilla_nets(d, alpha_radius, beta_radius)
    groups = tuple(tuple(g) for g in partition_edges(spec_graph, mode="strong"))
    W = vanilla_linear_map(d, alpha, beta)
    amp = float(np.abs(W).sum(axis=1).max())
    eps_stat = stat_fraction * eps / amp
    R = vanilla_value_range(alpha, beta, t)
    if shots is None:
        shots = sample_budget(eps_stat, delta, (len(spec_graph.edges), len(alpha), len(beta)), R)
    return VanillaPlan(d, groups, alpha, beta, t, shots, delta, eps_stat, 2 * d + 2 if p is None else p, seed, R, amp)


# -- vanilla estimation -------------------------------------------------------------


def _vanilla_plan_for(plan: VanillaPlan, a: int, gi: int, shots: int | None = None) -> MeasurementPlan:
    al = plan.alpha_net[a]
    return MeasurementPlan(
        edges=plan.groups[gi],
        alpha=(complex(al[0]), complex(al[1])),
        t=plan.t,
        shots=plan.shots if shots is None else shots,
        seed=plan.seed,
        plan_id=a * len(plan.groups) + gi,
        partition_index=gi,
    )


def vanilla_estimates(plan: VanillaPlan, sim: Simulator) -> EstimateTable:
    """Run every vanilla setting and form ``Q-hat`` on the beta net.

    ``Q-hat = (1/(T t)) sum_i s 1_box(b_i) e^{|alpha - b_i|^2} - s vol/(pi^2 t)``
    per box; summands are checked against the precomputed range.
    """
    net = BoxNet(plan.beta_net)
    svol = net.signed_volumes()
    edges = [e for g in plan.groups for e in g]
    values = {e: np.zeros((1, len(plan.alpha_net), len(net))) for e in edges}
    for a, al in enumerate(plan.alpha_net):
        wmax = np.exp(weight_range(net, (al[0], al[1])))
        for gi in range(len(plan.groups)):
            mp = _vanilla_plan_for(plan, a, gi)
            hist = {e: np.zeros(net.cell_shape) for e in mp.edges}
            for start in range(0, plan.shots, CHUNK):
                ids = np.arange(start, min(start + CHUNK, plan.shots))
                batch = run_shots(mp, sim, ids)
                for e in mp.edges:
                    b = batch.for_edge(e)
                    w = np.exp((b[:, 0] - al[0]) ** 2 + b[:, 1] ** 2 + (b[:, 2] - al[1]) ** 2 + b[:, 3] ** 2)
                    inside = net.inside_any(b)
                    if inside.any() and w[inside].max() > wmax * (1 + 1e-12):
                        raise AssertionError("estimator summand exceeds its Hoeffding range")
                    hist[e] += net.histogram(b, w)
            for e in mp.edges:
                values[e][0, a] = net.box_sums(hist[e]) / (plan.shots * plan.t) - svol / (np.pi**2 * plan.t)
    return EstimateTable("vanilla", values, np.array([plan.t]), plan.alpha_net, plan.beta_net, plan.shots)


def _vanilla_cells(plan_or_nets, al, rho_e, cutoff):
    net = BoxNet(plan_or_nets)
    shift = (complex(al[0]), complex(al[1]))
    c1 = operator_cell_integrals(net, rho_e, cutoff, 1.0, shift)
    c2 = operator_cell_integrals(net, rho_e, cutoff, 2.0, (2 * shift[0], 2 * shift[1]))
    pref = np.exp(al[0] ** 2 + al[1] ** 2)
    return net, c1.real * pref / np.pi**2, c2.real * pref**2 / np.pi**2


def vanilla_expectation(plan: VanillaPlan, sim: Simulator, with_variance: bool = False):
    """Exact ``E[Q-hat]`` from the evolved reduced states (cell quadrature).

    With ``with_variance`` also returns, per edge and alpha point, the
    per-shot cell moments ``(E[w 1_cell], E[w^2 1_cell])`` used by
    :func:`vanilla_error_std`.
    """
    net = BoxNet(plan.beta_net)
    svol = net.signed_volumes()
    values, moments = {}, {}
    for gi, g in enumerate(plan.groups):
        for e in g:
            values[e] = np.zeros((1, len(plan.alpha_net), len(net)))
            moments[e] = []
        for a, al in enumerate(plan.alpha_net):
            states = sim.reduced_states(_vanilla_plan_for(plan, a, gi))
            for e in g:
                _, m1, m2 = _vanilla_cells(plan.beta_net, al, states[e], sim.cutoff)
                values[e][0, a] = (net.box_sums(m1) - svol / np.pi**2) / plan.t
                moments[e].append((m1, m2))
    table = EstimateTable("vanilla", values, np.array([plan.t]), plan.alpha_net, plan.beta_net, np.inf)
    return (table, moments) if with_variance else table


def vanilla_error_std(plan: VanillaPlan, moments, shots: int | None = None) -> dict:
    """Exact standard deviation of each reconstructed coefficient per edge.

    Returns ``{edge: (std_re, std_im)}`` arrays shaped like ``lam``.
    """
    shots = plan.shots if shots is None else shots
    net = BoxNet(plan.beta_net)
    W = vanilla_linear_map(plan.d, plan.alpha_net, plan.beta_net)
    nb = len(net)
    idxs = coefficient_indices(plan.d)
    out = {}
    for e, mom in moments.items():
        var = np.zeros((len(idxs), 2))
        for a, (m1, m2) in enumerate(mom):
            rows = W[:, a * nb : (a + 1) * nb] / plan.t
            for c in range(len(idxs)):
                for part, w in enumerate((rows[c].real, rows[c].imag)):
                    h = net.functional_cells(w)
                    var[c, part] += (np.sum(h**2 * m2) - np.sum(h * m1) ** 2) / shots
        std = np.zeros((2,) + (plan.d + 1,) * 4)
        for c, idx in enumerate(idxs):
            std[(0, *idx)], std[(1, *idx)] = np.sqrt(np.maximum(var[c], 0))
        out[e] = std
    return out


# -- vanilla reconstruction ---------------------------------------------------------


def _vanilla_points(alpha_net, beta_net):
    return np.array([(*a, *b) for a in alpha_net for b in beta_net])


def vanilla_q_polynomial(values, d: int, alpha_net, beta_net) -> Poly:
    """Interpolate a table ``(n_alpha, n_beta)`` in the vanilla basis."""
    pts = _vanilla_points(alpha_net, beta_net)
    return lagrange_multivariate(pts, np.asarray(values).reshape(-1), 6, exponents=vanilla_exponents(d)).poly


def g_from_q(q: Poly) -> Poly:
    """``pi^2 d^4 Q / (dx_i dy_i dx_j dy_j)`` (equals ``i g_e`` for exact ``Q``)."""
    out = q
    for var in (2, 3, 4, 5):
        out = out.diff(var)
    return out * np.pi**2


def q_from_g(g: Poly) -> Poly:
    """Signed-box integral ``(1/pi^2) int_0^{beta} i g_e`` as a polynomial."""
    out = g * (1j / np.pi**2)
    for var in (2, 3, 4, 5):
        out = out.integrate(var)
    return out


def exact_q_table(coeffs: EdgeCoefficients, alpha_net, beta_net) -> np.ndarray:
    """``Q`` at the net points from the analytic box integral of ``i g_e``."""
    q = q_from_g(g_polynomial(coeffs))
    vals = q(_vanilla_points(alpha_net, beta_net))
    return vals.real.reshape(len(alpha_net), len(beta_net))


def _vanilla_reconstruct_values(values, d, alpha_net, beta_net) -> EdgeCoefficients:
    q = vanilla_q_polynomial(values, d, alpha_net, beta_net)
    return coefficients_from_g(g_from_q(q), d, scale=1j)


_LINEAR_MAPS: dict = {}


def vanilla_linear_map(d: int, alpha_net, beta_net) -> np.ndarray:
    """Complex matrix ``W`` with ``lam[idx_c] = W[c] @ table.ravel()`` for
    ``idx_c`` in ``coefficient_indices(d)`` (the map is real-linear)."""
    key = ("vanilla", d, np.asarray(alpha_net).tobytes(), np.asarray(beta_net).tobytes())
    if key not in _LINEAR_MAPS:
        n = len(alpha_net) * len(beta_net)
        idxs = coefficient_indices(d)
        W = np.zeros((len(idxs), n), dtype=complex)
        for k in range(n):
            unit = np.zeros(n)
            unit[k] = 1.0
            lam = _vanilla_reconstruct_values(unit.reshape(len(alpha_net), -1), d, alpha_net, beta_net).lam
            W[:, k] = [lam[i] for i in idxs]
        _LINEAR_MAPS[key] = W
    return _LINEAR_MAPS[key]


def vanilla_reconstruct(table: EstimateTable, d: int) -> CoefficientEstimate:
    """Lagrange-interpolate each edge's ``Q-hat`` and differentiate to ``lam``."""
    lam = {}
    for e, arr in table.values.items():
        lam[e] = _vanilla_reconstruct_values(arr[0], d, table.alpha_net, table.beta_net)
    return CoefficientEstimate(lam, "vanilla", {"shots": table.shots, "t": float(table.times[0])})


# -- refined protocol -----------------------------------------------------------------


@dataclass
class RefinedPlan:
    """Settings of the refined protocol.

    Times are ``t = time_scale * s`` for ``s`` in ``time_nodes`` (inside the
    window ``[b1, b2]`` of a degree-``time_degree`` fit).  Input amplitudes
    form a tensor grid of ``alpha_nodes`` (real, per mode); boxes have
    corners on the tensor grid of ``beta_nodes`` (per real coordinate).
    ``level`` is the Fock projection of the inputs.
    """

    d: int
    level: int
    groups: tuple
    radius: int
    time_scale: float
    time_degree: int
    time_nodes: np.ndarray
    alpha_nodes: np.ndarray
    beta_nodes: np.ndarray
    alpha_degree: int
    beta_degree: int
    shots: int
    delta: float
    eps_stat: float
    p: int
    seed: int = 0
    value_range: float = 0.0
    amplification: float = 0.0

    def __post_init__(self):
        if self.level < self.d:
            raise ValueError("projection level must be at least d")
        b1, b2 = time_window(self.time_degree)
        if np.any(self.time_nodes < b1 - 1e-12) or np.any(self.time_nodes > b2 + 1e-12):
            raise ValueError("time nodes must lie in the fit window")
        if len(self.time_nodes) <= self.time_degree:
            raise ValueError("need more time nodes than the fit degree")
        if len(self.alpha_nodes) <= self.alpha_degree or len(self.beta_nodes) <= self.beta_degree:
            raise ValueError("need more nodes than the fit degree per axis")
        if np.any(self.beta_nodes == 0):
            raise ValueError("box corners must avoid the coordinate planes")

    @property
    def times(self) -> np.ndarray:
        return self.time_scale * np.asarray(self.time_nodes)

    @property
    def alpha_net(self) -> np.ndarray:
        return np.array(list(itertools.product(self.alpha_nodes, repeat=2)))

    @property
    def beta_net(self) -> np.ndarray:
        return np.array(list(itertools.product(self.beta_nodes, repeat=4)))

    @property
    def alpha_half(self) -> float:
        return float(np.abs(self.alpha_nodes).max() / np.cos(np.pi / (2 * len(self.alpha_nodes))))

    @property
    def beta_half(self) -> float:
        return float(np.abs(self.beta_nodes).max() / np.cos(np.pi / (2 * len(self.beta_nodes))))

    @property
    def n_settings(self) -> int:
        return len(self.groups) * len(self.alpha_net) * len(self.time_nodes)

    def total_evolution_time(self) -> float:
        return self.shots * len(self.groups) * len(self.alpha_net) * float(np.sum(self.times))


def refined_time_weights(plan: RefinedPlan) -> np.ndarray:
    """Weights ``w`` with ``w @ f(plan.times)`` estimating ``f'(0)`` in real time."""
    w = derivative_weights(plan.time_nodes, plan.time_degree, 1, 0.0, time_window(plan.time_degree))[1]
    return w / plan.time_scale


def build_refined_plan(
    spec_graph,
    d: int,
    eps: float,
    delta: float,
    radius: int = 1,
    level: int | None = None,
    time_scale: float = 0.005,
    time_degree: int = 3,
    n_time: int | None = None,
    alpha_half: float = 0.5,
    beta_half: float = 0.5,
    n_alpha: int | None = None,
    n_beta: int | None = None,
    stat_fraction: float = 0.5,
    p: int | None = None,
    seed: int = 0,
    shots: int | None = None,
) -> RefinedPlan:
    """Default refined design for degree ``d``.

    The derivative of the box estimator at ``t = 0`` is a polynomial of
    degree ``2 M`` per amplitude and ``2 M + d + 1`` per box coordinate
    (``M = level``), so those are the fit degrees; node counts default to
    one more than the degree, rounded up to even on the box coordinates.
    """
    M = d if level is None else level
    a_deg, b_deg = 2 * M, 2 * M + d + 1
    n_alpha = a_deg + 1 if n_alpha is None else n_alpha
    n_beta = b_deg + 1 + ((b_deg + 1) % 2) if n_beta is None else n_beta
    n_time = 2 * time_degree + 2 if n_time is None else n_time
    groups = tuple(tuple(g) for g in partition_edges(spec_graph, mode="rectangle-disjoint", radius=radius))
    b1, b2 = time_window(time_degree)
    plan = RefinedPlan(
        d=d,
        level=M,
        groups=groups,
        radius=radius,
        time_scale=time_scale,
        time_degree=time_degree,
        time_nodes=chebyshev_arc_nodes(n_time, (b1, b2)),
        alpha_nodes=chebyshev_arc_nodes(n_alpha, (-alpha_half, alpha_half)),
        beta_nodes=chebyshev_arc_nodes(n_beta, (-beta_half, beta_half)),
        alpha_degree=a_deg,
        beta_degree=b_deg,
        shots=1,
        delta=delta,
        eps_stat=1.0,
        p=2 * d + 2 if p is None else p,
        seed=seed,
    )
    net = BoxNet(plan.beta_net)
    cmax = max(projection_correction(a, M) for a in plan.alpha_net)
    plan.value_range = float(cmax * np.exp(weight_range(net)))
    V = refined_linear_map(plan)
    plan.amplification = float(np.abs(refined_time_weights(plan)).sum() * np.abs(V).sum(axis=1).max())
    plan.eps_stat = stat_fraction * eps / plan.amplification
    sizes = (len(spec_graph.edges), n_time, len(plan.alpha_net), len(net))
    plan.shots = sample_budget(plan.eps_stat, delta, sizes, plan.value_range) if shots is None else shots
    return plan


def _refined_plan_for(plan: RefinedPlan, a: int, gi: int, t: float) -> MeasurementPlan:
    al = plan.alpha_net[a]
    return MeasurementPlan(
        edges=plan.groups[gi],
        alpha=(complex(al[0]), complex(al[1])),
        t=float(t),
        shots=plan.shots,
        seed=plan.seed,
        plan_id=(a * len(plan.groups) + gi) * len(plan.time_nodes) + int(np.flatnonzero(plan.times == t)[0]),
        partition_index=gi,
        projected=True,
        level=plan.level,
    )


def refined_estimates(plan: RefinedPlan, sim: Simulator) -> EstimateTable:
    """Run every refined setting and form
    ``L-hat = C_alpha / T sum_i s e^{|b_i|^2} 1_box(b_i)`` on the box net."""
    net = BoxNet(plan.beta_net)
    wmax = np.exp(weight_range(net))
    times = plan.times
    edges = [e for g in plan.groups for e in g]
    values = {e: np.zeros((len(times), len(plan.alpha_net), len(net))) for e in edges}
    for a, al in enumerate(plan.alpha_net):
        C = projection_correction(al, plan.level)
        for gi in range(len(plan.groups)):
            sim.reduced_states_times(_refined_plan_for(plan, a, gi, times[0]), times)
            for k, t in enumerate(times):
                mp = _refined_plan_for(plan, a, gi, t)
                hist = {e: np.zeros(net.cell_shape) for e in mp.edges}
                for start in range(0, plan.shots, CHUNK):
                    ids = np.arange(start, min(start + CHUNK, plan.shots))
                    batch = run_shots(mp, sim, ids)
                    for e in mp.edges:
                        b = batch.for_edge(e)
                        w = np.exp(np.sum(b**2, axis=1))
                        inside = net.inside_any(b)
                        if inside.any() and w[inside].max() > wmax * (1 + 1e-12):
                            raise AssertionError("estimator summand exceeds its Hoeffding range")
                        hist[e] += net.histogram(b, w)
                for e in mp.edges:
                    values[e][k, a] = C * net.box_sums(hist[e]) / plan.shots
    return EstimateTable("refined", values, times, plan.alpha_net, plan.beta_net, plan.shots)


def refined_expectation(plan: RefinedPlan, sim: Simulator, with_variance: bool = False):
    """Exact ``E[L-hat]`` from the evolved reduced states (cell quadrature)."""
    net = BoxNet(plan.beta_net)
    times = plan.times
    values, moments = {}, {}
    for gi, g in enumerate(plan.groups):
        for e in g:
            values[e] = np.zeros((len(times), len(plan.alpha_net), len(net)))
            moments[e] = {}
        for a, al in enumerate(plan.alpha_net):
            C = projection_correction(al, plan.level)
            states = sim.reduced_states_times(_refined_plan_for(plan, a, gi, times[0]), times)
            for k, st in enumerate(states):
                for e in g:
                    m1 = C * operator_cell_integrals(net, st[e], sim.cutoff, 1.0).real / np.pi**2
                    values[e][k, a] = net.box_sums(m1)
                    if with_variance:
                        m2 = C**2 * operator_cell_integrals(net, st[e], sim.cutoff, 2.0).real / np.pi**2
                        moments[e][(k, a)] = (m1, m2)
    table = EstimateTable("refined", values, times, plan.alpha_net, plan.beta_net, np.inf)
    return (table, moments) if with_variance else table


def dissipator_offset_operator(alpha_e, level: int, p: int) -> np.ndarray:
    """``sum_i D_i(|A><A|)`` for the unnormalized projected input
    ``|A> = sum_{u <= level} alpha^u / sqrt(u!) |u>`` on two modes.

    Per mode, for real ``alpha``, ``D(X) = a^p X a^dag^p - {a^dag^p a^p, X}/2
    + (alpha^p / 2) [a^dag^p - a^p, X]``.  The space has cutoff
    ``level + p`` so the result is exact.
    """
    cut = level + p
    t1 = TruncationSpec(cut)
    a = annihilation_op(t1)
    ap = np.linalg.matrix_power(a, p)
    adp = ap.conj().T
    u = np.arange(cut + 1)
    vecs = []
    for al in alpha_e:
        al = float(np.real(al))
        v = np.array([al**k / np.sqrt(factorial(k)) if k <= level else 0.0 for k in u])
        vecs.append(v)
    eye = np.eye(cut + 1)
    out = np.zeros(((cut + 1) ** 2,) * 2, dtype=complex)
    for i in range(2):
        X = np.outer(vecs[i], vecs[i])
        al = float(np.real(alpha_e[i]))
        DX = ap @ X @ adp - 0.5 * (adp @ ap @ X + X @ adp @ ap) + 0.5 * al**p * ((adp - ap) @ X - X @ (adp - ap))
        other = np.outer(vecs[1 - i], vecs[1 - i])
        out += np.kron(DX, other) if i == 0 else np.kron(other, DX)
    return out


def refined_offset(plan: RefinedPlan) -> np.ndarray:
    """Known dissipator contribution to ``d/dt E[L-hat]`` at ``t = 0``,
    shape ``(n_alpha, n_beta)``."""
    net = BoxNet(plan.beta_net)
    out = np.zeros((len(plan.alpha_net), len(net)))
    for a, al in enumerate(plan.alpha_net):
        X = dissipator_offset_operator(al, plan.level, plan.p)
        cells = operator_cell_integrals(net, X, plan.level + plan.p, 1.0)
        out[a] = net.box_sums(cells).real / np.pi**2
    return out


def _holomorphic_coefficients(F: np.ndarray, d: int) -> np.ndarray:
    """``c[a_i, a_j, m_i, m_j]``: coefficient of ``beta_i^m_i beta_j^m_j`` in
    the integrand, from its real Taylor coefficients
    ``F[a_i, a_j, p, q, p', q']`` in ``(x_i, y_i, x_j, y_j)``."""
    na = F.shape[0]
    c = np.zeros((na, na, d + 1, d + 1), dtype=complex)
    for p, q, pp, qq in itertools.product(range(d + 1), repeat=4):
        if p + q > d or pp + qq > d:
            continue
        w = 2.0**-p * (2j) ** -q * 2.0**-pp * (2j) ** -qq
        c[:, :, p + q, pp + qq] += w * F[:, :, p, q, pp, qq]
    return c


def matrix_elements_from_derivatives(D: np.ndarray, d: int) -> np.ndarray:
    """Table ``T[u, up, v, vp] = <u up|H_e|v vp>`` from the derivative table
    ``D[a_i, a_j, k_1..k_4]`` of the offset-corrected time derivative.

    The integrand is ``S = <B|-i[H, |A><A|]|B>`` with
    ``|B> = sum beta^v / sqrt(v!) |v>``; its purely holomorphic part in
    ``beta`` carries ``<a|H|m>`` (plus a known overlap term), giving
    ``<a|H|m> = sqrt(a! m!) (-i) [c(a, m) + [m <= a] c(0, a - m) / m!]``.
    """
    na = D.shape[0]
    F = np.zeros((na, na) + (d + 1,) * 4)
    for a1, a2, p, q, pp, qq in itertools.product(range(na), range(na), *(range(d + 1),) * 4):
        den = factorial(a1) * factorial(a2) * factorial(p) * factorial(q) * factorial(pp) * factorial(qq)
        F[a1, a2, p, q, pp, qq] = np.pi**2 * D[a1, a2, p + 1, q + 1, pp + 1, qq + 1].real / den
    c = _holomorphic_coefficients(F, d)
    T = np.zeros((d + 1,) * 4, dtype=complex)
    for ai, aj, mi, mj in itertools.product(range(d + 1), repeat=4):
        val = c[ai, aj, mi, mj]
        if mi <= ai and mj <= aj:
            val = val + c[0, 0, ai - mi, aj - mj] / (factorial(mi) * factorial(mj))
        norm = np.sqrt(float(factorial(ai) * factorial(aj) * factorial(mi) * factorial(mj)))
        T[ai, aj, mi, mj] = -1j * norm * val
    T[0, 0, 0, 0] = 0.0
    return T


def _refined_axes(plan: RefinedPlan):
    d = plan.d
    Ms = [plan.alpha_degree] * 2 + [plan.beta_degree] * 4
    ks = [d] * 2 + [d + 1] * 4
    hs = [plan.alpha_half] * 2 + [plan.beta_half] * 4
    return Ms, ks, hs


def refined_derivatives(plan: RefinedPlan, values: np.ndarray, offset: np.ndarray | None = None) -> np.ndarray:
    """Time derivative at zero, offset removal and (alpha, beta) derivatives."""
    D0 = np.tensordot(refined_time_weights(plan), values, axes=([0], [0]))
    if offset is not None:
        D0 = D0 - offset
    na, nb = len(plan.alpha_nodes), len(plan.beta_nodes)
    Ms, ks, hs = _refined_axes(plan)
    return derivatives_from_grid(D0.reshape((na, na) + (nb,) * 4), Ms, ks, 6, hs)


class OffsetMismatch(RuntimeError):
    """The dissipator offset does not cancel at zero Hamiltonian."""


def check_offset(plan: RefinedPlan, graph, cutoff: int, tol: float) -> float:
    """Reconstruct from exact tables of the zero Hamiltonian (dissipation
    on) and raise :class:`OffsetMismatch` if any coefficient exceeds ``tol``."""
    zero = HamiltonianSpec(graph, {e: EdgeCoefficients.zeros(plan.d) for e in graph.edges}, plan.d, 0.0)
    est = refined_reconstruct(refined_expectation(plan, Simulator(zero, plan.p, cutoff)), plan)
    resid = max(float(np.abs(c.lam).max()) for c in est.lam.values())
    if resid > tol:
        raise OffsetMismatch(f"zero-Hamiltonian residual {resid:.3e} exceeds {tol:.3e}")
    return resid


def refined_reconstruct(table: EstimateTable, plan: RefinedPlan) -> CoefficientEstimate:
    """Derivatives -> matrix elements of ``H_e`` -> ``lam`` for every edge."""
    offset = refined_offset(plan)
    lam, tables = {}, {}
    for e, arr in table.values.items():
        D = refined_derivatives(plan, arr, offset)
        T = matrix_elements_from_derivatives(D, plan.d)
        tables[e] = T
        lam[e] = lambda_from_matrix_elements(T, plan.d)
    meta = {"shots": table.shots, "time_scale": plan.time_scale, "radius": plan.radius}
    return CoefficientEstimate(lam, "refined", meta | {"matrix_elements": tables})


def refined_linear_map(plan: RefinedPlan) -> np.ndarray:
    """Complex matrix ``V`` mapping the offset-corrected time-derivative
    table ``(n_alpha, n_beta)`` (flattened) to ``lam[coefficient_indices]``."""
    key = ("refined", plan.d, plan.alpha_nodes.tobytes(), plan.beta_nodes.tobytes(), plan.alpha_degree, plan.beta_degree)
    if key in _LINEAR_MAPS:
        return _LINEAR_MAPS[key]
    d = plan.d
    idxs = coefficient_indices(d)
    shape = (d + 1, d + 1) + (d + 2,) * 4
    G = np.zeros((len(idxs), int(np.prod(shape))), dtype=complex)
    for j in range(G.shape[1]):
        D = np.zeros(shape)
        D.flat[j] = 1.0
        lam = lambda_from_matrix_elements(matrix_elements_from_derivatives(D, d), d).lam
        G[:, j] = [lam[i] for i in idxs]
    Ms, ks, hs = _refined_axes(plan)
    nodes = [plan.alpha_nodes] * 2 + [plan.beta_nodes] * 4
    Ws = [
        derivative_weights(chebyshev_arc_nodes(len(x), (-h, h)), M, k, 0.0, (-h, h))
        for x, M, k, h in zip(nodes, Ms, ks, hs)
    ]
    V = np.einsum("cabpqrs,ai,bj,pk,ql,rm,sn->cijklmn", G.reshape((-1,) + shape), *Ws, optimize=True)
    _LINEAR_MAPS[key] = V.reshape(len(idxs), -1)
    return _LINEAR_MAPS[key]


def refined_error_std(plan: RefinedPlan, moments, shots: int | None = None) -> dict:
    """Exact standard deviation of each reconstructed coefficient per edge."""
    shots = plan.shots if shots is None else shots
    net = BoxNet(plan.beta_net)
    V = refined_linear_map(plan)
    wt = refined_time_weights(plan)
    nb = len(net)
    idxs = coefficient_indices(plan.d)
    out = {}
    for e, mom in moments.items():
        var = np.zeros((len(idxs), 2))
        for (k, a), (m1, m2) in mom.items():
            rows = wt[k] * V[:, a * nb : (a + 1) * nb]
            for c in range(len(idxs)):
                for part, w in enumerate((rows[c].real, rows[c].imag)):
                    h = net.functional_cells(w)
                    var[c, part] += (np.sum(h**2 * m2) - np.sum(h * m1) ** 2) / shots
        std = np.zeros((2,) + (plan.d + 1,) * 4)
        for c, idx in enumerate(idxs):
            std[(0, *idx)], std[(1, *idx)] = np.sqrt(np.maximum(var[c], 0))
        out[e] = std
    return out


# -- end to end -----------------------------------------------------------------------


@dataclass
class LearnReport:
    """Outcome of :func:`end_to_end`; serializes to JSON and a CSV row."""

    protocol: str
    eps: float
    delta: float
    seed: int
    budget_shots: int
    shots: int
    n_settings: int
    total_shots: int
    total_evolution_time: float
    amplification: float
    value_range: float
    estimate: CoefficientEstimate
    max_error: float | None
    runtime_s: float
    plan: dict

    @property
    def success(self) -> bool | None:
        return None if self.max_error is None else bool(self.max_error <= self.eps)

    def coefficient_rows(self, truth: HamiltonianSpec | None = None):
        rows = []
        for e, est in self.estimate.lam.items():
            for idx in coefficient_indices(est.d):
                v = complex(est.lam[idx])
                row = {"edge": list(e), "index": list(idx), "estimate": [v.real, v.imag]}
                if truth is not None:
                    tv = complex(truth.coeffs[e].lam[idx])
                    row["truth"] = [tv.real, tv.imag]
                    row["error"] = abs(v - tv)
                rows.append(row)
        return rows

    def to_dict(self, truth: HamiltonianSpec | None = None) -> dict:
        return {
            "protocol": self.protocol,
            "eps": self.eps,
            "delta": self.delta,
            "seed": self.seed,
            "budget_shots": self.budget_shots,
            "shots": self.shots,
            "budget_capped": self.shots < self.budget_shots,
            "n_settings": self.n_settings,
            "total_shots": self.total_shots,
            "total_evolution_time": self.total_evolution_time,
            "amplification": self.amplification,
            "value_range": self.value_range,
            "max_error": self.max_error,
            "success": self.success,
            "runtime_s": self.runtime_s,
            "plan": self.plan,
            "coefficients": self.coefficient_rows(truth),
        }

    def to_json(self, path, truth: HamiltonianSpec | None = None):
        with open(path, "w") as fh:
            json.dump(self.to_dict(truth), fh, indent=2, default=_json_default)

    CSV_FIELDS = (
        "protocol", "eps", "delta", "seed", "budget_shots", "shots", "n_settings",
        "total_shots", "total_evolution_time", "max_error", "success", "runtime_s",
    )

    def csv_row(self) -> dict:
        d = self.to_dict()
        return {k: d[k] for k in self.CSV_FIELDS}


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _plan_summary(plan) -> dict:
    out = {}
    for k, v in vars(plan).items():
        if isinstance(v, np.ndarray):
            out[k] = v.tolist()
        elif k == "groups":
            out[k] = [[list(e) for e in g] for g in v]
        else:
            out[k] = v
    return out


def end_to_end(
    protocol: str,
    spec: HamiltonianSpec,
    eps: float,
    delta: float,
    seed: int = 0,
    sim_cutoff: int | None = None,
    shots: int | None = None,
    max_total_shots: float = 1e9,
    truth: HamiltonianSpec | None = None,
    noiseless: bool = False,
    **plan_kw,
) -> LearnReport:
    """Plan, measure and reconstruct with one protocol.

    ``spec`` drives the simulator only; the learner sees its graph and
    degree.  The Hoeffding budget is used unless ``shots`` overrides it; a
    budget above ``max_total_shots`` raises a ``budget`` stage error.
    ``noiseless`` replaces sampled tables with exact expectations.
    ``truth`` (usually ``spec``) adds per-coefficient errors to the report.
    """
    t0 = time.perf_counter()
    d = spec.d
    stage = "plan"
    try:
        if protocol == "vanilla":
            plan = build_vanilla_plan(spec.graph, d, eps, delta, seed=seed, **plan_kw)
            settings = plan.n_settings
        elif protocol == "refined":
            plan = build_refined_plan(spec.graph, d, eps, delta, seed=seed, **plan_kw)
            settings = plan.n_settings
        else:
            raise ValueError(f"unknown protocol {protocol!r}")
        budget = plan.shots
        if shots is not None:
            plan.shots = int(shots)
        elif not noiseless and budget * settings > max_total_shots:
            raise RuntimeError(
                f"Hoeffding budget of {budget:.3g} shots per setting ({budget * settings:.3g} total) "
                f"exceeds max_total_shots={max_total_shots:.3g}"
            )
        if sim_cutoff is None:
            sim_cutoff = plan.level + plan.p if protocol == "refined" else 2 * d + 8
        sim = Simulator(spec, plan.p, sim_cutoff)
        stage = "measure"
        if protocol == "vanilla":
            table = vanilla_expectation(plan, sim) if noiseless else vanilla_estimates(plan, sim)
            stage = "reconstruct"
            est = vanilla_reconstruct(table, d)
        else:
            table = refined_expectation(plan, sim) if noiseless else refined_estimates(plan, sim)
            stage = "reconstruct"
            est = refined_reconstruct(table, plan)
    except Exception as exc:  # tag and re-raise
        raise StageError(stage, exc) from exc
    err = est.compare(truth) if truth is not None else None
    used = 0 if noiseless else plan.shots
    # vanilla: T * settings * t; refined: T * sum over settings of their times
    if protocol == "vanilla":
        evo = used * settings * plan.t
    else:
        evo = used * len(plan.groups) * len(plan.alpha_net) * float(np.sum(plan.times))
    return LearnReport(
        protocol=protocol,
        eps=eps,
        delta=delta,
        seed=seed,
        budget_shots=budget,
        shots=used,
        n_settings=settings,
        total_shots=used * settings,
        total_evolution_time=evo,
        amplification=plan.amplification,
        value_range=plan.value_range,
        estimate=est,
        max_error=err,
        runtime_s=time.perf_counter() - t0,
        plan=_plan_summary(plan),
    )
