"""Numerical checks of the analytic claims behind the learners.

Every check returns a :class:`SweepResult` holding the swept parameter, the
measured quantity, a reference bound (NaN where none applies) and a pass
flag.  Raw trajectories go into ``SweepResult.trace`` so they can be written
out and plotted.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import solve_ivp
from scipy.sparse.linalg import expm_multiply
from scipy.stats import poisson

from .dynamics import (
    SUPEROP_THRESHOLD,
    IntegrationError,
    build_liouvillian,
    evolve,
    hamiltonian_norm_bound,
    jump_norm_bound,
    trotter_evolve,
)
from .fock import TruncationSpec, annihilation_op, coherent_norm_sq, coherent_state, number_moment, partial_trace
from .lattice import (
    DissipatorSpec,
    EdgeCoefficients,
    HamiltonianSpec,
    build_edge_hamiltonian,
    coefficient_indices,
    partner,
    single_term_hamiltonian,
)
from .measurement import rectangle

# dimension of a pure state above which the LR check refuses to run
PURE_DIM_LIMIT = 2_000_000
TROTTER_SLOPE = (-1.1, -0.45)


@dataclass
class SweepResult:
    """Outcome of one verification sweep.

    Attributes
    ----------
    name : str
    parameter : str
        Name of the swept quantity.
    values : list
        Swept parameter values.
    measured : ndarray
    bound : ndarray
        Reference bound per value; NaN where no bound applies.
    passed : bool
    labels : list of str
        Optional row labels (e.g. which operator a row refers to).
    details : dict
        Scalar diagnostics (fitted rates, convergence flags, ...).
    trace : list of dict
        Raw sweep rows for plotting.
    """

    name: str
    parameter: str
    values: list
    measured: np.ndarray
    bound: np.ndarray
    passed: bool
    labels: list = field(default_factory=list)
    details: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def __post_init__(self):
        self.measured = np.asarray(self.measured, dtype=float)
        self.bound = np.asarray(self.bound, dtype=float)
        if not (len(self.values) == len(self.measured) == len(self.bound)):
            raise ValueError("values, measured and bound must have equal length")
        if self.labels and len(self.labels) != len(self.values):
            raise ValueError("labels must match values")

    def within_bound(self) -> np.ndarray:
        """Per-row flag; rows without a bound count as satisfied."""
        return np.where(np.isnan(self.bound), True, self.measured <= self.bound)

    def rows(self):
        ok = self.within_bound()
        for i, v in enumerate(self.values):
            yield {
                "label": self.labels[i] if self.labels else "",
                self.parameter: v,
                "measured": self.measured[i],
                "bound": self.bound[i],
                "within_bound": bool(ok[i]),
            }

    def to_csv(self, path) -> Path:
        """Write the sweep (and ``<stem>_trace.csv`` if present); returns the path."""
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["label", self.parameter, "measured", "bound", "within_bound"])
            w.writeheader()
            w.writerows(self.rows())
        if self.trace:
            keys = list(dict.fromkeys(k for r in self.trace for k in r))
            with path.with_name(path.stem + "_trace.csv").open("w", newline="") as fh:
                w = csv.DictWriter(fh, fieldnames=keys)
                w.writeheader()
                w.writerows(self.trace)
        return path

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "parameter": self.parameter,
            "passed": bool(self.passed),
            "rows": [{k: (v.item() if isinstance(v, np.generic) else v) for k, v in r.items()} for r in self.rows()],
            "details": {k: _plain(v) for k, v in self.details.items()},
        }


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


# -- fixtures ------------------------------------------------------------------------


def pumping_hamiltonian(graph, d: int, strength: float) -> HamiltonianSpec:
    """``strength * (a_u^{dag d} a_v^{dag d} + h.c.)`` on every edge."""
    return single_term_hamiltonian(graph, d, {(d, 0, d, 0): strength})


def uniform_magnitude_hamiltonian(graph, d: int, L: float, seed) -> HamiltonianSpec:
    """Every free coefficient has modulus exactly ``L`` (random phases)."""
    rng = np.random.default_rng(seed)
    coeffs = {}
    for e in graph.edges:
        lam = np.zeros((d + 1,) * 4, dtype=complex)
        for idx in coefficient_indices(d):
            if lam[idx] != 0:
                continue
            if partner(idx) == idx:
                lam[idx] = L * rng.choice([-1.0, 1.0])
            else:
                lam[idx] = L * np.exp(2j * np.pi * rng.random())
                lam[partner(idx)] = np.conj(lam[idx])
        coeffs[e] = EdgeCoefficients(lam).check()
    return HamiltonianSpec(graph, coeffs, d, L)


def _input_vector(graph, alphas: dict, cutoff: int, vertices=None, level=None):
    """Product coherent state, normalized at ``cutoff``; optionally restricted to
    ``vertices`` and projected onto levels ``<= level`` without renormalizing."""
    verts = graph.vertices if vertices is None else vertices
    psi = np.ones(1, dtype=complex)
    for v in verts:
        a = complex(alphas.get(v, 0.0))
        amp, _ = coherent_state(a, TruncationSpec(cutoff if level is None else level))
        amp = amp / np.sqrt(coherent_norm_sq(a, cutoff))
        psi = np.kron(psi, amp)
    return psi


def _evolve_any(psi0, L, times, method="auto"):
    """States at ``times`` (sorted); pure vectors when the generator has no jumps."""
    times = np.asarray(times, dtype=float)
    out, t_prev = [], 0.0
    if not L.jumps:
        if L.dim > PURE_DIM_LIMIT:
            raise ValueError(f"state dimension {L.dim} too large")
        psi = psi0
        for t in times:
            psi = expm_multiply(-1j * (t - t_prev) * L.H, psi) if t > t_prev else psi
            out.append(np.outer(psi, psi.conj()))
            t_prev = t
        return out
    if L.dim**2 > SUPEROP_THRESHOLD and method in ("auto", "stiff"):
        raise ValueError(f"density dimension {L.dim}**2 too large for a desk-scale check")
    rho = np.outer(psi0, psi0.conj())
    if method == "stiff":
        # one BDF run with dense output beats restarting it per interval
        S = L.superop().tocsc()
        sol = solve_ivp(
            lambda _, y: S @ y, (0.0, times[-1]), rho.reshape(-1), method="BDF", jac=S, t_eval=times, rtol=1e-9, atol=1e-12
        )
        if not sol.success:
            raise IntegrationError(sol.message)
        return [sol.y[:, j].reshape(L.dim, L.dim) for j in range(len(times))]
    for t in times:
        rho = evolve(rho, L, t - t_prev, method=method, check=False).rho if t > t_prev else rho
        out.append(rho)
        t_prev = t
    return out


def _trace_norm(X) -> float:
    return float(np.abs(np.linalg.eigvalsh(0.5 * (X + X.conj().T))).sum())


# -- moment stability -----------------------------------------------------------------


def moment_precondition(k: int, d: int) -> int:
    """Smallest admissible ``p`` for moment order ``k``: ``ceil(2kd/(k-d) + 2)``."""
    if k <= d:
        raise ValueError(f"moment order k={k} must exceed d={d}")
    return int(np.ceil(2 * k * d / (k - d) + 2))


def moment_trajectories(spec, dspec, k: int, times, regions, cutoff: int, alphas=None, method="stiff"):
    """``M_R^{(k)}(t)`` for each region, shape ``(len(regions), len(times))``."""
    alphas = dict(dspec.alpha) if (alphas is None and dspec is not None) else dict(alphas or {})
    tr = TruncationSpec(cutoff, spec.graph.n_modes)
    L = build_liouvillian(spec, dspec, tr)
    states = _evolve_any(_input_vector(spec.graph, alphas, cutoff), L, times, method=method)
    idx = [[spec.graph.index(v) for v in R] for R in regions]
    return np.array([[number_moment(rho, R, k, tr) for rho in states] for R in idx])


def check_moment_stability(
    spec: HamiltonianSpec,
    dspec: DissipatorSpec | None,
    k: int,
    times,
    regions,
    cutoff: int,
    alphas=None,
    rate_multiple: float = 1.0,
    conv_step: int = 2,
    conv_tol: float = 1e-3,
) -> SweepResult:
    """Fitted exponential growth rate of ``M_R^{(k)}`` per region.

    The rate is the least-squares slope of ``log M_R^{(k)}(t)`` over the time
    window; the bound is ``rate_multiple * k|R| ln(k|R|)``.  The run is
    repeated at ``cutoff + conv_step`` and fails if any moment moves by more
    than ``conv_tol`` (relative).  ``dspec=None`` switches dissipation off.
    """
    times = np.sort(np.asarray(times, dtype=float))
    if dspec is not None:
        p_min = moment_precondition(k, spec.d)
        if dspec.p < p_min:
            raise ValueError(f"p={dspec.p} below the moment precondition {p_min} for k={k}, d={spec.d}")
    regions = [tuple(R) for R in regions]
    m = moment_trajectories(spec, dspec, k, times, regions, cutoff, alphas)
    m2 = moment_trajectories(spec, dspec, k, times, regions, cutoff + conv_step, alphas)
    conv = float(np.max(np.abs(m2 - m) / np.abs(m2)))
    rates = np.array([np.polyfit(times, np.log(row), 1)[0] for row in m2])
    kr = np.array([k * len(R) for R in regions], dtype=float)
    bound = rate_multiple * kr * np.log(kr)
    converged = conv <= conv_tol
    ok = bool(converged and np.all(rates <= bound))
    trace = [
        {"region": "-".join(map(str, R)), "t": t, "moment": m2[i, j], "moment_low_cutoff": m[i, j]}
        for i, R in enumerate(regions)
        for j, t in enumerate(times)
    ]
    return SweepResult(
        "moments",
        "region",
        ["-".join(map(str, R)) for R in regions],
        rates,
        bound,
        ok,
        details={"k": k, "cutoff": cutoff, "convergence": conv, "converged": converged, "dissipation": dspec is not None},
        trace=trace,
    )


def paired_moment_check(spec, dspec, k, times, regions, cutoff, cutoff_free, alphas=None, **kw):
    """Run the moment check with and without dissipation on the same window.

    Returns ``(with_dissipation, without, passed)``, where ``passed`` needs the
    damped run to pass and its rate to be strictly below the undamped one for
    every region.
    """
    alphas = dict(dspec.alpha) if alphas is None else alphas
    damped = check_moment_stability(spec, dspec, k, times, regions, cutoff, alphas, **kw)
    free = check_moment_stability(spec, None, k, times, regions, cutoff_free, alphas, **kw)
    return damped, free, bool(damped.passed and np.all(damped.measured < free.measured))


# -- Lieb-Robinson decay ------------------------------------------------------------


def _stretched_envelope(r, err, floor, gammas=np.linspace(0.25, 1.0, 16)):
    """Fit ``log err = log C - b r^gamma`` over ``gamma`` and lift ``C`` so the
    envelope covers every point.  Returns ``(C, b, gamma, envelope)``."""
    r = np.asarray(r, dtype=float)
    use = err > floor
    best = None
    if use.sum() >= 2:
        for g in gammas:
            x = r[use] ** g
            slope, icpt = np.polyfit(x, np.log(err[use]), 1)
            res = np.sum((np.log(err[use]) - (slope * x + icpt)) ** 2)
            if best is None or res < best[0]:
                best = (res, -slope, g)
    if best is None:
        return np.nan, np.nan, np.nan, np.full(len(r), np.nan)
    _, b, g = best
    C = float(np.max(err[use] * np.exp(b * r[use] ** g)))
    return C, b, g, C * np.exp(-b * r**g)


def check_lr_decay(
    spec: HamiltonianSpec,
    dspec: DissipatorSpec,
    edge,
    radii,
    levels,
    t: float,
    cutoff: int,
    level_radius: int | None = None,
    floor: float = 1e-12,
) -> SweepResult:
    """Localized-versus-full error on ``edge`` as the rectangle grows.

    The full evolution runs at ``cutoff`` from the product coherent state with
    the amplitudes of ``dspec``.  The localized one keeps the rectangle of
    each radius, projects onto levels ``<= M'`` and evolves the restricted,
    projected input.  The error is the trace norm of the difference of the
    two reduced states on ``edge``.  Radii are swept at ``M' = max(levels)``
    and ``M'`` is swept at ``level_radius`` (default: the smallest radius).

    Passes when both sweeps are non-increasing and the fitted
    stretched-exponential envelope decays.
    """
    g = spec.graph
    if dspec.p < 2 * spec.d + 2:
        raise ValueError(f"p={dspec.p} below 2d+2={2 * spec.d + 2}")
    levels = sorted(levels)
    if levels[-1] > cutoff:
        raise ValueError("projection level exceeds the simulation cutoff")
    edge = tuple(edge)
    tr = TruncationSpec(cutoff, g.n_modes)
    full = _evolve_any(_input_vector(g, dspec.alpha, cutoff), build_liouvillian(spec, dspec, tr), [t])[0]
    ref = partial_trace(full, [g.index(v) for v in edge], tr)

    def local_error(r, level):
        R = rectangle(g, edge, r)
        L = build_liouvillian(spec, dspec, tr, region=R, projected=level)
        psi = _input_vector(g, dspec.alpha, cutoff, vertices=L.vertices, level=level)
        rho = _evolve_any(psi, L, [t])[0]
        red = partial_trace(rho, [L.vertices.index(v) for v in edge], L.trunc)
        # embed the projected reduced state into the cutoff space
        dl = level + 1
        big = np.zeros((cutoff + 1,) * 4, dtype=complex)
        big[:dl, :dl, :dl, :dl] = red.reshape((dl,) * 4)
        n = (cutoff + 1) ** 2
        return _trace_norm(big.reshape(n, n) - ref), len(R)

    radii = sorted(radii)
    top = levels[-1]
    errs, sizes, trace = [], [], []
    for r in radii:
        e, n = local_error(r, top)
        errs.append(e)
        sizes.append(n)
        trace.append({"sweep": "radius", "radius": r, "level": top, "region_size": n, "error": e})
    errs = np.array(errs)
    lr = radii[0] if level_radius is None else level_radius
    lvl_errs = []
    for M in levels:
        e = errs[radii.index(lr)] if (M == top and lr in radii) else local_error(lr, M)[0]
        lvl_errs.append(e)
        trace.append({"sweep": "level", "radius": lr, "level": M, "error": e})
    lvl_errs = np.array(lvl_errs)
    C, b, gam, env = _stretched_envelope(np.array(radii), errs, floor)
    mono_r = bool(np.all(np.diff(errs) <= floor))
    mono_m = bool(np.all(np.diff(lvl_errs) <= floor))
    decays = bool(np.isfinite(b) and b > 0)
    bound = np.where(errs > floor, env, np.nan)
    return SweepResult(
        "lr",
        "radius",
        list(radii),
        errs,
        bound,
        mono_r and mono_m and decays,
        details={
            "t": t,
            "cutoff": cutoff,
            "levels": levels,
            "level_radius": lr,
            "level_errors": lvl_errs,
            "region_sizes": sizes,
            "monotone_radius": mono_r,
            "strict_radius": bool(np.all(np.diff(errs) < 0)),
            "monotone_level": mono_m,
            "envelope_C": C,
            "envelope_b": b,
            "envelope_gamma": gam,
        },
        trace=trace,
    )


# -- Trotter rate -------------------------------------------------------------------


def check_trotter_rate(
    spec: HamiltonianSpec,
    dspec: DissipatorSpec,
    t: float,
    ns,
    cutoff: int,
    alphas=None,
    slope_range=TROTTER_SLOPE,
) -> SweepResult:
    """Trace-norm error of the Lie-Trotter product against the exact flow.

    Passes when the error decreases strictly in ``n`` and the log-log slope
    lies in ``slope_range``.
    """
    if dspec.p < 2 * spec.d + 2:
        raise ValueError(f"p={dspec.p} below 2d+2={2 * spec.d + 2}")
    ns = sorted(int(n) for n in ns)
    alphas = dict(dspec.alpha) if alphas is None else alphas
    tr = TruncationSpec(cutoff, spec.graph.n_modes)
    psi = _input_vector(spec.graph, alphas, cutoff)
    rho = np.outer(psi, psi.conj())
    ref = evolve(rho, build_liouvillian(spec, dspec, tr), t).rho
    errs = np.array([_trace_norm(trotter_evolve(rho, spec, dspec, tr, t, n) - ref) for n in ns])
    slope = float(np.polyfit(np.log(ns), np.log(errs), 1)[0])
    mono = bool(np.all(np.diff(errs) < 0))
    ok = mono and slope_range[0] <= slope <= slope_range[1]
    return SweepResult(
        "trotter", "n", ns, errs, np.full(len(ns), np.nan), ok, details={"slope": slope, "monotone": mono, "t": t}
    )


# -- operator-norm bounds -------------------------------------------------------------


def check_norm_bounds(spec: HamiltonianSpec, dspec: DissipatorSpec, Ms) -> SweepResult:
    """``||P H_e P||`` and ``||P L_j P||`` against their polynomial bounds.

    One row per edge and cutoff, and per vertex and cutoff; ``spec.L`` is
    used as the coefficient magnitude.
    """
    values, measured, bound, labels = [], [], [], []
    for M in Ms:
        tr = TruncationSpec(M)
        if M >= spec.d:
            for e in spec.graph.edges:
                H = build_edge_hamiltonian(spec.coeffs[e], tr)
                values.append(M)
                measured.append(np.linalg.norm(H, 2))
                bound.append(hamiltonian_norm_bound(spec.L, spec.d, M))
                labels.append(f"H{e}")
        a = annihilation_op(tr)
        for v in spec.graph.vertices:
            al = dspec.amplitude(v)
            J = np.linalg.matrix_power(a, dspec.p) - al**dspec.p * np.eye(M + 1)
            values.append(M)
            measured.append(np.linalg.norm(J, 2))
            bound.append(jump_norm_bound(dspec.p, M, al))
            labels.append(f"L{v}")
    measured, bound = np.array(measured), np.array(bound)
    return SweepResult(
        "norms",
        "M",
        values,
        measured,
        bound,
        bool(np.all(measured <= bound * (1 + 1e-12))),
        labels=labels,
        details={"d": spec.d, "p": dspec.p, "max_ratio": float(np.max(measured / np.where(bound > 0, bound, np.inf)))},
    )


# -- coherent Sobolev norms ------------------------------------------------------------


def coherent_sobolev_value(alpha: complex, k: int, cutoff: int | None = None) -> float:
    """``<alpha|(N+1)^k|alpha>``; the Poisson series is truncated at ``cutoff``
    if given, otherwise summed until the tail is negligible."""
    mu = abs(alpha) ** 2
    if cutoff is None:
        cutoff = int(mu + 12 * np.sqrt(mu + 1) + 4 * k + 40)
    n = np.arange(cutoff + 1)
    if mu == 0:
        return 1.0
    return float(np.sum(poisson.pmf(n, mu) * (n + 1.0) ** k))


def coherent_sobolev_bound(alpha: complex, k: int, form: str = "valid") -> float:
    """Upper bound on ``<alpha|(N+1)^k|alpha>``.

    ``form="literal"`` is ``2^k (k / ln(k/|alpha|^2 + 1))^k``, which tends to
    0 as ``alpha -> 0`` and is violated for small ``|alpha|``.
    ``form="valid"`` is ``2^k (1 + (k / ln(k/|alpha|^2 + 1))^k)``, which
    follows from ``n^l <= 1 + n^k`` and the Poisson moment bound.
    """
    mu = abs(alpha) ** 2
    if k == 0:
        core = 1.0
    elif mu == 0:
        core = 0.0
    else:
        core = (k / np.log(k / mu + 1.0)) ** k
    if form == "literal":
        return 2.0**k * core
    if form == "valid":
        return 2.0**k * (1.0 + core)
    raise ValueError(f"unknown bound form {form!r}")


def check_coherent_sobolev(alphas, ks, cutoff: int | None = None, form: str = "valid") -> SweepResult:
    """Coherent-state Sobolev norms against :func:`coherent_sobolev_bound`.

    The details record how many pairs violate the literal bound.
    """
    values, measured, bound, labels, literal_fail = [], [], [], [], []
    for a, k in itertools.product(alphas, ks):
        v = coherent_sobolev_value(a, k, cutoff)
        values.append(k)
        labels.append(f"alpha={complex(a):g}")
        measured.append(v)
        bound.append(coherent_sobolev_bound(a, k, form))
        if v > coherent_sobolev_bound(a, k, "literal"):
            literal_fail.append((abs(a), k))
    measured, bound = np.array(measured), np.array(bound)
    return SweepResult(
        "sobolev",
        "k",
        values,
        measured,
        bound,
        bool(np.all(measured <= bound)),
        labels=labels,
        details={"form": form, "cutoff": cutoff, "literal_violations": literal_fail},
    )

