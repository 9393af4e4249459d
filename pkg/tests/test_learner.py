import json

import numpy as np
import pytest

from bosonlearn.estimators import BoxNet, operator_cell_integrals
from bosonlearn.lattice import (
    EdgeCoefficients,
    HamiltonianSpec,
    chain_graph,
    random_hamiltonian,
    single_term_hamiltonian,
)
from bosonlearn.learner import (
    EstimateTable,
    StageError,
    build_refined_plan,
    build_vanilla_plan,
    check_offset,
    end_to_end,
    exact_q_table,
    matrix_elements_from_derivatives,
    refined_derivatives,
    refined_expectation,
    _refined_plan_for,
    refined_reconstruct,
    sample_budget,
    vanilla_estimates,
    vanilla_expectation,
    vanilla_exponents,
    vanilla_nets,
    vanilla_reconstruct,
    vanilla_value_range,
)
from bosonlearn.measurement import MeasurementPlan, Simulator, projection_correction, run_shots
from bosonlearn.polyfit import vandermonde

EDGE = (0, 1)


def two_mode(entries=None, seed=None, L=0.4):
    g = chain_graph(2)
    if seed is not None:
        return random_hamiltonian(g, 1, L, seed)
    return single_term_hamiltonian(g, 1, entries or {(0, 1, 0, 1): 0.3})


def zero_spec(g, d=1):
    return HamiltonianSpec(g, {e: EdgeCoefficients.zeros(d) for e in g.edges}, d, 0.0)


# -- budgets -------------------------------------------------------------------------


def test_budget_quadruples_when_eps_halves():
    a = sample_budget(0.01, 0.05, (1, 4, 9), 10.0)
    b = sample_budget(0.005, 0.05, (1, 4, 9), 10.0)
    assert abs(b / a - 4) < 1e-6


def test_budget_delta_halving_adds_ln2():
    R, eps = 3.0, 0.1
    f = lambda delta: sample_budget(eps, delta, (2, 3), R) * 2 * eps**2 / R**2
    assert abs(f(0.025) - f(0.05) - np.log(2)) < 1e-3


def test_vanilla_range_bounded_by_e4_in_unit_balls():
    a, b = vanilla_nets(1)
    assert np.all(np.sum(a**2, axis=1) <= 1 + 1e-12)
    assert np.all(np.sum(b**2, axis=1) <= 1 + 1e-12)
    t = 0.1
    assert vanilla_value_range(a, b, t) * t <= np.exp(4)


# -- vanilla -------------------------------------------------------------------------


@pytest.mark.parametrize("d", [1, 2])
def test_vanilla_nets_unisolvent(d):
    a, b = vanilla_nets(d)
    pts = np.array([(*x, *y) for x in a for y in b])
    V = vandermonde(pts, vanilla_exponents(d))
    assert V.shape[0] == V.shape[1]
    assert np.linalg.cond(V) < 1e10
    assert np.all(b != 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_vanilla_exact_table_roundtrip(seed):
    spec = two_mode(seed=seed)
    a, b = vanilla_nets(1)
    tab = exact_q_table(spec.coeffs[EDGE], a, b)
    est = vanilla_reconstruct(EstimateTable("vanilla", {EDGE: tab[None]}, np.array([0.01]), a, b, 0), 1)
    assert est.compare(spec) < 1e-6


def test_vanilla_zero_hamiltonian_expectation_vanishes():
    spec = zero_spec(chain_graph(2))
    plan = build_vanilla_plan(spec.graph, 1, 0.05, 0.05, t=0.02, shots=1)
    tab = vanilla_expectation(plan, Simulator(spec, plan.p, 12))
    assert np.abs(tab.values[EDGE]).max() < 1e-6
    est = vanilla_reconstruct(tab, 1)
    assert est.compare(spec) < 1e-3


def test_vanilla_expectation_close_to_exact_q_at_small_t():
    spec = two_mode(seed=4)
    plan = build_vanilla_plan(spec.graph, 1, 0.05, 0.05, t=0.01, shots=1)
    tab = vanilla_expectation(plan, Simulator(spec, plan.p, 10))
    exact = exact_q_table(spec.coeffs[EDGE], plan.alpha_net, plan.beta_net)
    assert np.abs(tab.values[EDGE][0] - exact).max() < 0.05 * np.abs(exact).max()


def test_vanilla_empty_box_gives_zero():
    spec = two_mode()
    plan = build_vanilla_plan(spec.graph, 1, 0.05, 0.05, t=0.05, shots=3000)
    plan.beta_net = np.vstack([plan.beta_net, [0.3, 0.0, 0.2, 0.1]])
    sim = Simulator(spec, plan.p, 8)
    assert vanilla_estimates(plan, sim).values[EDGE][0, :, -1] == pytest.approx(0.0, abs=0)
    assert vanilla_expectation(plan, sim).values[EDGE][0, :, -1] == pytest.approx(0.0, abs=1e-12)


def test_vanilla_estimator_unbiased_within_3sigma():
    spec = two_mode()
    plan = build_vanilla_plan(spec.graph, 1, 0.05, 0.05, t=0.05, shots=100_000)
    plan.alpha_net = plan.alpha_net[:1]
    sim = Simulator(spec, plan.p, 8)
    emp = vanilla_estimates(plan, sim).values[EDGE][0, 0]
    ex, mom = vanilla_expectation(plan, sim, with_variance=True)
    m1, m2 = mom[EDGE][0]
    net = BoxNet(plan.beta_net)
    sd = np.sqrt((net.signs * net.box_sums(m2) - net.box_sums(m1) ** 2) / plan.shots) / plan.t
    z = np.abs(emp - ex.values[EDGE][0, 0]) / sd
    assert z.max() < 3.5
    assert np.mean(z < 3) > 0.9


def test_vanilla_tables_deterministic_per_seed():
    spec = two_mode()
    plan = build_vanilla_plan(spec.graph, 1, 0.05, 0.05, t=0.05, shots=2000, seed=7)
    sim = Simulator(spec, plan.p, 8)
    a = vanilla_estimates(plan, sim).values[EDGE]
    b = vanilla_estimates(plan, sim).values[EDGE]
    assert np.array_equal(a, b)


# -- refined -------------------------------------------------------------------------


def test_refined_vacuum_box_expectation_is_volume():
    spec = zero_spec(chain_graph(2))
    sim = Simulator(spec, 4, 6)
    corners = np.array([[0.5, 0.4, -0.3, 0.6], [-0.7, -0.2, 0.4, 0.5]])
    net = BoxNet(corners)
    mp = MeasurementPlan(edges=(EDGE,), alpha=(0j, 0j), t=0.0, shots=200_000, projected=True, level=1)
    rho = sim.reduced_states(mp)[EDGE]
    exact = net.box_sums(operator_cell_integrals(net, rho, 6)).real / np.pi**2
    assert np.allclose(exact, net.signed_volumes() / np.pi**2, atol=1e-12)
    b = run_shots(mp, sim).for_edge(EDGE)
    w = np.exp(np.sum(b**2, axis=1))
    emp = net.box_sums(net.histogram(b, w)) / mp.shots
    sd = np.sqrt(net.signs * net.box_sums(net.histogram(b, w**2)) / mp.shots - emp**2) / np.sqrt(mp.shots)
    assert np.all(np.abs(emp - exact) < 3 * sd)


@pytest.fixture(scope="module")
def refined_single_edge():
    spec = two_mode(seed=11, L=0.3)
    plan = build_refined_plan(spec.graph, 1, 0.05, 0.05)
    sim = Simulator(spec, plan.p, plan.level + plan.p)
    return spec, plan, sim, refined_expectation(plan, sim)


def test_refined_noiseless_recovers_random_edge(refined_single_edge):
    spec, plan, _, tab = refined_single_edge
    est = refined_reconstruct(tab, plan)
    assert est.compare(spec) < 1e-6
    T = est.metadata["matrix_elements"][EDGE]
    assert abs(T[0, 0, 1, 1] - spec.coeffs[EDGE].lam[0, 1, 0, 1]) < 1e-6


def test_refined_offset_needed_and_sufficient():
    spec = zero_spec(chain_graph(2))
    plan = build_refined_plan(spec.graph, 1, 0.05, 0.05)
    resid = check_offset(plan, spec.graph, plan.level + plan.p, tol=1e-6)
    assert resid < 1e-6
    tab = refined_expectation(plan, Simulator(spec, plan.p, plan.level + plan.p))
    D = refined_derivatives(plan, tab.values[EDGE])
    T = matrix_elements_from_derivatives(D, 1)
    assert np.abs(T).max() > 1e-4 and np.abs(T).max() > 100 * resid


def test_refined_sampled_matches_expectation(refined_single_edge):
    spec, plan, sim, tab = refined_single_edge
    net = BoxNet(plan.beta_net)
    k, a = 2, 4
    mp = _refined_plan_for(plan, a, 0, plan.times[k])
    mp = MeasurementPlan(**{**mp.__dict__, "shots": 100_000})
    b = run_shots(mp, sim).for_edge(EDGE)
    C = projection_correction(plan.alpha_net[a], plan.level)
    w = C * np.exp(np.sum(b**2, axis=1))
    emp = net.box_sums(net.histogram(b, w)) / mp.shots
    sd = np.sqrt(np.maximum(net.signs * net.box_sums(net.histogram(b, w**2)) / mp.shots - emp**2, 1e-30) / mp.shots)
    z = np.abs(emp - tab.values[EDGE][k, a]) / sd
    assert np.mean(z < 3) > 0.97


# -- end to end ----------------------------------------------------------------------


def test_end_to_end_vanilla_report(tmp_path):
    spec = two_mode()
    rep = end_to_end("vanilla", spec, 0.5, 0.05, seed=3, shots=2000, truth=spec, sim_cutoff=8)
    assert rep.total_shots == 2000 * rep.n_settings
    plan = rep.plan
    nu = len(plan["groups"])
    assert rep.total_evolution_time == pytest.approx(2000 * nu * len(plan["alpha_net"]) * plan["t"])
    path = tmp_path / "r.json"
    rep.to_json(path, spec)
    doc = json.loads(path.read_text())
    errs = [r["error"] for r in doc["coefficients"]]
    assert max(errs) == pytest.approx(doc["max_error"])
    assert doc["budget_capped"] is True
    again = end_to_end("vanilla", spec, 0.5, 0.05, seed=3, shots=2000, truth=spec, sim_cutoff=8)
    assert again.max_error == rep.max_error


def test_end_to_end_noiseless_vanilla_succeeds():
    spec = two_mode()
    rep = end_to_end("vanilla", spec, 0.05, 0.05, noiseless=True, truth=spec, t=0.02)
    assert rep.success


def test_end_to_end_budget_stage_error():
    spec = two_mode()
    with pytest.raises(StageError) as info:
        end_to_end("vanilla", spec, 0.05, 0.05, max_total_shots=1e6)
    assert info.value.stage == "plan"
    with pytest.raises(StageError):
        end_to_end("bogus", spec, 0.05, 0.05)
