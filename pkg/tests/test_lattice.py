from math import factorial

import numpy as np
import pytest

from bosonlearn.fock import TruncationSpec, coherent_state
from bosonlearn.lattice import (
    DissipatorSpec,
    EdgeCoefficients,
    HamiltonianSpec,
    LatticeGraph,
    build_edge_hamiltonian,
    build_hamiltonian,
    chain_graph,
    coefficients_from_g,
    dump_spec,
    g_poly_eval,
    g_polynomial,
    grid_graph,
    lambda_from_matrix_elements,
    load_spec,
    matrix_element_table,
    random_hamiltonian,
    rotated_beta,
    single_term_hamiltonian,
    substitution_condition_factor,
)
from bosonlearn.poly import Poly


def random_coeffs(d, seed, L=1.0):
    return random_hamiltonian(chain_graph(2), d, L, seed).coeffs[(0, 1)]


def test_graph_validation():
    with pytest.raises(ValueError):
        LatticeGraph((0, 1), ((0, 0),))
    with pytest.raises(ValueError):
        LatticeGraph((0, 1), ((0, 1), (1, 0)))
    g = grid_graph(3, 3)
    assert g.max_degree == 4
    assert chain_graph(5).max_degree == 2
    assert chain_graph(5).distance(0, 4) == 4


def test_random_hamiltonian_examples():
    g = chain_graph(3)
    spec = random_hamiltonian(g, 2, 0.0, 1)
    assert all(np.all(c.lam == 0) for c in spec.coeffs.values())
    a = random_hamiltonian(g, 2, 0.7, 5)
    b = random_hamiltonian(g, 2, 0.7, 5)
    for e in g.edges:
        np.testing.assert_array_equal(a.coeffs[e].lam, b.coeffs[e].lam)
        a.coeffs[e].check(0.7)
        assert a.coeffs[e].lam[0, 0, 0, 0] == 0


def test_coefficient_checks():
    lam = np.zeros((2,) * 4, complex)
    lam[1, 0, 0, 1] = 1
    with pytest.raises(ValueError):
        EdgeCoefficients(lam).check()
    lam[0, 1, 1, 0] = 1
    EdgeCoefficients(lam).check()
    lam2 = np.zeros((2,) * 4, complex)
    lam2[1, 1, 0, 0] = 1
    with pytest.raises(ValueError):
        EdgeCoefficients(lam2).check()


def test_edge_hamiltonian_examples():
    t = TruncationSpec(3)
    c = EdgeCoefficients.from_dict(1, {(0, 1, 0, 1): 1, (1, 0, 1, 0): 1})
    H = build_edge_hamiltonian(c, t)
    idx = lambda u, up: u * 4 + up
    assert H[idx(0, 0), idx(1, 1)] == pytest.approx(1)
    hop = EdgeCoefficients.from_dict(1, {(1, 0, 0, 1): 1, (0, 1, 1, 0): 1})
    H = build_edge_hamiltonian(hop, t)
    assert H[idx(1, 0), idx(0, 1)] == pytest.approx(1)
    for seed in range(5):
        H = build_edge_hamiltonian(random_coeffs(2, seed), TruncationSpec(4))
        assert np.max(np.abs(H - H.conj().T)) < 1e-12


def test_norm_bound():
    for d in (1, 2):
        for M in (2, 4, 6):
            c = random_coeffs(d, M)
            H = build_edge_hamiltonian(c, TruncationSpec(M))
            bound = 1.0 * (d + 1) ** 4 * factorial(d) * (M + 1) ** (2 * d)
            assert np.linalg.norm(H, 2) <= bound


def _commutator_value(spec, e, alpha, beta, M):
    g = spec.graph
    tr = TruncationSpec(M, g.n_modes)
    H = build_hamiltonian(spec, tr)
    psi, _ = coherent_state([alpha[v] for v in g.vertices], tr)
    t1 = TruncationSpec(M)
    b = [coherent_state(x, t1)[0] for x in beta]
    proj = np.outer(np.kron(b[0], b[1]), np.kron(b[0], b[1]).conj())
    i, j = g.index(e[0]), g.index(e[1])
    dl = M + 1
    shape = (dl,) * g.n_modes

    def apply_proj(v):
        t = v.reshape(shape)
        t = np.moveaxis(t, (i, j), (0, 1)).reshape(dl * dl, -1)
        t = proj @ t
        t = t.reshape((dl, dl) + tuple(shape[k] for k in range(g.n_modes) if k not in (i, j)))
        return np.moveaxis(t, (0, 1), (i, j)).reshape(-1)

    Hpsi = H @ psi
    return np.vdot(psi, H @ apply_proj(psi)) - np.vdot(psi, apply_proj(Hpsi))


def test_g_commutator_identity():
    rng = np.random.default_rng(3)
    spec = random_hamiltonian(chain_graph(3), 2, 1.0, 11)
    M = 20
    for e in spec.graph.edges:
        for _ in range(3):
            alpha = {v: complex(*rng.uniform(-0.35, 0.35, 2)) for v in spec.graph.vertices}
            beta = rng.uniform(-0.4, 0.4, 4)
            beta = [beta[0] + 1j * beta[1], beta[2] + 1j * beta[3]]
            lhs = g_poly_eval(spec, e, alpha, beta)
            ov = np.exp(-abs(alpha[e[0]] - beta[0]) ** 2 - abs(alpha[e[1]] - beta[1]) ** 2)
            rhs = _commutator_value(spec, e, alpha, beta, M)
            assert abs(lhs * ov - rhs) < 1e-6


def test_g_trivial_cases():
    spec = random_hamiltonian(chain_graph(3), 2, 1.0, 2)
    assert g_poly_eval(spec, (0, 1), {}, (0, 0)) == 0
    alpha = {0: 0.3 + 0.1j, 1: -0.2j, 2: 0}
    assert abs(g_poly_eval(spec, (0, 1), alpha, (alpha[0], alpha[1]))) < 1e-14


def test_g_polynomial_matches_eval():
    rng = np.random.default_rng(4)
    c = random_coeffs(2, 9)
    spec = HamiltonianSpec(chain_graph(2), {(0, 1): c}, 2, 1.0)
    gp = g_polynomial(c)
    for _ in range(10):
        x = rng.uniform(-1, 1, 6)
        val = g_poly_eval(spec, (0, 1), {0: x[0], 1: x[1]}, (x[2] + 1j * x[3], x[4] + 1j * x[5]))
        assert abs(gp(x) - val) < 1e-12
    for var in range(6):
        assert gp.degree(var) <= 2


def test_coefficient_formula_round_trip():
    for seed in range(10):
        d = 1 + seed % 2
        c = random_coeffs(d, seed)
        rec = coefficients_from_g(g_polynomial(c), d)
        np.testing.assert_allclose(rec.lam, c.lam, atol=1e-9)


def test_coefficient_formula_zero_and_real():
    rec = coefficients_from_g(Poly(6), 2)
    assert np.all(rec.lam == 0)
    c = EdgeCoefficients.from_dict(1, {(0, 1, 0, 1): 0.3, (1, 0, 1, 0): 0.3, (1, 1, 0, 1): 0.2, (1, 1, 1, 0): 0.2})
    real_restr = rotated_beta(g_polynomial(c), 0.0)
    assert real_restr.max_abs_coeff() < 1e-15


def test_coefficient_formula_degree_mismatch():
    c = random_coeffs(2, 0)
    with pytest.raises(ValueError):
        coefficients_from_g(g_polynomial(c), 1)


def test_matrix_elements_examples():
    c = EdgeCoefficients.from_dict(1, {(0, 1, 0, 1): 1, (1, 0, 1, 0): 1})
    T = matrix_element_table(c, 2)
    assert T[0, 0, 1, 1] == pytest.approx(1)
    for seed in range(4):
        d = 1 + seed % 2
        c = random_coeffs(d, seed)
        umax = d + 1
        T = matrix_element_table(c, umax)
        np.testing.assert_allclose(T, np.transpose(T, (2, 3, 0, 1)).conj(), atol=1e-14)
        H = build_edge_hamiltonian(c, TruncationSpec(umax)).reshape((umax + 1,) * 4)
        np.testing.assert_allclose(T, H, atol=1e-12)


def test_lambda_from_matrix_elements():
    for seed in range(6):
        d = 1 + seed % 2
        c = random_coeffs(d, seed)
        rec = lambda_from_matrix_elements(matrix_element_table(c, d), d)
        np.testing.assert_allclose(rec.lam, c.lam, atol=1e-10)
    T = np.zeros((2,) * 4, complex)
    T[0, 0, 1, 1] = 0.4
    T[1, 1, 0, 0] = 0.4
    rec = lambda_from_matrix_elements(T, 1)
    assert rec.lam[0, 1, 0, 1] == pytest.approx(0.4)
    assert np.all(lambda_from_matrix_elements(np.zeros((3,) * 4), 2).lam == 0)


def test_lambda_noise_condition_factor():
    rng = np.random.default_rng(0)
    d = 2
    kappa = substitution_condition_factor(d)
    c = random_coeffs(d, 1)
    T = matrix_element_table(c, d)
    sigma = 1e-4
    noise = rng.uniform(-sigma, sigma, T.shape) + 1j * rng.uniform(-sigma, sigma, T.shape)
    noise = 0.5 * (noise + np.transpose(noise, (2, 3, 0, 1)).conj())
    rec = lambda_from_matrix_elements(T + noise, d)
    assert np.abs(rec.lam - c.lam).max() <= kappa * np.sqrt(2) * sigma


def test_json_round_trip():
    spec = random_hamiltonian(grid_graph(2, 2), 1, 0.5, 3)
    dspec = DissipatorSpec(4, {(0, 0): 0.2 + 0.1j, (1, 1): -0.3})
    spec2, dspec2 = load_spec(dump_spec(spec, dspec))
    assert spec2.graph == spec.graph
    for e in spec.graph.edges:
        np.testing.assert_array_equal(spec2.coeffs[e].lam, spec.coeffs[e].lam)
    assert dspec2.p == 4 and dspec2.alpha == dspec.alpha


def test_dissipator_validation():
    with pytest.raises(ValueError):
        DissipatorSpec(0)
    with pytest.raises(ValueError):
        DissipatorSpec(2, {0: 2.0}, eta=1.0)
    with pytest.warns(UserWarning):
        DissipatorSpec(2).check_refined(1)


def test_single_term_spec():
    spec = single_term_hamiltonian(chain_graph(2), 1, {(0, 1, 0, 1): 0.3})
    lam = spec.coeffs[(0, 1)].lam
    assert lam[1, 0, 1, 0] == pytest.approx(0.3)
    assert spec.L == pytest.approx(0.3)
