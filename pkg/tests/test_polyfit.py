import itertools
from math import factorial

import numpy as np
import pytest
from numpy.polynomial import chebyshev as C

from bosonlearn.poly import Poly
from bosonlearn.polyfit import (
    InterpolationError,
    chebyshev_arc_nodes,
    chebyshev_kth_derivative_at_one,
    chebyshev_total_degree_points,
    derivative_at_zero_time,
    derivative_error_bound,
    lagrange_multivariate,
    markov_factor,
    poly_derivatives,
    robust_cheb_fit,
    time_derivative_bound,
    time_nodes,
    total_degree_exponents,
)


def random_poly(rng, nvars, deg, per_var=False):
    exps = (
        list(itertools.product(range(deg + 1), repeat=nvars))
        if per_var
        else total_degree_exponents(nvars, deg)
    )
    return Poly(nvars, {e: rng.normal() for e in exps})


def test_lagrange_line():
    interp = lagrange_multivariate([[0.0], [1.0]], [1.0, 3.0], 1, 1)
    assert interp.poly.coeff((0,)) == pytest.approx(1)
    assert interp.poly.coeff((1,)) == pytest.approx(2)


def test_lagrange_round_trip():
    rng = np.random.default_rng(0)
    for m, n in [(2, 3), (3, 2), (4, 2)]:
        p = random_poly(rng, m, n)
        pts = chebyshev_total_degree_points(m, n)
        interp = lagrange_multivariate(pts, p(pts).real, m, n)
        for e, c in p.terms.items():
            assert abs(interp.poly.coeff(e) - c) < 1e-8
        assert np.isfinite(interp.log_abs_det)


def test_lagrange_zero_and_bound():
    pts = chebyshev_total_degree_points(2, 2)
    interp = lagrange_multivariate(pts, np.zeros(len(pts)), 2, 2)
    assert interp.poly.max_abs_coeff() == 0
    rng = np.random.default_rng(1)
    eps = 1e-3
    y = rng.uniform(-eps, eps, len(pts))
    interp = lagrange_multivariate(pts, y, 2, 2)
    grid = np.array(list(itertools.product(np.linspace(-1, 1, 41), repeat=2)))
    assert np.abs(interp.poly(grid)).max() <= interp.sup_bound(eps)


def test_lagrange_singular():
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]])
    with pytest.raises(InterpolationError):
        lagrange_multivariate(pts, [0, 1, 2], 2, 1)
    with pytest.raises(InterpolationError):
        lagrange_multivariate(pts[:2], [0, 1], 2, 1)


def test_cheb_fit_noiseless():
    rng = np.random.default_rng(2)
    c = rng.normal(size=9)
    x = chebyshev_arc_nodes(32)
    fit = robust_cheb_fit(x, C.chebval(x, c), 8)
    np.testing.assert_allclose(fit.coeffs, c, atol=1e-9)


def test_cheb_fit_noise_3sigma():
    rng = np.random.default_rng(3)
    grid = np.linspace(-1, 1, 10_000)
    sigma = 1e-3
    M = 8
    x = chebyshev_arc_nodes(4 * M)
    for _ in range(20):
        c = rng.normal(size=M + 1)
        y = C.chebval(x, c) + rng.uniform(-sigma, sigma, len(x))
        fit = robust_cheb_fit(x, y, M)
        assert np.abs(fit(grid) - C.chebval(grid, c)).max() <= 3 * sigma


def test_cheb_fit_constant():
    rng = np.random.default_rng(4)
    sigma = 0.01
    x = chebyshev_arc_nodes(16)
    fit = robust_cheb_fit(x, 2.0 + rng.uniform(-sigma, sigma, 16), 4)
    assert abs(fit.coeffs[0] - 2.0) <= sigma


def test_cheb_fit_arc_violation():
    x = np.linspace(-0.3, 1, 8)
    with pytest.raises(ValueError):
        robust_cheb_fit(x, np.zeros(8), 2)


def test_markov_factor_examples():
    assert markov_factor(2, 1) == 4
    assert markov_factor(2, 2) == 4
    assert markov_factor(1, 1) == 1
    with pytest.raises(ValueError):
        markov_factor(2, 3)


def test_markov_factor_matches_chebyshev():
    for D in range(1, 13):
        for k in range(1, D + 1):
            assert markov_factor(D, k) == pytest.approx(chebyshev_kth_derivative_at_one(D, k), rel=1e-10)


def test_multivariate_markov_inequality():
    rng = np.random.default_rng(5)
    r = np.sqrt(rng.uniform(0, 1, 4000))
    th = rng.uniform(0, 2 * np.pi, 4000)
    ball = np.column_stack([r * np.cos(th), r * np.sin(th)])
    circle = np.column_stack([np.cos(th), np.sin(th)])
    pts = np.vstack([ball, circle])
    D = 4
    for _ in range(200):
        p = random_poly(rng, 2, D)
        sup = np.abs(p(pts)).max()
        for k in (1, 2):
            for i in range(k + 1):
                deriv = p.diff(0, i).diff(1, k - i)
                val = np.abs(deriv(ball[:50])).max()
                assert val <= 2 ** (2 * k - 1) * markov_factor(D, k) * sup


def test_poly_derivatives_noiseless():
    rng = np.random.default_rng(6)
    M = 4
    p = random_poly(rng, 2, M, per_var=True)
    table = poly_derivatives(lambda x: p(x).real, 2, M, 3)
    for idx in itertools.product(range(4), repeat=2):
        assert abs(table[idx] - p.derivative_at_zero(idx).real) < 1e-6


def test_poly_derivatives_zero():
    table = poly_derivatives(lambda x: np.zeros(len(x)), 3, 2, 2)
    assert all(v == 0 for v in table.values.values())


def test_poly_derivatives_noise_bound():
    rng = np.random.default_rng(7)
    M, sigma = 4, 1e-4
    errs = []
    for k_max in (1, 2):
        for _ in range(20):
            p = random_poly(rng, 1, M)
            table = poly_derivatives(lambda x: p(x).real + rng.uniform(-sigma, sigma, len(x)), 1, M, k_max, sigma=sigma)
            bound = derivative_error_bound(M, k_max, 1, sigma)
            for k in range(k_max + 1):
                err = abs(table[(k,)] - p.derivative_at_zero((k,)).real)
                assert err <= bound
                errs.append(err / bound)
    assert np.median(errs) < 0.05


def test_time_derivative():
    M = 6
    lin = derivative_at_zero_time(lambda t: 0.5 - 1.7 * t, M)
    assert lin == pytest.approx(-1.7, abs=1e-9)
    rng = np.random.default_rng(8)
    sigma = 1e-4
    for _ in range(20):
        c = rng.normal(size=M + 1)
        f = np.polynomial.Polynomial(c)
        est = derivative_at_zero_time(lambda t: f(t) + rng.uniform(-sigma, sigma, len(t)), M)
        assert abs(est - c[1]) <= time_derivative_bound(M, sigma)
        assert time_derivative_bound(M, sigma) == pytest.approx(3 * np.e * 36 * sigma)
    const = derivative_at_zero_time(lambda t: 3 + rng.uniform(-sigma, sigma, len(t)), M)
    assert abs(const) <= time_derivative_bound(M, sigma)


def test_time_nodes_window():
    x = time_nodes(4)
    assert x.min() > 1 / 16 and x.max() < 2 + 1 / 16
    with pytest.raises(ValueError):
        derivative_at_zero_time(lambda t: t, 4, x=np.linspace(0.1, 2, 16))
