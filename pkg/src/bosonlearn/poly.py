"""Sparse multivariate polynomials with complex coefficients.

Only what the estimators need: arithmetic, evaluation, exact partial
derivatives, coefficient lookup and linear changes of variables.
"""

from __future__ import annotations

from collections import defaultdict
from math import factorial

import numpy as np


class Poly:
    """Polynomial in ``nvars`` variables stored as ``{exponent tuple: coeff}``."""

    __slots__ = ("nvars", "terms")

    def __init__(self, nvars: int, terms=None):
        self.nvars = nvars
        self.terms = {}
        for exp, c in (terms or {}).items():
            exp = tuple(int(e) for e in exp)
            if len(exp) != nvars:
                raise ValueError(f"exponent {exp} does not match {nvars} variables")
            if c != 0:
                self.terms[exp] = self.terms.get(exp, 0) + complex(c)

    @classmethod
    def constant(cls, nvars, c):
        return cls(nvars, {(0,) * nvars: c})

    @classmethod
    def variable(cls, nvars, i, coeff=1.0):
        exp = [0] * nvars
        exp[i] = 1
        return cls(nvars, {tuple(exp): coeff})

    def copy(self):
        return Poly(self.nvars, dict(self.terms))

    def __add__(self, other):
        if not isinstance(other, Poly):
            other = Poly.constant(self.nvars, other)
        out = defaultdict(complex, self.terms)
        for e, c in other.terms.items():
            out[e] += c
        return Poly(self.nvars, {e: c for e, c in out.items() if c != 0})

    __radd__ = __add__

    def __neg__(self):
        return Poly(self.nvars, {e: -c for e, c in self.terms.items()})

    def __sub__(self, other):
        return self + (-other if isinstance(other, Poly) else -other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, Poly):
            return Poly(self.nvars, {e: c * other for e, c in self.terms.items()})
        out = defaultdict(complex)
        for e1, c1 in self.terms.items():
            for e2, c2 in other.terms.items():
                out[tuple(a + b for a, b in zip(e1, e2))] += c1 * c2
        return Poly(self.nvars, {e: c for e, c in out.items() if c != 0})

    __rmul__ = __mul__

    def __pow__(self, n: int):
        out = Poly.constant(self.nvars, 1.0)
        for _ in range(n):
            out = out * self
        return out

    def conj(self):
        return Poly(self.nvars, {e: np.conj(c) for e, c in self.terms.items()})

    def degree(self, var=None) -> int:
        if not self.terms:
            return 0
        if var is None:
            return max(sum(e) for e in self.terms)
        return max(e[var] for e in self.terms)

    def coeff(self, exp) -> complex:
        return self.terms.get(tuple(exp), 0j)

    def derivative_at_zero(self, orders) -> complex:
        """``prod_i d^{orders_i}/dx_i^{orders_i}`` evaluated at the origin."""
        orders = tuple(orders)
        return self.coeff(orders) * np.prod([factorial(o) for o in orders])

    def diff(self, var: int, times: int = 1):
        out = {}
        for e, c in self.terms.items():
            if e[var] < times:
                continue
            f = factorial(e[var]) // factorial(e[var] - times)
            ne = list(e)
            ne[var] -= times
            out[tuple(ne)] = out.get(tuple(ne), 0) + c * f
        return Poly(self.nvars, out)

    def integrate(self, var: int):
        """Antiderivative in ``var`` vanishing at ``x_var = 0``."""
        out = {}
        for e, c in self.terms.items():
            ne = list(e)
            ne[var] += 1
            out[tuple(ne)] = c / ne[var]
        return Poly(self.nvars, out)

    def __call__(self, x):
        """Evaluate at points ``x`` of shape ``(nvars,)`` or ``(npts, nvars)``."""
        x = np.asarray(x)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if not self.terms:
            res = np.zeros(len(x), dtype=complex)
        else:
            exps = np.array(list(self.terms.keys()))
            coeffs = np.array(list(self.terms.values()))
            mons = np.prod(x[:, None, :] ** exps[None, :, :], axis=2)
            res = mons @ coeffs
        return res[0] if single else res

    def substitute(self, images):
        """Compose with ``x_i -> images[i]`` where each image is a Poly in a
        common (possibly different) variable set."""
        nv = images[0].nvars
        out = Poly(nv)
        cache = {}
        for e, c in self.terms.items():
            term = Poly.constant(nv, c)
            for i, p in enumerate(e):
                if p:
                    key = (i, p)
                    if key not in cache:
                        cache[key] = images[i] ** p
                    term = term * cache[key]
            out = out + term
        return out

    def real_part_is_zero(self, tol=0.0) -> bool:
        return all(abs(c.real) <= tol for c in self.terms.values())

    def max_abs_coeff(self) -> float:
        return max((abs(c) for c in self.terms.values()), default=0.0)

    def __repr__(self):
        return f"Poly(nvars={self.nvars}, nterms={len(self.terms)})"
