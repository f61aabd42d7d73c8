from fractions import Fraction

import numpy as np
import pytest

from magstar.cli import commutation_defects, random_symbol
from magstar.geometry import MagneticForm
from magstar.oracle import gaussian_star, gaussian_weyl_phase
from magstar.starprod import (OrderingMatrix, RegularRep, grid_magnetic_product, hbar_series_product,
                              jacobi_residual, m_ordered_product, magnetic_weyl_product,
                              mixed_ordering_product, moyal_product, n_factor_product,
                              ordering_transform, poisson_bracket_F, series_coefficient,
                              series_coefficient_integral, tau_magnetic_product, weyl_apply)
from magstar.symbols import GridSymbol, PolySymbol as P, monomials

TAUS = [0, Fraction(1, 4), Fraction(1, 2), 1]


def test_moyal_on_canonical_pair():
    q, p = P.q(1), P.p(1)
    assert moyal_product(q, p) == P.parse("q1 p1 + 1/2*i * hbar", 1)
    assert moyal_product(p, q) == P.parse("q1 p1 - 1/2*i * hbar", 1)
    assert moyal_product(q * q, p * p) - moyal_product(p * p, q * q) == P.parse("4*i * q1 p1 hbar", 1)


def test_magnetic_product_frozen_value():
    F = MagneticForm.from_B("1 + q1")
    out = magnetic_weyl_product(P.parse("p1^2", 2), P.parse("p2", 2), F)
    assert out == P.parse("p1^2 p2 + i * p1 hbar + i * q1 p1 hbar + 1/6 * hbar^2", 2)


def test_momentum_commutator_is_field(linear_B):
    p1, p2 = P.p(2, 1), P.p(2, 2)
    c = magnetic_weyl_product(p1, p2, linear_B) - magnetic_weyl_product(p2, p1, linear_B)
    # [p1, p2] = i hbar F_21
    assert c == P.parse("i * hbar", 2) * P.parse("1 + q1/2 - q2/3", 2)


@pytest.mark.parametrize("tau", TAUS)
def test_commutation_relations_tau(tau, linear_B):
    assert commutation_defects(lambda f, g: tau_magnetic_product(f, g, tau, linear_B), linear_B) == 0


def test_commutation_relations_random_ordering(rng):
    Z = MagneticForm.zero(2)
    for _ in range(3):
        M = OrderingMatrix.random(2, rng)
        assert commutation_defects(lambda f, g: m_ordered_product(f, g, M), Z) == 0


def test_associativity_linear_field(rng, linear_B):
    for degree in (3, 2):
        f, g, h = (random_symbol(rng, 2, degree) for _ in range(3))
        lhs = magnetic_weyl_product(magnetic_weyl_product(f, g, linear_B), h, linear_B)
        assert lhs == magnetic_weyl_product(f, magnetic_weyl_product(g, h, linear_B), linear_B)
    assert lhs == n_factor_product([f, g, h], linear_B)


def test_associativity_quadratic_field(rng):
    F = MagneticForm.from_B("q1^2 - q1*q2 + 2")
    f, g, h = (random_symbol(rng, 2, 3) for _ in range(3))
    lhs = magnetic_weyl_product(magnetic_weyl_product(f, g, F), h, F)
    assert lhs == magnetic_weyl_product(f, magnetic_weyl_product(g, h, F), F)


def test_zero_field_reduces_to_moyal():
    Z = MagneticForm.zero(2)
    mons = [P.from_terms(2, {(qe, pe, 0): 1}) for qe, pe in monomials(2, 3)]
    for f in mons[::3]:
        for g in mons[1::3]:
            assert magnetic_weyl_product(f, g, Z) == moyal_product(f, g)


def test_series_coefficients_frozen():
    assert series_coefficient(0, 0) == 1
    assert series_coefficient(0, 1) == Fraction(-1, 3)
    assert series_coefficient(1, 1) == 0
    for s in range(4):
        for m in range(4):
            assert series_coefficient(s, m) == series_coefficient_integral(s, m)


def test_hbar_series_matches_exact(rng, linear_B):
    for _ in range(3):
        f, g = random_symbol(rng, 2, 4), random_symbol(rng, 2, 4)
        s = hbar_series_product(f, g, linear_B, 4)
        e = magnetic_weyl_product(f, g, linear_B)
        assert all(s.coeffs[k] == e.hbar_coefficient(k) for k in range(5))


def test_classical_limit_is_bracket(rng, linear_B):
    f, g = random_symbol(rng, 2, 3), random_symbol(rng, 2, 3)
    c = magnetic_weyl_product(f, g, linear_B) - magnetic_weyl_product(g, f, linear_B)
    # [f, g] = -i hbar {f, g}_F + O(hbar^3): the hbar^2 part vanishes
    assert c.hbar_coefficient(0).is_zero()
    assert c.hbar_coefficient(1) == poisson_bracket_F(f, g, linear_B).scale(-1j)
    assert c.hbar_coefficient(2).is_zero()


def test_bracket_jacobi_needs_closed_form(rng, linear_B):
    f, g, h = (random_symbol(rng, 2, 3) for _ in range(3))
    assert jacobi_residual(f, g, h, linear_B).is_zero()
    # every 2-form in two dimensions is closed
    assert jacobi_residual(f, g, h, [[0, "q2"], ["-q2", 0]]).is_zero()
    non_closed = [[0, "q3", 0], ["-q3", 0, "q1"], [0, "-q1", 0]]
    p1, p2, p3 = P.p(3, 1), P.p(3, 2), P.p(3, 3)
    assert not jacobi_residual(p1, p2, p3, non_closed).is_zero()


def test_weyl_symbol_properties(rng, linear_B):
    f = random_symbol(rng, 2, 3)
    g = random_symbol(rng, 2, 3)
    # real symbols: conj(f * g) = conj(g) * conj(f)
    assert magnetic_weyl_product(f, g, linear_B).conj() == magnetic_weyl_product(g.conj(), f.conj(), linear_B)
    # products change sign of odd hbar powers under reversal
    a = magnetic_weyl_product(f, g, linear_B)
    b = magnetic_weyl_product(g, f, linear_B)
    assert all((a.hbar_coefficient(k) - (-1) ** k * b.hbar_coefficient(k)).is_zero() for k in range(5))


@pytest.mark.parametrize("tau", [0, Fraction(1, 4), 1])
def test_tau_products_are_conjugate_to_weyl(tau, linear_B):
    f = P.parse("q1 p1^2 + p2", 2)
    g = P.parse("p1 p2 q2 + q1^2", 2)

    def T(s, d="fwd"):
        return ordering_transform(s, "tau", d, F=linear_B, tau=tau)

    assert T(tau_magnetic_product(f, g, tau, linear_B)) == magnetic_weyl_product(T(f), T(g), linear_B)
    assert T(T(f), "inv") == f
    assert tau_magnetic_product(f, g, tau, linear_B) == tau_magnetic_product(f, g, tau, linear_B, method="conjugate")


def test_standard_ordering_on_canonical_pair():
    M = OrderingMatrix.tau_n(1, 0)
    q, p = P.q(1), P.p(1)
    assert m_ordered_product(q, p, M) == P.parse("q1 p1", 1)
    assert m_ordered_product(p, q, M) == P.parse("q1 p1 - i * hbar", 1)
    assert ordering_transform(q * p, "tau", tau=0) == P.parse("q1 p1 + 1/2*i * hbar", 1)


def test_m_ordering_methods_agree(rng):
    M = OrderingMatrix.random(1, rng)
    f, g = P.parse("p1^2 q1", 1), P.parse("q1^2 p1 + p1", 1)
    assert m_ordered_product(f, g, M) == m_ordered_product(f, g, M, method="conjugate")


def test_ordering_matrix_validation():
    with pytest.raises(ValueError):
        OrderingMatrix([[1, 0], [0, 1]])
    with pytest.raises(ValueError):
        OrderingMatrix([[0, 0, 0]])
    assert OrderingMatrix.tau_n(2, Fraction(1, 2)).is_zero()


def test_mixed_orderings(linear_B):
    f = P.parse("q1 p1^2 + p2", 2)
    g = P.parse("p1 p2 q2 + q1^2", 2)
    M = OrderingMatrix.tau_n(2, Fraction(1, 4))
    assert mixed_ordering_product([f, g], [M, M], M, linear_B) == tau_magnetic_product(f, g, Fraction(1, 4), linear_B)
    assert mixed_ordering_product([f, g], [None, None], None, linear_B) == magnetic_weyl_product(f, g, linear_B)


def test_regular_representation(linear_B):
    f = P.parse("p1^2 p2 + q1 p2", 2)
    g = P.parse("p2^2 p1 + q2 q1 p1", 2)
    R = RegularRep(2, linear_B)
    assert R.left(f, g) == magnetic_weyl_product(f, g, linear_B)
    assert R.right(g, f) == magnetic_weyl_product(f, g, linear_B)
    assert all(v.is_zero() for v in R.commutation_residuals(P.parse("p1 p2 q1 + p2^2", 2)).values())


def test_weyl_apply_symmetrizes():
    q, p = P.q(1), P.p(1)

    def letters(kind, j):
        if kind == "q":
            return lambda s: moyal_product(q, s)
        return lambda s: moyal_product(p, s)

    one = P.const(1, 1)
    assert weyl_apply(q * p, letters, one) == moyal_product(q * p, one)


def _gauss(A, c):
    def f(q, p):
        X = np.stack(np.broadcast_arrays(*q, *p), -1) - c
        return np.exp(-np.einsum("...i,ij,...j->...", X, A, X))
    return f


@pytest.mark.parametrize("n, N, B", [(1, 128, None), (2, 16, 0.5)])
def test_grid_product_matches_gaussian_closed_form(n, N, B):
    d = 2 * n
    A1 = np.eye(d) * 0.9
    A2 = np.eye(d) * 0.7
    A2[0, n] = A2[n, 0] = 0.1
    c1, c2 = np.zeros(d), np.linspace(-0.2, 0.3, d)
    hbar, dq = 1.0, 0.1 if n == 1 else 0.4
    f = GridSymbol.sample(_gauss(A1, c1), n, N, dq, hbar)
    g = GridSymbol.sample(_gauss(A2, c2), n, N, dq, hbar)
    Fm = None if B is None else np.array([[0, B], [-B, 0]])
    F = None if B is None else MagneticForm.constant(2, [[0, B], [-B, 0]])
    k = grid_magnetic_product(f, g, F)
    X = np.stack(np.broadcast_arrays(*f.mesh()), -1)
    ref = gaussian_star(A1, c1, A2, c2, gaussian_weyl_phase(n, hbar, Fm), X)
    s = tuple(slice(N // 4, 3 * N // 4) for _ in range(d))
    assert np.abs(k.data - ref)[s].max() / np.abs(ref).max() < (1e-6 if n == 1 else 2e-5)


def test_grid_product_rejects_mismatched_grids():
    f = GridSymbol.sample(lambda q, p: np.exp(-q[0] ** 2 - p[0] ** 2), 1, 32, 0.2, 1.0)
    g = GridSymbol.sample(lambda q, p: np.exp(-q[0] ** 2 - p[0] ** 2), 1, 32, 0.25, 1.0)
    with pytest.raises(ValueError):
        grid_magnetic_product(f, g)
