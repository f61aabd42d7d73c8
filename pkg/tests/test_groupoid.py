from fractions import Fraction

import numpy as np
import pytest

from magstar.geometry import MagneticForm
from magstar.groupoid import (GroupoidElement, MultiplicabilityError, as_float, groupoid_multiply,
                              inverse, left_right_maps, poisson_map_check, reconstruct,
                              tau_wing_areas, unit, wing_base_residuals, y_rule)
from magstar.groupoid import random_rational_point as rp
from magstar.starprod import OrderingMatrix
from magstar.symbols import PolySymbol as P

h = Fraction(1, 2)


def test_left_right_frozen():
    x, y = [0, 0, 0, 0], [0, 0, 1, 0]
    assert left_right_maps(x, y, MagneticForm.zero(2)) == ([-h, 0, 0, 0], [h, 0, 0, 0])
    # constant B pushes the momenta apart
    assert left_right_maps(x, y, MagneticForm.from_B(1)) == ([-h, 0, 0, h], [h, 0, 0, -h])
    l, r = left_right_maps([1, 2, 0, 0], [0, 0, 1, 1], MagneticForm.from_B("1 + q1/2 - q2/3"))
    assert l == [h, Fraction(3, 2), Fraction(-29, 72), Fraction(29, 72)]
    assert r == [Fraction(3, 2), Fraction(5, 2), Fraction(31, 72), Fraction(-31, 72)]


def test_standard_ordering_puts_left_on_base():
    l, r = left_right_maps([0] * 4, [0, 0, 1, 0], MagneticForm.zero(2), OrderingMatrix.tau_n(2, 0))
    assert l == [0, 0, 0, 0]
    assert r == [1, 0, 0, 0]


@pytest.mark.parametrize("M", [None, OrderingMatrix.tau_n(2, Fraction(1, 3)),
                               OrderingMatrix([[0, 0, 1, 0], [0, 0, 0, -2],
                                               [3, 0, 0, 0], [0, 1, 0, 0]])])
def test_reconstruct_inverts_maps(rng, linear_B, M):
    for _ in range(4):
        x, y = rp(rng, 4), rp(rng, 4)
        l, r = left_right_maps(x, y, linear_B, M)
        assert reconstruct(l, r, linear_B, M) == (x, y)


def test_dimension_checks(linear_B):
    with pytest.raises(ValueError):
        left_right_maps([0, 0], [0, 0], linear_B)
    with pytest.raises(ValueError):
        left_right_maps([0, 0, 0, 0], [0, 0], linear_B)
    with pytest.raises(ValueError):
        left_right_maps([0] * 4, [0] * 4, linear_B, OrderingMatrix.tau(0))


def test_multiplication_and_y_rule(rng, linear_B):
    for _ in range(3):
        l2, mid, r1 = rp(rng, 4), rp(rng, 4), rp(rng, 4)
        m2 = GroupoidElement.from_lr(l2, mid, linear_B)
        m1 = GroupoidElement.from_lr(mid, r1, linear_B)
        m = groupoid_multiply(m2, m1)
        assert (m.l, m.r) == (l2, r1)
        assert m.y == y_rule(m2, m1)


def test_y_rule_is_plain_sum_for_constant_field(rng):
    F = MagneticForm.from_B(3)
    l2, mid, r1 = rp(rng, 4), rp(rng, 4), rp(rng, 4)
    m2, m1 = GroupoidElement.from_lr(l2, mid, F), GroupoidElement.from_lr(mid, r1, F)
    assert groupoid_multiply(m2, m1).y == [a + b for a, b in zip(m1.y, m2.y)]


def test_float_multiplication_tolerance(rng, linear_B):
    l2, mid, r1 = (list(as_float(rp(rng, 4))) for _ in range(3))
    m2 = GroupoidElement.from_lr(l2, mid, linear_B)
    m1 = GroupoidElement.from_lr([v + 1e-13 for v in mid], r1, linear_B)
    m = groupoid_multiply(m2, m1)
    assert np.abs(np.array(m.y, float) - np.array(y_rule(m2, m1), float)).max() < 1e-10
    bad = GroupoidElement.from_lr([v + 1e-3 for v in mid], r1, linear_B)
    with pytest.raises(MultiplicabilityError) as exc:
        groupoid_multiply(m2, bad)
    assert exc.value.defect == pytest.approx(1e-3)


def test_exact_mismatch_rejected(rng, linear_B):
    a = GroupoidElement.from_lr(rp(rng, 4), [0, 0, 0, 0], linear_B)
    b = GroupoidElement.from_lr([0, 0, 0, Fraction(1, 10**6)], rp(rng, 4), linear_B)
    with pytest.raises(MultiplicabilityError):
        groupoid_multiply(a, b)


def test_units_and_inverses(rng, linear_B):
    m = GroupoidElement.from_lr(rp(rng, 4), rp(rng, 4), linear_B)
    e_l, e_r = unit(m.l, linear_B), unit(m.r, linear_B)
    assert all(v == 0 for v in e_l.y)
    assert e_l.x == m.l
    assert groupoid_multiply(e_l, m).y == m.y
    assert groupoid_multiply(m, e_r).y == m.y
    prod = groupoid_multiply(m, inverse(m))
    assert prod.l == prod.r == m.l
    assert all(v == 0 for v in prod.y)


def test_associativity(rng, linear_B):
    pts = [rp(rng, 4) for _ in range(4)]
    m3, m2, m1 = (GroupoidElement.from_lr(pts[i], pts[i + 1], linear_B) for i in range(3))
    a = groupoid_multiply(groupoid_multiply(m3, m2), m1)
    b = groupoid_multiply(m3, groupoid_multiply(m2, m1))
    assert (a.x, a.y) == (b.x, b.y)


def test_wing_residuals_vanish(rng, linear_B):
    l2, mid, r1 = rp(rng, 4), rp(rng, 4), rp(rng, 4)
    m2, m1 = GroupoidElement.from_lr(l2, mid, linear_B), GroupoidElement.from_lr(mid, r1, linear_B)
    base, wings = wing_base_residuals(m2, m1)
    assert base == 0
    assert all(w == 0 for w in wings)


def test_tau_wing_area_shift(rng):
    F = MagneticForm.from_B("q1^2 - q1*q2 + 2")
    for tau in (Fraction(1, 4), Fraction(2, 3)):
        a, b = tau_wing_areas(rp(rng, 4), rp(rng, 4), F, tau)
        assert a == b


def _coords(n):
    return [P.q(n, j + 1) for j in range(n)] + [P.p(n, j + 1) for j in range(n)]


def _all_zero(res):
    return not any(c for trip in res for c in trip)


@pytest.mark.parametrize("M", [None, OrderingMatrix.tau_n(2, Fraction(1, 4))])
def test_left_map_is_poisson(linear_B, M):
    tests = _coords(2) + [P.parse("q1*p1 + p2^2", 2)]
    assert _all_zero(poisson_map_check(tests, linear_B, M))


def test_poisson_fails_without_potential(linear_B):
    res = poisson_map_check(_coords(2), linear_B, drop_potential=True)
    assert not _all_zero(res)


def test_time_dependent_field_poisson(ramp_field):
    assert _all_zero(poisson_map_check(_coords(2), ramp_field, t=Fraction(1, 2)))
