from fractions import Fraction

import numpy as np
import pytest

from magstar.geometry import (FieldError, MagneticForm, Triangle, WingMembrane, electric_potentials,
                              flux_gradient_residual, flux_midpoint_triangle, flux_triangle,
                              potential_identities, gauge_relation_residual, magnetic_shift, polygon_area,
                              symplectic_area, tetrahedron_residual, triangle_area,
                              valatin_potential, wing_vertex)
from magstar.groupoid import random_rational_point as rp

FIELDS = [
    MagneticForm.from_B(3),
    MagneticForm.from_B("1 + q1/2 - q2/3"),
    MagneticForm.from_B("q1^2 - q1*q2 + 2"),
    MagneticForm(3, [[0, "1+q3", "q2"], ["-1-q3", 0, 2], ["-q2", -2, 0]]),
]


def _zero(values):
    flat = []
    for v in values:
        flat.extend(_zero_items(v))
    return all(x == 0 for x in flat)


def _zero_items(v):
    if isinstance(v, (list, tuple)):
        out = []
        for w in v:
            out.extend(_zero_items(w))
        return out
    return [v]


def test_field_construction_checks():
    with pytest.raises(FieldError):
        MagneticForm(2, [[0, 1], [1, 0]])
    with pytest.raises(FieldError):
        MagneticForm(3, [[0, "q3", 0], ["-q3", 0, "q1"], [0, "-q1", 0]])
    with pytest.raises(FieldError):
        MagneticForm(2, [[0, "-t"], ["t", 0]], E=["-q2", 0])
    F = MagneticForm(2, [[0, "-t"], ["t", 0]], E=["q2", 0])
    assert F.time_dependent
    assert F.faraday_defect() == []


def test_field_json_round_trip():
    F = MagneticForm(2, [[0, "-1 - q1/2"], ["1 + q1/2", 0]], E=["1/2", "q2/3"])
    back = MagneticForm.from_json(F.to_json())
    assert back.F == F.F and back.E == F.E


@pytest.mark.parametrize("text, key", [
    ('{"n": 2, "F": [["0", "1"], ["-1", "0"]], "colour": 1}', "colour"),
    ('{"n": 2, "F": [["0", "1+"], ["-1", "0"]]}', "F[0][1]"),
    ('{"n": 2, "F": [["0", "1"]]}', "'F'"),
    ('{"F": []}', "'n'"),
    ('{"n": 2, ', "invalid JSON"),
])
def test_field_json_errors_name_the_key(text, key):
    with pytest.raises(FieldError, match=key.replace("[", r"\[").replace("]", r"\]")):
        MagneticForm.from_json(text)


def test_numeric_field_matrix():
    F = MagneticForm.from_B("1 + q1")
    M = F.matrix(np.array([2.0, 0.0]))
    assert np.allclose(M, [[0, -3], [3, 0]])


def test_potential_for_constant_field_is_half_chord():
    # constant F: A(q, q') = F (q - q') / 2
    A = valatin_potential(MagneticForm.from_B(3), [1, 2], [Fraction(1, 2), 0])
    assert A == [Fraction(-3), Fraction(3, 4)]
    assert valatin_potential(MagneticForm.from_B("q1"), [1, 2], [Fraction(1, 2), 0]) == [
        Fraction(-5, 6), Fraction(5, 24)]


def test_potential_vanishes_on_the_diagonal(linear_B):
    assert valatin_potential(linear_B, [Fraction(1, 3), 2], [Fraction(1, 3), 2]) == [0, 0]


@pytest.mark.parametrize("F", FIELDS)
def test_potential_orthogonal_to_chord(F, rng):
    for _ in range(5):
        q, qp = rp(rng, F.n), rp(rng, F.n)
        A = valatin_potential(F, q, qp)
        assert sum(a * (x - y) for a, x, y in zip(A, q, qp)) == 0


@pytest.mark.parametrize("F", FIELDS)
def test_two_point_potential_identities(F, rng):
    for _ in range(3):
        assert _zero(potential_identities(F, rp(rng, F.n), rp(rng, F.n)))


@pytest.mark.parametrize("F", FIELDS)
def test_flux_gradient_is_potential_difference(F):
    assert all(p == 0 for p in flux_gradient_residual(F))


@pytest.mark.parametrize("F", FIELDS)
def test_stokes_tetrahedron(F, rng):
    for _ in range(3):
        assert tetrahedron_residual(F, rp(rng, F.n), rp(rng, F.n), rp(rng, F.n)) == 0


@pytest.mark.parametrize("F", FIELDS[:3])
def test_flux_methods_agree(F, rng):
    for _ in range(3):
        tri = Triangle(tuple(rp(rng, 2)), tuple(rp(rng, 2)), tuple(rp(rng, 2)))
        a = flux_triangle(F, tri, method="simplex")
        assert a == flux_triangle(F, tri, method="chord")
        P0, P1, P2 = tri.vertices()
        mid = tuple((a_ + b_) / 2 for a_, b_ in zip(P1, P2))
        u2 = tuple(b_ - c_ for b_, c_ in zip(P0, P2))
        u1 = tuple(b_ - c_ for b_, c_ in zip(P1, P0))
        assert flux_midpoint_triangle(F, mid, u2, u1) == flux_triangle(F, Triangle.from_midpoint(mid, u2, u1))


def test_flux_of_linear_field_on_unit_triangle():
    F = MagneticForm.from_B("q1")
    # B = q1 integrated over the unit right triangle is 1/6; F_12 = -B
    assert flux_triangle(F, Triangle((0, 0), (1, 0), (0, 1))) == Fraction(1, 6)
    assert flux_triangle(F, Triangle((0, 0), (0, 1), (1, 0))) == Fraction(-1, 6)
    with pytest.raises(ValueError):
        flux_triangle(F, Triangle((0, 0), (1, 0), (0, 1)), method="bogus")


def test_flat_areas_and_polygons():
    Z = MagneticForm.zero(1)
    assert triangle_area(Z, [0, 0], [1, 0], [0, 1]) == Fraction(-1, 2)
    square = [[0, 0], [1, 0], [1, 1], [0, 1]]
    assert polygon_area(Z, square) == -1
    assert symplectic_area([([0, 0], [1, 0], [0, 1])], Z) == Fraction(-1, 2)
    with pytest.raises(ValueError):
        symplectic_area([([0, 0], [1, 0])], Z)


def test_magnetic_shift_and_wing_vertex(linear_B, rng):
    l, r = rp(rng, 4), rp(rng, 4)
    As, Aa = magnetic_shift(linear_B, l[:2], r[:2])
    Alr, Arl = valatin_potential(linear_B, l[:2], r[:2]), valatin_potential(linear_B, r[:2], l[:2])
    assert As == [(a + b) / 2 for a, b in zip(Alr, Arl)]
    assert Aa == [a - b for a, b in zip(Alr, Arl)]
    x = wing_vertex(linear_B, l, r)
    assert x[:2] == [(a + b) / 2 for a, b in zip(l[:2], r[:2])]
    assert x[2:] == [(a + b) / 2 + s for a, b, s in zip(l[2:], r[2:], As)]
    assert wing_vertex(linear_B, l, r, magnetic=False) == [(a + b) / 2 for a, b in zip(l, r)]


def test_wing_membrane_area(linear_B, rng):
    base = (rp(rng, 4), rp(rng, 4), rp(rng, 4))
    l, r = rp(rng, 4), rp(rng, 4)
    x = wing_vertex(linear_B, l, r)
    m = WingMembrane(base, ((l, x, r),))
    assert symplectic_area(m, linear_B) == triangle_area(linear_B, *base) + triangle_area(linear_B, r, x, l)


def test_electric_potential_and_mixed_identity(ramp_field, rng):
    for _ in range(3):
        t = Fraction(int(rng.integers(-5, 6)), 3)
        q, qp = rp(rng, 2), rp(rng, 2)
        assert all(v == 0 for v in gauge_relation_residual(ramp_field, t, q, qp))
    # E = (q2, 0) along (0, 1) -> (2, 1); F frozen at t = 1/2 is constant
    beta, alpha = electric_potentials(ramp_field, Fraction(1, 2), [0, 1], [2, 1])
    assert beta == 2
    assert alpha == [0, Fraction(-1, 2)]
