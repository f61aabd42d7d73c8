"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line; the lines are printed in the
terminal summary (see ``conftest.py``) and when the module is run directly.
"""
import time
import warnings
from fractions import Fraction

import numpy as np
import pytest

from magstar.cli import (_fit, commutation_defects, random_symbol, run, trotter_errors,
                         wkb_husimi_errors)
from magstar.dynamics import (Hamiltonian, contact_checks, magnetic_flow, marinov_check,
                              residuals_vanish, virtual_flow, wkb_symbol)
from magstar.geometry import (MagneticForm, flux_gradient_residual, gauge_relation_residual,
                              potential_identities, tetrahedron_residual, valatin_potential)
from magstar.groupoid import (GroupoidElement, as_float, groupoid_multiply, left_right_maps,
                              poisson_map_check, reconstruct, tau_wing_areas, wing_base_residuals,
                              y_rule)
from magstar.groupoid import random_rational_point as rp
from magstar.oracle import (GaugeChart, Grid, extract_symbol, product_referee, quantize_function,
                            relative_error)
from magstar.starprod import (OrderingMatrix, hbar_series_product, m_ordered_product,
                              magnetic_weyl_product, moyal_product, tau_magnetic_product)
from magstar.symbols import PolySymbol as P
from magstar.symbols import monomials

LINES = {}


def record(k, ok, detail):
    LINES[k] = f"{'PASS' if ok else 'FAIL'}  criterion {k:>2}: {detail}"
    return ok


def _nonzero(items):
    return sum(1 for v in items if v != 0 and not (hasattr(v, "is_zero") and v.is_zero()))


def _flat(v):
    if isinstance(v, (list, tuple)):
        for w in v:
            yield from _flat(w)
    else:
        yield v


LINEAR = MagneticForm.from_B("1 + q1/2 - q2/3")
QUADRATIC = MagneticForm.from_B("q1^2 - q1*q2 + 2")


def test_commutation_relations():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    bad = 0
    for F in (LINEAR, QUADRATIC):
        bad += commutation_defects(lambda f, g: magnetic_weyl_product(f, g, F), F)
        for tau in (0, Fraction(1, 4), Fraction(1, 2), 1):
            bad += commutation_defects(lambda f, g: tau_magnetic_product(f, g, tau, F), F)
    Z = MagneticForm.zero(2)
    for _ in range(5):
        M = OrderingMatrix.random(2, rng)
        bad += commutation_defects(lambda f, g: m_ordered_product(f, g, M), Z)
        bad += commutation_defects(lambda f, g: m_ordered_product(f, g, M, "conjugate"), Z)
    dt = time.perf_counter() - t0
    assert record(1, bad == 0 and dt < 10, f"commutation relations, {bad} nonzero residuals, {dt:.1f} s")


def test_associativity():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    bad = 0
    for k in range(100):
        n = 1 + k % 2
        F = LINEAR if n == 2 else MagneticForm.zero(1)
        f, g, h = (random_symbol(rng, n, 4) for _ in range(3))
        lhs = magnetic_weyl_product(magnetic_weyl_product(f, g, F), h, F)
        bad += not (lhs - magnetic_weyl_product(f, magnetic_weyl_product(g, h, F), F)).is_zero()
    dt = time.perf_counter() - t0
    assert record(2, bad == 0 and dt < 60, f"associativity, {bad}/100 failing triples, {dt:.1f} s")


def test_zero_field_reduction():
    bad = 0
    pairs = 0
    for n in (1, 2):
        Z = MagneticForm.zero(n)
        mons = [P.from_terms(n, {(qe, pe, 0): 1}) for qe, pe in monomials(n, 6)]
        degs = [f.total_degree() for f in mons]
        for f, df in zip(mons, degs):
            for g, dg in zip(mons, degs):
                if n == 2 and df + dg > 6:
                    continue
                pairs += 1
                bad += not (magnetic_weyl_product(f, g, Z) - moyal_product(f, g)).is_zero()
    assert record(3, bad == 0, f"zero-field reduction, {bad}/{pairs} monomial pairs differ")


def test_hbar_series():
    rng = np.random.default_rng(4)
    bad = 0
    for F in (LINEAR, QUADRATIC):
        for _ in range(4):
            f, g = random_symbol(rng, 2, 3), random_symbol(rng, 2, 3)
            s = hbar_series_product(f, g, F, 4)
            e = magnetic_weyl_product(f, g, F)
            bad += sum(not (s.coeffs[k] - e.hbar_coefficient(k)).is_zero() for k in range(5))
    assert record(4, bad == 0, f"hbar series to order 4, {bad} mismatched coefficients")


def test_geometry_identities():
    rng = np.random.default_rng(5)
    fields = [LINEAR, QUADRATIC, MagneticForm(3, [[0, "1+q3", "q2"], ["-1-q3", 0, 2], ["-q2", -2, 0]])]
    ids = orth = tet = 0
    for F in fields:
        n = F.n
        for _ in range(3):
            q, qp, u = rp(rng, n), rp(rng, n), rp(rng, n)
            ids += _nonzero(_flat(potential_identities(F, q, qp)))
            orth += sum(a * (x - y) for a, x, y in zip(valatin_potential(F, q, qp), q, qp)) != 0
            tet += _nonzero(_flat(tetrahedron_residual(F, q, qp, u)))
    grad = sum(_nonzero(_flat(flux_gradient_residual(F))) for F in fields)
    wings = shift = tau = 0
    for F in fields[:2]:
        for _ in range(3):
            l2, mid, r1 = rp(rng, 4), rp(rng, 4), rp(rng, 4)
            s, w = wing_base_residuals(GroupoidElement.from_lr(l2, mid, F), GroupoidElement.from_lr(mid, r1, F))
            shift += s != 0
            wings += _nonzero(w)
            a, b = tau_wing_areas(l2, r1, F, Fraction(1, 3))
            tau += a != b
    total = ids + orth + tet + grad + wings + shift + tau
    assert record(5, total == 0, f"geometry identities, {total} nonzero residuals (exact)")


def test_groupoid():
    rng = np.random.default_rng(6)
    rt = 0
    for M in (None, OrderingMatrix.tau_n(2, Fraction(1, 4))):
        for _ in range(5):
            x, y = rp(rng, 4), rp(rng, 4)
            rt += reconstruct(*left_right_maps(x, y, LINEAR, M), LINEAR, M) != (x, y)
    dev = 0.0
    for _ in range(5):
        l2, mid, r1 = rp(rng, 4), rp(rng, 4), rp(rng, 4)
        m2, m1 = GroupoidElement.from_lr(l2, mid, LINEAR), GroupoidElement.from_lr(mid, r1, LINEAR)
        dev = max(dev, max(abs(float(a - b)) for a, b in zip(groupoid_multiply(m2, m1).y, y_rule(m2, m1))))
        f2 = GroupoidElement.from_lr(list(as_float(l2)), list(as_float(mid)), LINEAR)
        f1 = GroupoidElement.from_lr(list(as_float(mid)), list(as_float(r1)), LINEAR)
        dev = max(dev, float(np.abs(np.array(groupoid_multiply(f2, f1).y, float)
                                    - np.array(y_rule(f2, f1), float)).max()))
    tests = [P.from_terms(2, {(qe, pe, 0): 1}) for qe, pe in monomials(2, 2) if sum(qe) + sum(pe)]
    res = _nonzero(_flat(poisson_map_check(tests, LINEAR)))
    ok = rt == 0 and dev < 1e-10 and res == 0
    assert record(6, ok, f"groupoid, {rt} round-trip failures, y-rule {dev:.1e}, {res} Poisson residuals")


def _bump(q, p):
    return (1 + q[0] * p[1]) * np.exp(-(q[0] ** 2 + q[1] ** 2) - (p[0] ** 2 + p[1] ** 2))


def test_gauge_invariance():
    F = MagneticForm.from_B(1)
    gr = Grid(2, 16, 0.35)
    cs, cl = GaugeChart.symmetric(F, gr, 0.5), GaugeChart.landau(F, gr, 0.5)
    Ks, Kl = quantize_function(_bump, cs), quantize_function(_bump, cl)
    d = relative_error(extract_symbol(Ks, cs, band="half").data, extract_symbol(Kl, cl, band="half").data, 2)
    c = relative_error(extract_symbol(Ks, cs, band="half", gauge_phase=False).data,
                       extract_symbol(Kl, cl, band="half", gauge_phase=False).data, 2)
    assert record(7, d < 1e-8 and c > 1e-2, f"gauge invariance {d:.1e}, control without phase {c:.2f}")


def _cut(q, p):
    return np.exp(-sum(v ** 2 for v in q) - sum(v ** 2 for v in p))


def _g1(q, p):
    return (q[0] ** 2 * p[-1] + q[0] + p[0] ** 3) * _cut(q, p)


def _g2(q, p):
    return (p[0] - q[-1] * p[0] + 1) * _cut(q, p)


def test_product_referee():
    t0 = time.perf_counter()
    e1, _, _ = product_referee(_g1, _g2, GaugeChart.symmetric(MagneticForm.zero(1), Grid(1, 512, 0.025), 0.5))
    e2, _, _ = product_referee(_g1, _g2, GaugeChart.symmetric(MagneticForm.from_B("1 + q1/5"),
                                                              Grid(2, 32, 0.25), 0.5))
    dt = time.perf_counter() - t0
    ok = e1 < 1e-5 and e2 < 1e-5 and dt < 300
    assert record(8, ok, f"product referee n=1 N=512 {e1:.1e}, n=2 N=32 {e2:.1e}, {dt:.0f} s")


def test_dynamics():
    t0 = time.perf_counter()
    H = Hamiltonian.nonrelativistic(2)
    x0 = np.array([0.3, -0.2, 0.5, 0.7])
    cyc = float(np.abs(magnetic_flow(H, MagneticForm.from_B(2), x0, np.pi).final - x0).max())
    w = wkb_symbol(H, MagneticForm.zero(2), 0.7, [0.1, 0.2, 0.3, 0.4])
    free = abs(w.value(0.1) - np.exp(-0.7j * 0.25 / 2 / 0.1))
    hbars = np.array([0.2, 0.1, 0.05])
    phase, modulus = wkb_husimi_errors(tuple(hbars))
    wkb_order, _ = _fit(hbars, phase)
    Hq = P.parse("(p1^2+p2^2)/2", 2)
    mar = max(marinov_check(Hq, F, 0.3, 0.4, [0.2, 0.1, 0.5, -0.3])[0]
              for F in (MagneticForm.from_B(1), MagneticForm.from_B("1 + q1/2")))
    Ns = np.array([4, 8, 16, 32])
    slope, _ = _fit(Ns, trotter_errors(tuple(Ns)))
    trot_order = -slope  # error ~ (1/N)^order
    dt = time.perf_counter() - t0
    ok = (cyc < 1e-8 and free < 1e-10 and abs(wkb_order - 1) <= 0.2 and mar < 1e-8
          and abs(trot_order - 1) <= 0.2 and dt < 600)
    assert record(9, ok, f"dynamics, cyclotron {cyc:.1e}, free {free:.1e}, WKB order {wkb_order:.2f}, "
                         f"phase addition {mar:.1e}, Trotter order {trot_order:.2f}, {dt:.0f} s")


def test_electromagnetics(ramp_field):
    H = Hamiltonian.nonrelativistic(2)
    gr = _nonzero(gauge_relation_residual(ramp_field, Fraction(1, 2), [Fraction(1, 3), 2], [-1, Fraction(1, 5)]))
    Fs = MagneticForm(2, [[0, "-1 - q1/2"], ["1 + q1/2", 0]], E=["1/2", "q2/3"])
    pieces = wkb_symbol(H, Fs, 0.6, [0.2, 0.1, -0.3, 0.4]).pieces
    routes = abs(pieces["S_action"] - pieces["S_phase_space"])
    blown = abs(pieces["S_action"] - pieces["S_blown_up"])
    lam = virtual_flow(ramp_field, [Fraction(1, 3), Fraction(1, 2), 1, 2], Fraction(3, 2))
    virt = lam != [Fraction(1, 3), Fraction(1, 2), Fraction(7, 4), 2]
    contact = residuals_vanish(contact_checks(ramp_field, P.parse("(p1^2+p2^2)/2 + q1*p2", 2)))
    ok = gr == 0 and routes < 1e-9 and blown < 1e-9 and not virt and contact
    assert record(10, ok, f"electromagnetics, gauge relation {gr}, routes {routes:.1e}, "
                          f"blown-up {blown:.1e}, virtual flow {'exact' if not virt else 'off'}, "
                          f"contact {'zero' if contact else 'nonzero'}")


def test_verify_determinism(tmp_path, capsys):
    codes, blobs = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for k in range(2):
            d = tmp_path / str(k)
            codes.append(run(["verify", "--suite", "all", "--out", str(d)]))
            blobs.append((d / "verify_report.json").read_bytes())
    capsys.readouterr()
    same = blobs[0] == blobs[1]
    ok = codes == [0, 0] and same
    assert record(11, ok, f"verify --suite all, exit codes {codes}, reports {'identical' if same else 'differ'}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q"]))
