import numpy as np
import pytest

from magstar.geometry import FieldError, MagneticForm
from magstar.oracle import (GaugeChart, Grid, OracleError, apply_poly, coherent_average,
                            evolution_referee, evolution_symbol, extract_symbol,
                            gaussian_star, gaussian_weyl_phase, interior,
                            landau_husimi, landau_level_symbol, product_referee, quantize,
                            quantize_function, relative_error, state_referee)
from magstar.symbols import PolySymbol as P

B1 = MagneticForm.from_B(1)


def _bump(q, p):
    return (1 + q[0] * p[1]) * np.exp(-(q[0] ** 2 + q[1] ** 2) - (p[0] ** 2 + p[1] ** 2))


@pytest.fixture(scope="module")
def chart32():
    return GaugeChart.symmetric(B1, Grid(2, 32, 0.3), 0.5)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(3, 8, 0.1)
    with pytest.raises(ValueError):
        Grid(1, 7, 0.1)
    with pytest.raises(ValueError):
        GaugeChart.symmetric(B1, Grid(1, 8, 0.1), 1.0)
    ramp = MagneticForm(2, [[0, "-t"], ["t", 0]], E=["q2", 0])
    with pytest.raises(FieldError):
        GaugeChart.symmetric(ramp, Grid(2, 8, 0.1), 1.0)


def test_grid_layout():
    g = Grid(1, 8, 0.5, center=1.0)
    assert g.axis()[0] == -1.0
    assert g.axis()[4] == 1.0
    assert Grid(2, 4, 1.0).points().shape == (16, 2)


def test_momentum_commutator(chart32):
    gr = chart32.grid
    psi = np.exp(-(gr.points() ** 2).sum(-1) / 2).reshape(gr.shape)
    p1, p2 = P.parse("p1", 2), P.parse("p2", 2)
    C = apply_poly(p1, chart32, apply_poly(p2, chart32, psi)) - apply_poly(p2, chart32, apply_poly(p1, chart32, psi))
    # [p1, p2] = i hbar F_21 = i hbar B
    assert np.linalg.norm(C - 0.5j * psi) / np.linalg.norm(psi) < 1e-3


def test_quantized_real_symbol_is_hermitian():
    chart = GaugeChart.landau(B1, Grid(2, 16, 0.35), 0.5)
    assert quantize(P.parse("p1^2 + q1*p2 + q2^2*p1", 2), chart).hermiticity_defect() < 1e-12


@pytest.mark.parametrize("ordering", ["weyl", ("tau", 0.25)])
def test_state_referee(chart32, ordering):
    f, g = P.parse("p1^2 + q1", 2), P.parse("q2*p1 + p2", 2)
    assert state_referee(f, g, chart32, ordering, width=0.7) < 1e-7


def test_state_referee_landau_chart():
    chart = GaugeChart.landau(B1, Grid(2, 32, 0.3), 0.5)
    assert state_referee(P.parse("p1^2 + q1", 2), P.parse("q2*p1 + p2", 2), chart, width=0.7) < 1e-7


def test_quantize_extract_round_trip():
    chart = GaugeChart.symmetric(B1, Grid(2, 16, 0.35), 0.5)
    s = extract_symbol(quantize_function(_bump, chart), chart, band="half")
    M = np.broadcast_arrays(*s.mesh())
    assert relative_error(s.data, _bump(M[:2], M[2:]), 2) < 1e-4


def test_gauge_invariance():
    gr = Grid(2, 16, 0.35)
    cs, cl = GaugeChart.symmetric(B1, gr, 0.5), GaugeChart.landau(B1, gr, 0.5)
    Ks, Kl = quantize_function(_bump, cs), quantize_function(_bump, cl)
    a, b = extract_symbol(Ks, cs, band="half"), extract_symbol(Kl, cl, band="half")
    assert relative_error(a.data, b.data, 2) < 1e-8
    a0 = extract_symbol(Ks, cs, band="half", gauge_phase=False)
    b0 = extract_symbol(Kl, cl, band="half", gauge_phase=False)
    assert relative_error(a0.data, b0.data, 2) > 1e-2


def test_product_referee_n1():
    def g1(q, p):
        return (q[0] ** 2 * p[0] + q[0] + p[0] ** 3) * np.exp(-q[0] ** 2 - p[0] ** 2)

    def g2(q, p):
        return (p[0] - q[0] * p[0] + 1) * np.exp(-q[0] ** 2 - p[0] ** 2)

    chart = GaugeChart.symmetric(MagneticForm.zero(1), Grid(1, 128, 0.1), 0.5)
    err, _, _ = product_referee(g1, g2, chart)
    assert err < 1e-5


def test_free_evolution_symbol():
    chart = GaugeChart(MagneticForm.zero(1), [0], Grid(1, 128, 0.2), 1.0, "free")
    s = evolution_symbol(P.parse("p1^2/2", 1), chart, 0.5, band="full")
    _, p = np.broadcast_arrays(*s.mesh())
    assert relative_error(s.data, np.exp(-0.25j * p ** 2), 1) < 1e-10


def test_evolution_referee():
    chart = GaugeChart.symmetric(MagneticForm.zero(1), Grid(1, 128, 0.2), 1.0)
    H = P.parse("p1^2/2 + q1^2/2", 1)
    sym, res = evolution_referee(H, chart, 0, band="full")
    assert res == 0.0
    assert np.abs(interior(sym.data, 1) - 1).max() < 1e-12
    _, res = evolution_referee(H, chart, 0.5)
    assert res < 1e-4
    with pytest.raises(OracleError):
        evolution_referee(H, chart, 0.5, tol=0)


def test_landau_references():
    H = P.parse("(p1^2 + p2^2)/2", 2)
    # the coherent state at the origin is the lowest level, energy hbar B / 2
    assert landau_husimi(H, 1, 0.7, 0.5, (0, 0)) == pytest.approx(np.exp(-0.35j), abs=1e-14)
    # quadratic H: the level sum reproduces the Mehler closed form
    t, hb, p = 0.7, 0.3, np.array([0.4, -0.2])
    mehler = np.exp(-2j * np.tan(t / 2) * (p ** 2).sum() / 2 / hb) / np.cos(t / 2)
    assert abs(landau_level_symbol(H, 1, t, hb, p) - mehler) < 1e-8
    with pytest.raises(ValueError):
        landau_level_symbol(P.parse("p1^2 + q1", 2), 1, 0.7, 0.3, np.zeros(2))


def test_coherent_average_moments():
    assert coherent_average(lambda X: np.ones(len(X)), (0.3, 0.1), 0.2) == pytest.approx(1)
    # the smoothing adds hbar/2 to each second moment
    assert coherent_average(lambda X: X[:, 0] ** 2, (0.3, 0.1), 0.2) == pytest.approx(0.19)


def test_gaussian_closed_form():
    a, b = 0.9, 0.7
    A1, A2, c = np.eye(2) * a, np.eye(2) * b, np.zeros(2)
    X = np.array([[0.0, 0.0], [0.3, -0.4]])
    val = gaussian_star(A1, c, A2, c, gaussian_weyl_phase(1, 1.0), X)
    d = 1 + a * b
    assert val == pytest.approx(np.exp(-(a + b) / d * (X ** 2).sum(-1)) / d)
