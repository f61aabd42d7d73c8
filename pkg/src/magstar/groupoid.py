"""Symplectic groupoid on ``E = T*(T*R^n)`` deformed by a magnetic form.

A point ``m = (x, y)`` with ``x, y in R^{2n}`` has left and right images

    l = x + (1/2 - M) J^{-1} y - (0; A(l_q, r_q))
    r = x - (1/2 + M) J^{-1} y - (0; A(r_q, l_q))

(``M = 0`` is the Weyl case).  ``l_q`` and ``r_q`` do not involve ``A`` so
the maps are explicit, and so is the inverse: with ``V = l - r``,
``A^s``/``A^a`` the symmetric/antisymmetric parts of the potential pair,

    y = J V + (A^a; 0),   x = (l + r)/2 + (0; A^s) + M J^{-1} y.

Two points multiply when ``r(m2) = l(m1)``; the product has ``l = l(m2)``
and ``r = r(m1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield
from fractions import Fraction

import numpy as np

from .geometry import (MagneticForm, Triangle, flux_triangle, is_exact, magnetic_shift,
                       triangle_area)
from .starprod import OrderingMatrix, poisson_bracket_F
from .symbols import PolySymbol, poly_ring

__all__ = [
    "MultiplicabilityError",
    "GroupoidElement",
    "left_right_maps",
    "reconstruct",
    "groupoid_multiply",
    "y_rule",
    "inverse",
    "unit",
    "poisson_map_check",
    "wing_base_residuals",
    "tau_wing_areas",
]


class MultiplicabilityError(ValueError):
    """``r(m2) != l(m1)``; ``defect`` holds the max-norm mismatch."""

    def __init__(self, defect):
        super().__init__(f"points are not multiplicable: |r(m2) - l(m1)| = {float(defect):.3e}")
        self.defect = defect


def _half(*vals):
    return Fraction(1, 2) if is_exact(*vals) else 0.5


def _jinv(y, n):
    # J^{-1} = [[0, -I], [I, 0]]
    return [-y[n + j] for j in range(n)] + [y[j] for j in range(n)]


def _j(v, n):
    # J = [[0, I], [-I, 0]]
    return [v[n + j] for j in range(n)] + [-v[j] for j in range(n)]


def _matvec(M, v):
    if M is None:
        return [0 * x for x in v]
    return [sum(M.M[a][b] * v[b] for b in range(len(v))) for a in range(len(v))]


def _ordering(F, M, n):
    if M is not None and M.n != n:
        raise ValueError("ordering matrix dimension mismatch")
    if F.n != n:
        raise ValueError(f"dimension mismatch: field n={F.n}, point n={n}")
    return M


def left_right_maps(x, y, F, M=None, t=0):
    """Return ``(l, r)`` for the point ``(x, y)``."""
    x, y = list(x), list(y)
    if len(x) != len(y) or len(x) % 2:
        raise ValueError("x and y must both have 2n components")
    n = len(x) // 2
    M = _ordering(F, M, n)
    h = _half(x, y)
    Jy = _jinv(y, n)
    MJy = _matvec(M, Jy)
    lpre = [x[a] + h * Jy[a] - MJy[a] for a in range(2 * n)]
    rpre = [x[a] - h * Jy[a] - MJy[a] for a in range(2 * n)]
    lq, rq = lpre[:n], rpre[:n]
    if F.is_zero():
        return lpre, rpre
    from .geometry import valatin_potential
    Alr = valatin_potential(F, lq, rq, t)
    Arl = valatin_potential(F, rq, lq, t)
    l = lq + [lpre[n + j] - Alr[j] for j in range(n)]
    r = rq + [rpre[n + j] - Arl[j] for j in range(n)]
    return l, r


def reconstruct(l, r, F, M=None, t=0):
    """Inverse of :func:`left_right_maps`: ``(l, r) -> (x, y)``."""
    l, r = list(l), list(r)
    n = len(l) // 2
    M = _ordering(F, M, n)
    h = _half(l, r)
    V = [a - b for a, b in zip(l, r)]
    As, Aa = magnetic_shift(F, l[:n], r[:n], t) if not F.is_zero() else ([0] * n, [0] * n)
    JV = _j(V, n)
    y = [JV[j] + Aa[j] for j in range(n)] + JV[n:]
    x = [h * (a + b) for a, b in zip(l, r)]
    x = x[:n] + [x[n + j] + As[j] for j in range(n)]
    MJy = _matvec(M, _jinv(y, n))
    x = [a + b for a, b in zip(x, MJy)]
    return x, y


@dataclass
class GroupoidElement:
    """Point ``(x, y)`` of ``E`` with cached ``l`` and ``r``."""

    x: list
    y: list
    F: MagneticForm
    M: OrderingMatrix | None = None
    t: object = 0
    l: list = dfield(init=False)
    r: list = dfield(init=False)

    def __post_init__(self):
        self.x, self.y = list(self.x), list(self.y)
        self.l, self.r = left_right_maps(self.x, self.y, self.F, self.M, self.t)

    @classmethod
    def from_lr(cls, l, r, F, M=None, t=0):
        x, y = reconstruct(l, r, F, M, t)
        return cls(x, y, F, M, t)


def _defect(a, b):
    return max(abs(u - v) for u, v in zip(a, b))


def groupoid_multiply(m2, m1, eps=1e-9):
    """``m2 o m1`` (requires ``r(m2) = l(m1)``).

    Exact inputs demand equality; floating inputs accept a relative
    mismatch up to ``eps``.
    """
    d = _defect(m2.r, m1.l)
    if is_exact(m2.r, m1.l):
        if d != 0:
            raise MultiplicabilityError(d)
    else:
        scale = max(1.0, max(abs(float(v)) for v in m1.l))
        if d > eps * scale:
            raise MultiplicabilityError(d)
    return GroupoidElement.from_lr(m2.l, m1.r, m2.F, m2.M, m2.t)


def _gradient_field(F, j):
    """``d_j F`` as a closed form (the derivative of a closed form is closed)."""
    g = F.ring.gens[j]
    return MagneticForm(F.n, [[F.F[a][b].diff(g) for b in range(F.n)] for a in range(F.n)])


def y_rule(m2, m1):
    """``y1 + y2 + (int_Delta grad F; 0)`` for a multiplicable pair.

    ``Delta`` is the ``q``-triangle ``r(m1) -> l(m1) -> l(m2)``; this is the
    orientation in which the correction equals the flux of ``d_j F``.
    """
    F, n = m2.F, m2.F.n
    y = [a + b for a, b in zip(m1.y, m2.y)]
    if F.is_zero():
        return y
    tri = Triangle(tuple(m1.r[:n]), tuple(m1.l[:n]), tuple(m2.l[:n]))
    for j in range(n):
        y[j] = y[j] + flux_triangle(_gradient_field(F, j), tri, m2.t)
    return y


def inverse(m):
    """``m^{-1}``: the point with ``l`` and ``r`` swapped."""
    return GroupoidElement.from_lr(m.r, m.l, m.F, m.M, m.t)


def unit(x, F, M=None, t=0):
    """Unit over ``x`` (``l = r = x``)."""
    return GroupoidElement.from_lr(list(x), list(x), F, M, t)


# ---------------------------------------------------------------------------
# Poisson property

def _lift_ring(n):
    names = (tuple(f"xq{j + 1}" for j in range(n)) + tuple(f"xp{j + 1}" for j in range(n))
             + tuple(f"yq{j + 1}" for j in range(n)) + tuple(f"yp{j + 1}" for j in range(n)))
    return poly_ring(names)


def _symbolic_maps(F, M, drop_potential, t):
    """``l`` and ``r`` as polynomials in ``(x, y)``."""
    from .geometry import substitute, valatin_polys
    n = F.n
    W = _lift_ring(n)
    g = W.gens
    x, y = list(g[:2 * n]), list(g[2 * n:])
    half = Fraction(1, 2)
    Jy = _jinv(y, n)
    if M is not None:
        MJy = [sum((W(0) + M.M[a][b]) * Jy[b] for b in range(2 * n)) for a in range(2 * n)]
    else:
        MJy = [W.zero] * (2 * n)
    lpre = [x[a] + Jy[a] * half - MJy[a] for a in range(2 * n)]
    rpre = [x[a] - Jy[a] * half - MJy[a] for a in range(2 * n)]
    l, r = list(lpre), list(rpre)
    if not F.is_zero() and not drop_potential:
        A = valatin_polys(F)
        tc = W(0) + t
        for j in range(n):
            l[n + j] -= substitute(A[j], W, lpre[:n] + rpre[:n] + [tc])
            r[n + j] -= substitute(A[j], W, rpre[:n] + lpre[:n] + [tc])
    return W, l, r


def _compose(f, W, images):
    from .geometry import substitute
    n = f.n
    return substitute(f.poly, W, list(images) + [W.zero])  # hbar -> 0 (test functions are classical)


def _bracket_E(W, a, b, n):
    g = W.gens
    out = W.zero
    for i in range(2 * n):
        xi, yi = g[i], g[2 * n + i]
        out += a.diff(yi) * b.diff(xi) - a.diff(xi) * b.diff(yi)
    return out


def poisson_map_check(tests, F, M=None, drop_potential=False, t=0):
    """Residuals of the Poisson (``l``) and anti-Poisson (``r``) properties.

    For every pair ``(f, g)`` from ``tests`` returns
    ``{f o l, g o l}_E - {f, g}_F o l`` and ``{f o r, g o r}_E + {f, g}_F o r``
    together with ``{f o l, g o r}_E`` (left and right Poisson-commute).
    ``drop_potential=True`` removes the potential from ``l``/``r`` (a
    deliberately broken map used as a negative control).
    """
    n = F.n
    W, l, r = _symbolic_maps(F, M, drop_potential, t)
    out = []
    for i, f in enumerate(tests):
        for g in tests[i + 1:]:
            fl, gl = _compose(f, W, l), _compose(g, W, l)
            fr, gr = _compose(f, W, r), _compose(g, W, r)
            br = _compose(poisson_bracket_F(f, g, F, t), W, l)
            brr = _compose(poisson_bracket_F(f, g, F, t), W, r)
            out.append((_bracket_E(W, fl, gl, n) - br,
                        _bracket_E(W, fr, gr, n) + brr,
                        _bracket_E(W, fl, gr, n)))
    return out


# ---------------------------------------------------------------------------
# wing areas

def _vertices_from_midpoints(x, x2, x1):
    a = [u + v - w for u, v, w in zip(x, x2, x1)]
    b = [u + v - w for u, v, w in zip(x2, x1, x)]
    c = [u + v - w for u, v, w in zip(x, x1, x2)]
    return a, b, c


def wing_base_residuals(m2, m1):
    """Base-triangle shift invariance and vertical-wing nullity for ``m2 o m1``.

    Returns ``(base_shift, wings)`` where ``base_shift`` is the difference of
    the ``omega_F`` areas of the triangles with side midpoints ``(x, x2, x1)``
    and ``(x~, x~2, x~1)`` (``x~ = (l + r)/2``), and ``wings`` lists the
    ``omega_F`` areas of the three wings ``[l, x, r]``.
    """
    F, t = m2.F, m2.t
    m = groupoid_multiply(m2, m1)
    h = _half(m.l, m.r, m2.l, m1.r)
    pts = (m, m2, m1)
    mids = [elem.x for elem in pts]
    tilde = [[h * (a + b) for a, b in zip(e.l, e.r)] for e in pts]
    a, b, c = _vertices_from_midpoints(*mids)
    at, bt, ct = _vertices_from_midpoints(*tilde)
    base = triangle_area(F, c, b, a, t) - triangle_area(F, ct, bt, at, t)
    wings = [triangle_area(F, e.r, e.x, e.l, t) for e in pts]
    return base, wings


def tau_wing_areas(l, r, F, tau, t=0):
    """``omega_F`` areas of the tau-wing ``[l, x, r]`` with the groupoid vertex
    ``x`` and with the unshifted vertex ``x^tau = (l + r)/2 + M V``."""
    n = F.n
    M = OrderingMatrix.tau_n(n, tau)
    x, _ = reconstruct(l, r, F, M, t)
    h = _half(l, r)
    V = [a - b for a, b in zip(l, r)]
    MV = _matvec(M, V)
    xt = [h * (a + b) + c for a, b, c in zip(l, r, MV)]
    return triangle_area(F, r, x, l, t), triangle_area(F, r, xt, l, t)


def random_rational_point(rng, dim, size=5):
    return [Fraction(int(rng.integers(-size * 4, size * 4 + 1)), int(rng.integers(1, 5))) for _ in range(dim)]


def as_float(v):
    return np.array([float(a) for a in v])
