"""Two-point potentials, fluxes and membrane areas for closed 2-forms on R^n.

Sign conventions (fixed once, used everywhere):

* a 2-form with antisymmetric matrix ``G`` means ``1/2 G_jk dq^k ^ dq^j``;
* the flux through the oriented triangle ``P0 -> P1 -> P2`` is
  ``int_simplex e2 . G(P0 + s e1 + t e2) . e1 ds dt`` with ``e1 = P1 - P0``,
  ``e2 = P2 - P0``;
* on phase space ``omega_F = dp ^ dq + F``, i.e. ``G = [[F, I], [-I, 0]]``.

With these rules ``A(., P)`` (the two-point potential centred at ``P``) is a
primitive of ``F``: the flux of any closed polygon equals the line integral of
``A(q, P) . dq`` around it, and ``p dq`` is a primitive of ``dp ^ dq``.  For
``F_12 = B`` the counter-clockwise unit triangle has flux ``-B/2``.

Polynomial fields are handled exactly: every quantity below is first built
as a polynomial (sympy sparse ring over ``QQ_I``) and then either evaluated
exactly at rational points or compiled for floating inputs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from math import factorial

import numpy as np
from sympy.polys.domains import QQ, QQ_I

from .symbols import (ParseError, compile_poly, format_poly, gauss, gauss_pair,
                      parse_poly, poly_ring)

__all__ = [
    "FieldError",
    "MagneticForm",
    "Triangle",
    "WingMembrane",
    "valatin_potential",
    "potential_identities",
    "flux_triangle",
    "flux_midpoint_triangle",
    "flux_gradient_residual",
    "tetrahedron_residual",
    "symplectic_area",
    "polygon_area",
    "electric_potentials",
    "gauge_relation_residual",
    "magnetic_shift",
    "wing_vertex",
]

ZERO = QQ_I(0, 0)


class FieldError(ValueError):
    """Invalid field record (antisymmetry, closedness or Maxwell constraint)."""


# ---------------------------------------------------------------------------
# polynomial helpers

def substitute(poly, target, images):
    """Map each generator of ``poly.ring`` to ``images[i]`` in ``target``."""
    out = target.zero
    cache = {}
    for mono, c in poly.items():
        term = target.ground_new(c)
        for i, e in enumerate(mono):
            if e:
                key = (i, e)
                if key not in cache:
                    cache[key] = images[i] ** e
                term = term * cache[key]
        out += term
    return out


def integrate_unit(poly, idx):
    """``int_0^1 poly ds`` where ``s`` is generator ``idx`` (kept at power 0)."""
    data = {}
    for mono, c in poly.items():
        e = mono[idx]
        key = mono[:idx] + (0,) + mono[idx + 1:]
        data[key] = data.get(key, ZERO) + c * QQ_I(QQ(1, e + 1), 0)
    return poly.ring({k: v for k, v in data.items() if v != ZERO})


def integrate_simplex(poly, si, ti):
    """Integrate over ``s, t >= 0, s + t <= 1`` (generators ``si``, ``ti``)."""
    data = {}
    for mono, c in poly.items():
        a, b = mono[si], mono[ti]
        w = QQ(factorial(a) * factorial(b), factorial(a + b + 2))
        key = list(mono)
        key[si] = key[ti] = 0
        key = tuple(key)
        data[key] = data.get(key, ZERO) + c * QQ_I(w, 0)
    return poly.ring({k: v for k, v in data.items() if v != ZERO})


def integrate_ordered(poly, mu, nu):
    """``int_0^1 dmu int_0^mu dnu poly``."""
    data = {}
    for mono, c in poly.items():
        a, b = mono[mu], mono[nu]
        # int_0^1 mu^a mu^(b+1)/(b+1) dmu
        w = QQ(1, (b + 1) * (a + b + 2))
        key = list(mono)
        key[mu] = key[nu] = 0
        key = tuple(key)
        data[key] = data.get(key, ZERO) + c * QQ_I(w, 0)
    return poly.ring({k: v for k, v in data.items() if v != ZERO})


def is_exact(*values):
    """True when every entry is an int/Fraction (exact rational arithmetic)."""
    for v in values:
        for x in np.ravel(np.asarray(v, dtype=object)):
            if isinstance(x, (bool, np.bool_)) or not isinstance(x, (int, Fraction, np.integer)):
                if type(x).__name__ != "mpq":
                    return False
    return True


def _to_fraction(z):
    re_, im_ = gauss_pair(z)
    if im_ != 0:
        raise ValueError("unexpected imaginary part in a real geometric quantity")
    return re_


def exact_eval(poly, values):
    vals = [gauss(int(v) if isinstance(v, np.integer) else v) for v in values]
    total = ZERO
    for mono, c in poly.items():
        term = c
        for v, e in zip(vals, mono):
            if e:
                term = term * v ** e
        total += term
    return _to_fraction(total)


class PolyFunction:
    """A polynomial in named variables with exact and numeric evaluation."""

    def __init__(self, poly, nvars):
        self.poly, self.nvars = poly, nvars
        self._num = None

    def __call__(self, *values):
        if is_exact(*values):
            return exact_eval(self.poly, values)
        if self._num is None:
            self._num = compile_poly(self.poly, self.nvars, real=True)
        return self._num(*[np.asarray(v, dtype=float) for v in values])

    def is_zero(self):
        return not self.poly


# ---------------------------------------------------------------------------
# field record

def field_names(n):
    return tuple(f"q{j + 1}" for j in range(n)) + ("t",)


class MagneticForm:
    """Closed 2-form ``F = 1/2 F_jk dq^k ^ dq^j`` with polynomial components.

    ``F[j][k]`` are ring elements in ``q1..qn, t``.  An optional electric
    field ``E`` (list of ``n`` polynomials) makes the record time dependent;
    then ``d_t F_jk + d_k E_j - d_j E_k = 0`` is enforced.
    """

    def __init__(self, n, F, E=None):
        if not 1 <= n <= 4:
            raise FieldError("dimension n must be in 1..4")
        R = poly_ring(field_names(n))
        self.n, self.ring = n, R
        comps = [[self._coerce(F[j][k], (j, k)) for k in range(n)] for j in range(n)]
        for j in range(n):
            for k in range(n):
                if comps[j][k] + comps[k][j] != R.zero:
                    raise FieldError(f"F is not antisymmetric at ({j + 1},{k + 1})")
        for c in (x for row in comps for x in row):
            for z in c.values():
                if z.y != 0:
                    raise FieldError("field components must be real")
        self.F = comps
        self.E = None if E is None else [self._coerce(e, (j,)) for j, e in enumerate(E)]
        if self.E is not None and len(self.E) != n:
            raise FieldError("E must have n components")
        bad = self.closedness_defect()
        if bad:
            raise FieldError(f"F is not closed: d_l F_jk + cyclic != 0 at indices {bad}")
        if self.E is not None:
            bad = self.faraday_defect()
            if bad:
                raise FieldError(f"E and F violate d_t F + dE = 0 at indices {bad}")
        self._cache = {}

    def _coerce(self, v, where):
        if isinstance(v, str):
            try:
                return parse_poly(v, field_names(self.n))
            except ParseError as exc:
                raise FieldError(f"component {where}: {exc}") from exc
        if hasattr(v, "ring"):
            return v
        return self.ring.ground_new(gauss(v))

    # constructors -------------------------------------------------------
    @classmethod
    def zero(cls, n):
        return cls(n, [[0] * n for _ in range(n)])

    @classmethod
    def constant(cls, n, matrix):
        return cls(n, [[matrix[j][k] for k in range(n)] for j in range(n)])

    @classmethod
    def from_B(cls, B, E=None):
        """Physical magnetic field: scalar ``B`` for n = 2, vector for n = 3.

        Uses ``F_jk = eps_kjl B^l`` so that ``[p1, p2] = i hbar B``.
        """
        if isinstance(B, (list, tuple)):
            n = len(B)
            if n != 3:
                raise FieldError("vector B needs n = 3")
            eps = {(0, 1, 2): 1, (1, 2, 0): 1, (2, 0, 1): 1, (0, 2, 1): -1, (2, 1, 0): -1, (1, 0, 2): -1}
            tmp = cls.zero(3)
            Bc = [tmp._coerce(b, (l,)) for l, b in enumerate(B)]
            F = [[tmp.ring.zero] * 3 for _ in range(3)]
            for (k, j, l), s in eps.items():
                F[j][k] = F[j][k] + Bc[l] * s
            return cls(3, F, E)
        tmp = cls.zero(2)
        b = tmp._coerce(B, ())
        return cls(2, [[tmp.ring.zero, -b], [b, tmp.ring.zero]], E)

    # structure ----------------------------------------------------------
    @property
    def time_dependent(self):
        return self.E is not None or any(
            m[self.n] for row in self.F for c in row for m in c.keys())

    def gen(self, j):
        return self.ring.gens[j]

    def closedness_defect(self, F=None):
        F = self.F if F is None else F
        n, g = self.n, self.ring.gens
        bad = []
        for j in range(n):
            for k in range(j + 1, n):
                for l in range(k + 1, n):
                    s = F[j][k].diff(g[l]) + F[k][l].diff(g[j]) + F[l][j].diff(g[k])
                    if s:
                        bad.append((j + 1, k + 1, l + 1))
        return bad

    def faraday_defect(self):
        n, g = self.n, self.ring.gens
        t = g[n]
        bad = []
        for j in range(n):
            for k in range(j + 1, n):
                s = self.F[j][k].diff(t) + self.E[j].diff(g[k]) - self.E[k].diff(g[j])
                if s:
                    bad.append((j + 1, k + 1))
        return bad

    def is_zero(self):
        return all(not c for row in self.F for c in row)

    def is_constant(self):
        return all(all(sum(m) == 0 for m in c.keys()) for row in self.F for c in row)

    def degree(self):
        return max((sum(m[:self.n]) for row in self.F for c in row for m in c.keys()), default=0)

    def matrix(self, q, t=0.0):
        """Numeric ``F(q)`` with broadcasting over leading axes of ``q``."""
        q = np.asarray(q, dtype=float)
        key = "Fnum"
        if key not in self._cache:
            self._cache[key] = [[compile_poly(c, self.n + 1, real=True) for c in row] for row in self.F]
        fs = self._cache[key]
        args = [q[..., j] for j in range(self.n)] + [np.asarray(t, dtype=float)]
        out = np.zeros(q.shape[:-1] + (self.n, self.n))
        for j in range(self.n):
            for k in range(self.n):
                out[..., j, k] = fs[j][k](*args)
        return out

    def electric(self, q, t=0.0):
        q = np.asarray(q, dtype=float)
        if self.E is None:
            return np.zeros(q.shape)
        if "Enum" not in self._cache:
            self._cache["Enum"] = [compile_poly(e, self.n + 1, real=True) for e in self.E]
        args = [q[..., j] for j in range(self.n)] + [np.asarray(t, dtype=float)]
        return np.stack([np.broadcast_to(f(*args), q.shape[:-1]) for f in self._cache["Enum"]], axis=-1)

    def cached(self, key, build):
        if key not in self._cache:
            self._cache[key] = build()
        return self._cache[key]

    # serialization ------------------------------------------------------
    def to_json(self):
        names = field_names(self.n)
        doc = {
            "n": self.n,
            "F": [[format_poly(c, names) for c in row] for row in self.F],
            "E": None if self.E is None else [format_poly(e, names) for e in self.E],
            "time_dependent": bool(self.time_dependent),
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FieldError(f"invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise FieldError("field document must be a JSON object")
        unknown = set(doc) - {"n", "F", "E", "time_dependent", "description"}
        if unknown:
            raise FieldError(f"unknown key(s): {sorted(unknown)}")
        if "n" not in doc or not isinstance(doc["n"], int):
            raise FieldError("key 'n' missing or not an integer")
        n = doc["n"]
        F = doc.get("F")
        if not isinstance(F, list) or len(F) != n or any(not isinstance(r, list) or len(r) != n for r in F):
            raise FieldError(f"key 'F' must be an {n}x{n} array of polynomial strings")
        E = doc.get("E")
        if E is not None and (not isinstance(E, list) or len(E) != n):
            raise FieldError(f"key 'E' must be a list of {n} polynomial strings")
        names = field_names(n)
        entries = [(f"F[{j}][{k}]", F[j][k]) for j in range(n) for k in range(n)]
        entries += [(f"E[{j}]", e) for j, e in enumerate(E or [])]
        for key, v in entries:
            if not isinstance(v, (str, int)) or isinstance(v, bool):
                raise FieldError(f"key '{key}' must be a polynomial string")
            try:
                parse_poly(str(v), names)
            except ValueError as exc:
                raise FieldError(f"key '{key}': {exc}") from exc
        field = cls(n, F, E)
        if "time_dependent" in doc and bool(doc["time_dependent"]) != field.time_dependent:
            raise FieldError("key 'time_dependent' contradicts the components")
        return field

    def __repr__(self):
        names = field_names(self.n)
        return f"MagneticForm(n={self.n}, F={[[format_poly(c, names) for c in r] for r in self.F]})"


# ---------------------------------------------------------------------------
# exact polynomial builders (cached per field)

def _pair_ring(n, extra=()):
    names = tuple(f"a{j + 1}" for j in range(n)) + tuple(f"b{j + 1}" for j in range(n)) + ("t",) + tuple(extra)
    return poly_ring(names)


def valatin_polys(field):
    """``A_j(a, b, t)`` as polynomials in ``a1..an, b1..bn, t``."""
    def build():
        n = field.n
        W = _pair_ring(n, ("s",))
        g = W.gens
        a, b, t, s = g[:n], g[n:2 * n], g[2 * n], g[2 * n + 1]
        images = [b[l] + s * (a[l] - b[l]) for l in range(n)] + [t]
        Fsub = [[substitute(field.F[j][k], W, images) for k in range(n)] for j in range(n)]
        out = []
        R = _pair_ring(n)
        for j in range(n):
            acc = W.zero
            for k in range(n):
                if Fsub[j][k]:
                    acc += Fsub[j][k] * (a[k] - b[k])
            acc = integrate_unit(acc * s, 2 * n + 1)
            out.append(R({m[:-1]: c for m, c in acc.items()}))
        return out
    return field.cached("valatin", build)


def valatin_functions(field):
    n = field.n
    return field.cached("valatin_fn", lambda: [PolyFunction(p, 2 * n + 1) for p in valatin_polys(field)])


def valatin_potential(field, q, qp, t=0):
    """Two-point potential ``A(q, q')`` along the straight segment ``q' -> q``.

    Exact (``Fraction`` entries) for rational inputs, float array otherwise.
    Satisfies ``A(q, q') . (q - q') = 0`` and vanishes at ``q = q'``.
    """
    q, qp = _vec(field, q), _vec(field, qp)
    fns = valatin_functions(field)
    vals = list(q) + list(qp) + [t]
    res = [f(*vals) for f in fns]
    return res if is_exact(*vals) else np.stack(np.broadcast_arrays(*res), axis=-1)


def _vec(field, v):
    if isinstance(v, np.ndarray) and v.dtype != object:
        if v.shape[-1] != field.n:
            raise ValueError(f"dimension mismatch: expected {field.n} components, got {v.shape[-1]}")
        return [v[..., j] for j in range(field.n)]
    v = list(v)
    if len(v) != field.n:
        raise ValueError(f"dimension mismatch: expected {field.n} components, got {len(v)}")
    return v


def chord_integral_polys(field):
    """``(int_b^a F dq)_j = int_0^1 F_jk(b + s(a-b)) (a-b)^k ds``."""
    def build():
        n = field.n
        W = _pair_ring(n, ("s",))
        g = W.gens
        a, b, t, s = g[:n], g[n:2 * n], g[2 * n], g[2 * n + 1]
        images = [b[l] + s * (a[l] - b[l]) for l in range(n)] + [t]
        R = _pair_ring(n)
        out = []
        for j in range(n):
            acc = W.zero
            for k in range(n):
                acc += substitute(field.F[j][k], W, images) * (a[k] - b[k])
            acc = integrate_unit(acc, 2 * n + 1)
            out.append(R({m[:-1]: c for m, c in acc.items()}))
        return out
    return field.cached("chordF", build)


def potential_identity_polys(field):
    """Residual polynomials of the three two-point potential identities."""
    def build():
        n = field.n
        R = _pair_ring(n)
        g = R.gens
        a, b, t = g[:n], g[n:2 * n], g[2 * n]
        A = valatin_polys(field)
        swap = [b[l] for l in range(n)] + [a[l] for l in range(n)] + [t]
        Aswap = [substitute(Aj, R, swap) for Aj in A]  # A(b, a)
        # 1: d_b A_j(a,b) + d_a A_k(b,a)   (as the (k, j) entry)
        r1 = [[A[j].diff(b[k]) + Aswap[k].diff(a[j]) for j in range(n)] for k in range(n)]
        # 2: A(a,b) - A(b,a) - int_b^a F
        chord = chord_integral_polys(field)
        r2 = [A[j] - Aswap[j] - chord[j] for j in range(n)]
        # 3: A(a,b) + A(b,a) - 1/2 int_0^1 s [F(m + s d/2) - F(m - s d/2)] d ds
        W = _pair_ring(n, ("s",))
        gw = W.gens
        aw, bw, tw, s = gw[:n], gw[n:2 * n], gw[2 * n], gw[2 * n + 1]
        mid = [(aw[l] + bw[l]) * QQ_I(QQ(1, 2), 0) for l in range(n)]
        d = [aw[l] - bw[l] for l in range(n)]
        plus = [mid[l] + s * d[l] * QQ_I(QQ(1, 2), 0) for l in range(n)] + [tw]
        minus = [mid[l] - s * d[l] * QQ_I(QQ(1, 2), 0) for l in range(n)] + [tw]
        r3 = []
        for j in range(n):
            acc = W.zero
            for k in range(n):
                diffF = substitute(field.F[j][k], W, plus) - substitute(field.F[j][k], W, minus)
                acc += diffF * d[k]
            acc = integrate_unit(acc * s * QQ_I(QQ(1, 2), 0), 2 * n + 1)
            sym = R({m[:-1]: c for m, c in acc.items()})
            r3.append(A[j] + Aswap[j] - sym)
        return r1, r2, r3
    return field.cached("potential_identities", build)


def potential_identities(field, q, qp, t=0):
    """Residuals of the three two-point potential identities at ``(q, q')``.

    Returns ``(r1, r2, r3)``: ``r1[k][j]`` is the coefficient of
    ``dq'^k ^ dq^j`` in ``d_q'(A(q,q') dq) - d_q(A(q',q) dq')``; ``r2`` is
    ``A(q,q') - A(q',q) - int_{q'}^{q} F dq``; ``r3`` compares the symmetric
    part with the midpoint-reflected integral.  All vanish identically for
    polynomial ``F``.
    """
    q, qp = _vec(field, q), _vec(field, qp)
    vals = list(q) + list(qp) + [t]
    r1, r2, r3 = potential_identity_polys(field)
    nv = 2 * field.n + 1
    ev = lambda p: PolyFunction(p, nv)(*vals)  # noqa: E731
    return ([[ev(x) for x in row] for row in r1], [ev(x) for x in r2], [ev(x) for x in r3])


# ---------------------------------------------------------------------------
# triangles and fluxes

@dataclass(frozen=True)
class Triangle:
    """Oriented triangle given by its vertices in traversal order."""

    P0: tuple
    P1: tuple
    P2: tuple

    @classmethod
    def from_chord(cls, qpp, q, qp):
        """Triangle whose flux is ``int_{q'}^{q} A(., q'') dq``: path ``q'' -> q' -> q``."""
        return cls(tuple(qpp), tuple(qp), tuple(q))

    @classmethod
    def from_midpoint(cls, q, u2, u1):
        """Triangle with sides ``u1`` then ``u2`` and ``q`` the midpoint of the third side."""
        q, u1, u2 = (np.asarray(v, dtype=object) for v in (q, u1, u2))
        half = Fraction(1, 2) if is_exact(q, u1, u2) else 0.5
        a = q - (u1 + u2) * half
        b = q + (u1 - u2) * half
        c = q + (u1 + u2) * half
        return cls(tuple(a), tuple(b), tuple(c))

    def vertices(self):
        return (self.P0, self.P1, self.P2)


def simplex_flux_poly(field):
    """Flux of ``P0 -> P0+e1 -> P0+e2`` as a polynomial in ``(P0, e1, e2, t)``."""
    def build():
        n = field.n
        names = (tuple(f"x{j + 1}" for j in range(n)) + tuple(f"e{j + 1}" for j in range(n))
                 + tuple(f"f{j + 1}" for j in range(n)) + ("t", "s", "r"))
        W = poly_ring(names)
        g = W.gens
        x, e1, e2, t, s, r = g[:n], g[n:2 * n], g[2 * n:3 * n], g[3 * n], g[3 * n + 1], g[3 * n + 2]
        images = [x[l] + s * e1[l] + r * e2[l] for l in range(n)] + [t]
        acc = W.zero
        for j in range(n):
            for k in range(n):
                if field.F[j][k]:
                    acc += e2[j] * substitute(field.F[j][k], W, images) * e1[k]
        acc = integrate_simplex(acc, 3 * n + 1, 3 * n + 2)
        R = poly_ring(names[:3 * n + 1])
        return R({m[:-2]: c for m, c in acc.items()})
    return field.cached("simplex_flux", build)


def chord_flux_poly(field):
    """``int_{P1}^{P2} A(q, P0) dq`` as a polynomial in ``(P0, P1, P2, t)``."""
    def build():
        n = field.n
        names = (tuple(f"x{j + 1}" for j in range(n)) + tuple(f"y{j + 1}" for j in range(n))
                 + tuple(f"z{j + 1}" for j in range(n)) + ("t", "s"))
        W = poly_ring(names)
        g = W.gens
        x, y, z, t, s = g[:n], g[n:2 * n], g[2 * n:3 * n], g[3 * n], g[3 * n + 1]
        path = [y[l] + s * (z[l] - y[l]) for l in range(n)]
        A = valatin_polys(field)
        acc = W.zero
        for j in range(n):
            acc += substitute(A[j], W, path + list(x) + [t]) * (z[j] - y[j])
        acc = integrate_unit(acc, 3 * n + 1)
        R = poly_ring(names[:-1])
        return R({m[:-1]: c for m, c in acc.items()})
    return field.cached("chord_flux", build)


def midpoint_flux_poly(field):
    """``phi(q, u2, u1)`` from the ordered double integral, polynomial in ``(q, u2, u1, t)``."""
    def build():
        n = field.n
        names = (tuple(f"q{j + 1}" for j in range(n)) + tuple(f"v{j + 1}" for j in range(n))
                 + tuple(f"w{j + 1}" for j in range(n)) + ("t", "mu", "nu"))
        W = poly_ring(names)
        g = W.gens
        q, u2, u1, t, mu, nu = g[:n], g[n:2 * n], g[2 * n:3 * n], g[3 * n], g[3 * n + 1], g[3 * n + 2]
        half = QQ_I(QQ(1, 2), 0)
        images = [q[l] + (mu - half) * u1[l] + (nu - half) * u2[l] for l in range(n)] + [t]
        acc = W.zero
        for j in range(n):
            for k in range(n):
                if field.F[j][k]:
                    acc += u2[j] * substitute(field.F[j][k], W, images) * u1[k]
        acc = integrate_ordered(acc, 3 * n + 1, 3 * n + 2)
        R = poly_ring(names[:-2])
        return R({m[:-2]: c for m, c in acc.items()})
    return field.cached("midpoint_flux", build)


def _flux_callable(field, key, builder):
    n = field.n
    return field.cached(key + "_fn", lambda: PolyFunction(builder(field), 3 * n + 1))


def flux_triangle(field, tri, t=0, method="simplex"):
    """Flux of ``F`` through an oriented :class:`Triangle`.

    ``method="simplex"`` integrates the polynomial over the simplex;
    ``method="chord"`` uses the line integral ``int_{P1}^{P2} A(q, P0) dq``.
    Both are exact for polynomial fields and agree identically.
    """
    P0, P1, P2 = (_vec(field, v) for v in tri.vertices())
    if method == "simplex":
        e1 = [b - a for a, b in zip(P0, P1)]
        e2 = [c - a for a, c in zip(P0, P2)]
        return _flux_callable(field, "simplex", simplex_flux_poly)(*P0, *e1, *e2, t)
    if method == "chord":
        return _flux_callable(field, "chord", chord_flux_poly)(*P0, *P1, *P2, t)
    raise ValueError(f"unknown method {method!r}")


def flux_midpoint_triangle(field, q, u2, u1, t=0):
    """Flux ``phi(q, u2, u1)`` through the triangle with sides ``u1``, ``u2``
    whose third side has midpoint ``q`` (equals the flux of
    ``Triangle.from_midpoint(q, u2, u1)``)."""
    q, u2, u1 = (_vec(field, v) for v in (q, u2, u1))
    return _flux_callable(field, "midpoint", midpoint_flux_poly)(*q, *u2, *u1, t)


def flux_gradient_residual(field):
    """Polynomials ``d_q Flux_{q''}(q, q') - (A(q, q'') - A(q, q'))`` (must vanish)."""
    def build():
        n = field.n
        P = chord_flux_poly(field)  # variables: x = q'', y = q', z = q, t
        R = P.ring
        g = R.gens
        x, y, z, t = g[:n], g[n:2 * n], g[2 * n:3 * n], g[3 * n]
        A = valatin_polys(field)
        out = []
        for j in range(n):
            A_zx = substitute(A[j], R, list(z) + list(x) + [t])
            A_zy = substitute(A[j], R, list(z) + list(y) + [t])
            out.append(P.diff(z[j]) - (A_zx - A_zy))
        return out
    return field.cached("flux_gradient", build)


def tetrahedron_residual(field, q, u2, u1, t=0):
    """Stokes check: the three faces through the origin sum to the midpoint flux."""
    tri = Triangle.from_midpoint(q, u2, u1)
    a, b, c = tri.vertices()
    o = tuple(0 * v for v in a)
    f0 = lambda x, y: flux_triangle(field, Triangle.from_chord(o, x, y), t)  # noqa: E731  Flux_0(x, y)
    lhs = -f0(c, a) + f0(c, b) + f0(b, a)
    return lhs - flux_midpoint_triangle(field, q, u2, u1, t)


# ---------------------------------------------------------------------------
# phase-space membranes

@dataclass
class WingMembrane:
    """Base triangle in ``R^{2n}`` plus wing triangles ``[l, x, r]``.

    ``base`` lists the base vertices in traversal order; each wing is a
    triple ``(l, x, r)`` whose oriented area is that of ``r -> x -> l``.
    """

    base: tuple
    wings: tuple = ()
    kind: str = "vertical-magnetic"


def _split(field, X):
    X = list(X)
    n = field.n
    if len(X) != 2 * n:
        raise ValueError("phase-space point must have 2n components")
    return X[:n], X[n:]


def triangle_area(field, X0, X1, X2, t=0):
    """``omega_F`` area of the flat oriented triangle ``X0 -> X1 -> X2``."""
    n = field.n
    q0, p0 = _split(field, X0)
    q1, p1 = _split(field, X1)
    q2, p2 = _split(field, X2)
    e1q = [b - a for a, b in zip(q0, q1)]
    e1p = [b - a for a, b in zip(p0, p1)]
    e2q = [b - a for a, b in zip(q0, q2)]
    e2p = [b - a for a, b in zip(p0, p2)]
    # 1/2 e2 . J . e1 with J = [[0, I], [-I, 0]]
    half = Fraction(1, 2) if is_exact(X0, X1, X2) else 0.5
    flat = half * (sum(e2q[j] * e1p[j] for j in range(n)) - sum(e2p[j] * e1q[j] for j in range(n)))
    if field is None or field.is_zero():
        return flat
    return flat + flux_triangle(field, Triangle(tuple(q0), tuple(q1), tuple(q2)), t)


def polygon_area(field, vertices, t=0):
    """``omega_F`` area of a closed polygon (fan triangulation from vertex 0)."""
    V = list(vertices)
    total = 0
    for k in range(1, len(V) - 1):
        total = total + triangle_area(field, V[0], V[k], V[k + 1], t)
    return total


def symplectic_area(membrane, field, t=0, magnetic=True):
    """Sum of ``omega_0`` (``magnetic=False``) or ``omega_F`` areas.

    ``membrane`` is a :class:`WingMembrane` or a list of vertex triples.
    """
    use = field if magnetic else MagneticForm.zero(field.n)
    if isinstance(membrane, WingMembrane):
        pieces = [tuple(membrane.base)] + [(r, x, l) for (l, x, r) in membrane.wings]
    else:
        pieces = [tuple(p) for p in membrane]
    total = 0
    for piece in pieces:
        if len(piece) != 3:
            raise ValueError("membrane pieces must be triangles (vertex triples)")
        total = total + triangle_area(use, *piece, t=t)
    return total


def magnetic_shift(field, lq, rq, t=0):
    """``(A^s, A^a)``: symmetric and antisymmetric parts of the potential pair."""
    Alr = valatin_potential(field, lq, rq, t)
    Arl = valatin_potential(field, rq, lq, t)
    half = Fraction(1, 2) if is_exact(lq, rq) else 0.5
    As = [half * (x + y) for x, y in zip(Alr, Arl)]
    Aa = [x - y for x, y in zip(Alr, Arl)]
    return As, Aa


def wing_vertex(field, l, r, M=None, magnetic=True, t=0):
    """Vertex ``x`` of the wing over ``V = l - r``.

    ``x = (l + r)/2 [+ V_F] [+ M V]`` where ``V_F = (0; A^s)``.
    """
    n = field.n
    l, r = list(l), list(r)
    exact = is_exact(l, r) and (M is None or is_exact(M))
    half = Fraction(1, 2) if exact else 0.5
    x = [half * (a + b) for a, b in zip(l, r)]
    if magnetic and not field.is_zero():
        As, _ = magnetic_shift(field, l[:n], r[:n], t)
        x = x[:n] + [x[n + j] + As[j] for j in range(n)]
    if M is not None:
        V = [a - b for a, b in zip(l, r)]
        MV = [sum(M[i][k] * V[k] for k in range(2 * n)) for i in range(2 * n)]
        x = [a + b for a, b in zip(x, MV)]
    return x


# ---------------------------------------------------------------------------
# time-dependent fields

def electric_polys(field):
    """``beta(a, b, t) = int_a^b E dq`` along the chord, polynomial in ``(a, b, t)``."""
    def build():
        if field.E is None:
            return _pair_ring(field.n).zero
        n = field.n
        W = _pair_ring(n, ("s",))
        g = W.gens
        a, b, t, s = g[:n], g[n:2 * n], g[2 * n], g[2 * n + 1]
        images = [a[l] + s * (b[l] - a[l]) for l in range(n)] + [t]
        acc = W.zero
        for j in range(n):
            acc += substitute(field.E[j], W, images) * (b[j] - a[j])
        acc = integrate_unit(acc, 2 * n + 1)
        return _pair_ring(n)({m[:-1]: c for m, c in acc.items()})
    return field.cached("beta", build)


def electric_potentials(field, t, q, qp):
    """Return ``(beta, alpha)`` at time ``t``.

    ``beta = int_q^{q'} E dq`` along the chord and ``alpha = A(q, q')`` is the
    two-point magnetic potential with the time frozen.
    """
    qv, qpv = _vec(field, q), _vec(field, qp)
    vals = list(qv) + list(qpv) + [t]
    beta = PolyFunction(electric_polys(field), 2 * field.n + 1)(*vals)
    return beta, valatin_potential(field, q, qp, t)


def gauge_relation_polys(field):
    """``-d beta/d q - d alpha/d t - E(q)`` as polynomials (must vanish)."""
    def build():
        n = field.n
        R = _pair_ring(n)
        g = R.gens
        a, t = g[:n], g[2 * n]
        beta = electric_polys(field)
        A = valatin_polys(field)
        E = field.E or [field.ring.zero] * n
        out = []
        for j in range(n):
            Ej = substitute(E[j], R, list(a) + [t])
            out.append(-beta.diff(a[j]) - A[j].diff(t) - Ej)
        return out
    return field.cached("gauge_relation", build)


def gauge_relation_residual(field, t, q, qp):
    vals = list(_vec(field, q)) + list(_vec(field, qp)) + [t]
    return [PolyFunction(p, 2 * field.n + 1)(*vals) for p in gauge_relation_polys(field)]
