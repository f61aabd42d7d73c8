"""Star products on polynomial and grid symbols.

Every exact product here has the form

    f_1 * ... * f_N = exp{P} f_1(x_1) ... f_N(x_N) |_{x_k = x}

where ``P`` is a polynomial in ``q``, ``hbar`` and per-factor derivative
symbols.  The ``q`` inside ``P`` is a coefficient (it is not differentiated)
and every monomial of ``P`` carries at least one derivative, so on
polynomial factors the exponential series terminates.  :class:`_Engine`
builds ``P`` in a sparse ring and applies the truncated exponential.

Factors are listed left to right; the leftmost factor is slot 0.
"""
from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from itertools import product as iproduct
from math import factorial

import numpy as np
from sympy.polys.domains import QQ, QQ_I
from sympy.utilities.iterables import multiset_permutations

from .geometry import (MagneticForm, PolyFunction, midpoint_flux_poly, simplex_flux_poly,
                       substitute, valatin_polys)
from .symbols import (GridSymbol, HbarSeries, PolySymbol, gauss, inverse_wigner_fourier,
                      poly_ring, symbol_names, wigner_fourier)

__all__ = [
    "OrderingMatrix",
    "RegularRep",
    "moyal_product",
    "magnetic_weyl_product",
    "hbar_series_product",
    "series_coefficient",
    "series_coefficient_integral",
    "poisson_bracket_F",
    "jacobi_residual",
    "n_factor_product",
    "grid_magnetic_product",
    "ordering_transform",
    "m_ordered_product",
    "tau_magnetic_product",
    "mixed_ordering_product",
    "weyl_apply",
]

I = QQ_I(0, 1)
ZERO = QQ_I(0, 0)
HALF = QQ_I(QQ(1, 2), 0)
# u-columns of the right factor below this fraction of its peak are skipped
_NEGLIGIBLE = 1e-17


def _q(x):
    """Exact Gaussian rational from int/Fraction/float/complex."""
    return gauss(x)


# ---------------------------------------------------------------------------
# bidifferential engine

@lru_cache(maxsize=None)
def _engine_ring(n, nslots):
    names = tuple(f"q{j + 1}" for j in range(n)) + ("hbar",)
    for k in range(nslots):
        names += tuple(f"d{k}q{j + 1}" for j in range(n)) + tuple(f"d{k}p{j + 1}" for j in range(n))
    return poly_ring(names)


@lru_cache(maxsize=None)
def _falling(e, k):
    v = 1
    for i in range(k):
        v *= e - i
    return QQ_I(v, 0)


def _multi_diff(poly, orders):
    """``prod_i d_i^{orders[i]} poly`` over the leading variables (direct on the term dict)."""
    if not any(orders):
        return poly
    m = len(orders)
    data = {}
    for mon, c in poly.items():
        if any(e < k for e, k in zip(mon, orders)):
            continue
        for e, k in zip(mon, orders):
            if k and e > 1:
                c = c * _falling(e, k)
        data[tuple(e - k for e, k in zip(mon, orders)) + mon[m:]] = c
    return poly.ring(data)


class _Engine:
    def __init__(self, n, nslots):
        self.n, self.nslots = n, nslots
        self.R = _engine_ring(n, nslots)
        self.base = n + 1

    def q(self, j):
        return self.R.gens[j]

    @property
    def hbar(self):
        return self.R.gens[self.n]

    def dq(self, k, j):
        return self.R.gens[self.base + 2 * self.n * k + j]

    def dp(self, k, j):
        return self.R.gens[self.base + 2 * self.n * k + self.n + j]

    def const(self, c):
        return self.R.ground_new(_q(c))

    def lower_hbar(self, P):
        """Divide by ``hbar`` (every monomial must carry one)."""
        h = self.n
        data = {}
        for m, c in P.items():
            if m[h] == 0:
                raise ArithmeticError("exponent term without an hbar factor")
            data[m[:h] + (m[h] - 1,) + m[h + 1:]] = c
        return self.R(data)

    def _bounds(self, fs):
        b = []
        for f in fs:
            b.extend(f.degree_q())
            b.extend(f.degree_p())
        return b

    def _prune(self, P, bounds, hbar_order):
        base, h = self.base, self.n
        keep = {}
        for m, c in P.items():
            if hbar_order is not None and m[h] > hbar_order:
                continue
            if any(e > b for e, b in zip(m[base:], bounds)):
                continue
            keep[m] = c
        return self.R(keep)

    def exp(self, P, fs, hbar_order=None):
        bounds = self._bounds(fs)
        out = self.R.one
        term = self.R.one
        k = 0
        while True:
            k += 1
            term = self._prune(term * P, bounds, hbar_order) * QQ_I(QQ(1, k), 0)
            if not term:
                return out
            out += term

    def apply(self, P, fs):
        """``sum_m c_m(q, hbar) prod_k D^{m_k} f_k`` evaluated on the diagonal."""
        n, base = self.n, self.base
        S = PolySymbol.ring(n)
        w = 2 * n
        last = len(fs) - 1
        # outer key: derivative orders on all but the last factor
        groups = {}
        for m, c in P.items():
            slots = m[base:]
            inner = groups.setdefault(slots[:w * last], {})
            inner.setdefault(slots[w * last:], {})[m[:base]] = c
        caches = [dict() for _ in fs]

        def deriv(k, a):
            cache = caches[k]
            if a not in cache:
                cache[a] = _multi_diff(fs[k].poly, a)
            return cache[a]

        out = S.zero
        for head, inner in sorted(groups.items()):
            prod = S.one
            for k in range(last):
                prod = prod * deriv(k, head[w * k: w * (k + 1)])
                if not prod:
                    break
            if not prod:
                continue
            acc = S.zero
            for a, coef in sorted(inner.items()):
                d = deriv(last, a)
                if d:
                    cpoly = S({tuple(mm[:n]) + (0,) * n + (mm[n],): cc for mm, cc in coef.items()})
                    acc += cpoly * d
            if acc:
                out += prod * acc
        return PolySymbol(n, out)

    def run(self, P, fs, hbar_order=None):
        return self.apply(self.exp(P, fs, hbar_order), fs)


def _check_same_n(fs):
    if not fs:
        raise ValueError("need at least one symbol")
    n = fs[0].n
    for f in fs:
        if f.n != n:
            raise ValueError(f"dimension mismatch: {n} vs {f.n}")
    return n


def _moyal_part(E, left, right):
    n = E.n
    acc = E.R.zero
    for j in range(n):
        acc += E.dq(left, j) * E.dp(right, j) - E.dp(left, j) * E.dq(right, j)
    return acc * E.hbar * I * HALF


def _field(F, n):
    if F is None:
        return MagneticForm.zero(n)
    if not isinstance(F, MagneticForm):
        raise TypeError("F must be a MagneticForm")
    if F.n != n:
        raise ValueError(f"dimension mismatch: field n={F.n}, symbols n={n}")
    return F


def _tkey(t):
    return Fraction(t) if not isinstance(t, Fraction) else t


# ---------------------------------------------------------------------------
# products

def moyal_product(f, g):
    """Weyl (Groenewold-Moyal) product of polynomial symbols."""
    n = _check_same_n([f, g])
    E = _Engine(n, 2)
    return E.run(_moyal_part(E, 0, 1), [f, g])


def _magnetic_exponent(field, t, shift=None):
    """``(i/hbar) phi(q [+ shift], i hbar dp_L, i hbar dp_R) + Moyal`` on slots (0, 1)."""
    n = field.n
    E = _Engine(n, 2)
    if field.is_zero():
        return E, _moyal_part(E, 0, 1)
    phi = midpoint_flux_poly(field)
    ih = I * E.hbar
    qs = [E.q(j) for j in range(n)]
    if shift is not None:
        qs = [qs[j] + shift * ih * (E.dp(0, j) + E.dp(1, j)) for j in range(n)]
    images = qs + [ih * E.dp(0, j) for j in range(n)] + [ih * E.dp(1, j) for j in range(n)]
    images.append(E.const(t))
    mag = E.lower_hbar(substitute(phi, E.R, images)) * I
    return E, mag + _moyal_part(E, 0, 1)


def magnetic_weyl_product(f, g, F, t=0):
    """Exact magnetic product of Weyl type for symbols polynomial in ``p``.

    The phase is the flux of ``F`` through the triangle with sides
    ``i hbar d_p`` (left and right factors) whose third side has midpoint
    ``q``, plus the Moyal term.
    """
    n = _check_same_n([f, g])
    field = _field(F, n)
    E, P = field.cached(("magexp", _tkey(t)), lambda: _magnetic_exponent(field, t))
    return E.run(P, [f, g])


def series_coefficient(s, m):
    """``c_{s,m}`` of the hbar expansion of the magnetic phase."""
    e = lambda k: k % 2  # noqa: E731
    return Fraction(e(m + 1), (s + 1) * (m + 1)) - Fraction(e(s + m), (s + 1) * (s + m + 2))


def series_coefficient_integral(s, m):
    """Independent closed form ``2(-2)^{s+m} int_0^1 dmu int_0^mu dnu (nu-1/2)^s (mu-1/2)^m``."""
    total = Fraction(0)
    for a in range(s + 1):
        for b in range(m + 1):
            # (nu - 1/2)^s (mu - 1/2)^m expanded
            ca = Fraction(factorial(s), factorial(a) * factorial(s - a)) * Fraction(-1, 2) ** (s - a)
            cb = Fraction(factorial(m), factorial(b) * factorial(m - b)) * Fraction(-1, 2) ** (m - b)
            total += ca * cb * Fraction(1, (a + 1) * (a + b + 2))
    return 2 * Fraction(-2) ** (s + m) * total


def _multi_indices(n, total):
    return [a for a in iproduct(range(total + 1), repeat=n) if sum(a) == total]


def _field_in_symbols(field, t):
    """``F_jk(q)`` at time ``t`` as elements of the symbol ring."""
    n = field.n
    S = PolySymbol.ring(n)
    images = list(S.gens[:n]) + [S.ground_new(_q(t))]
    return [[substitute(field.F[j][k], S, images) for k in range(n)] for j in range(n)]


def hbar_series_product(f, g, F, order, t=0):
    """Magnetic product expanded to ``hbar^order`` from the ``c_{s,m}`` series."""
    if order < 0:
        raise ValueError("truncation order must be non-negative")
    n = _check_same_n([f, g])
    field = _field(F, n)
    E = _Engine(n, 2)
    Fq = _field_in_symbols(field, t)
    S = PolySymbol.ring(n)
    deg = field.degree()
    mh = -I * E.hbar * HALF  # -i hbar / 2

    def to_engine(p):
        return E.R({tuple(m[:n]) + (m[2 * n],) + (0,) * (4 * n): c for m, c in p.items()})

    P = _moyal_part(E, 0, 1)
    for s in range(deg + 1):
        for m in range(deg + 1 - s):
            c = series_coefficient(s, m)
            if c == 0:
                continue
            for al in _multi_indices(n, s):
                for be in _multi_indices(n, m):
                    w = Fraction(1, int(np.prod([factorial(a) for a in al]) * np.prod([factorial(b) for b in be])))
                    mono = E.R.one
                    for j in range(n):
                        mono *= E.dp(0, j) ** al[j] * E.dp(1, j) ** be[j]
                    inner = E.R.zero
                    for j in range(n):
                        for k in range(n):
                            d = Fq[j][k]
                            for i in range(n):
                                for _ in range(al[i] + be[i]):
                                    d = d.diff(S.gens[i])
                            if d:
                                inner += E.dp(0, j) * to_engine(d) * E.dp(1, k)
                    if inner:
                        P += mh * _q(c * w) * mh ** (s + m) * mono * inner
    res = E.run(P, [f, g], hbar_order=order)
    return HbarSeries.from_symbol(res, order)


def poisson_bracket_F(f, g, F, t=0):
    """``{f,g}_F = d_p f d_q g - d_q f d_p g + <d_p f, F d_p g>``.

    ``F`` may be a :class:`MagneticForm` or a raw ``n x n`` nested list of
    symbols in ``q`` (used to exercise non-closed forms).
    """
    n = _check_same_n([f, g])
    if isinstance(F, MagneticForm) or F is None:
        Fq = [[PolySymbol(n, c) for c in row] for row in _field_in_symbols(_field(F, n), t)]
    else:
        Fq = [[c if isinstance(c, PolySymbol) else PolySymbol.parse(str(c), n) for c in row] for row in F]
    out = PolySymbol(n)
    for j in range(1, n + 1):
        out = out + f.diff_p(j) * g.diff_q(j) - f.diff_q(j) * g.diff_p(j)
    for j in range(n):
        for k in range(n):
            if not Fq[j][k].is_zero():
                out = out + f.diff_p(j + 1) * Fq[j][k] * g.diff_p(k + 1)
    return out


def jacobi_residual(f, g, h, F, t=0):
    b = lambda a, c: poisson_bracket_F(a, c, F, t)  # noqa: E731
    return b(f, b(g, h)) + b(g, b(h, f)) + b(h, b(f, g))


def _polygon_exponent(field, N, t):
    """``(i/hbar)`` times the omega_F area of the polygon with sides ``V_1..V_N``.

    ``V_k = i hbar (d_p, d_q)`` of factor ``N-k`` (``V_1`` is the rightmost);
    the closing side has midpoint ``x``.
    """
    n = field.n
    E = _Engine(n, N)
    ih = I * E.hbar
    V = []
    for k in range(1, N + 1):
        slot = N - k
        V.append(([ih * E.dp(slot, j) for j in range(n)], [ih * E.dq(slot, j) for j in range(n)]))
    partial = [([E.R.zero] * n, [E.R.zero] * n)]
    for vq, vp in V:
        pq, pp = partial[-1]
        partial.append(([a + b for a, b in zip(pq, vq)], [a + b for a, b in zip(pp, vp)]))
    total_q = partial[-1][0]
    P0q = [E.q(j) - HALF * total_q[j] for j in range(n)]
    area = E.R.zero
    flux = None if field.is_zero() else simplex_flux_poly(field)
    for k in range(1, N):
        e1q, e1p = partial[k]
        e2q, e2p = partial[k + 1]
        area += HALF * sum((e2q[j] * e1p[j] - e2p[j] * e1q[j] for j in range(n)), E.R.zero)
        if flux is not None:
            area += substitute(flux, E.R, P0q + e1q + e2q + [E.const(t)])
    return E, E.lower_hbar(area) * I


def n_factor_product(fs, F=None, t=0):
    """``fs[0] * fs[1] * ... * fs[-1]`` in a single pass over the polygon membrane."""
    fs = list(fs)
    if not fs:
        raise ValueError("empty factor list")
    n = _check_same_n(fs)
    if len(fs) == 1:
        return fs[0]
    field = _field(F, n)
    E, P = field.cached(("polygon", len(fs), _tkey(t)), lambda: _polygon_exponent(field, len(fs), t))
    return E.run(P, fs)


# ---------------------------------------------------------------------------
# orderings

class OrderingMatrix:
    """Real ``2n x 2n`` matrix with ``M^T J + J M = 0``.

    Entries are kept as ``Fraction`` when given exactly, floats otherwise.
    """

    def __init__(self, M, tol=1e-12):
        M = [list(row) for row in M]
        m = len(M)
        if m % 2 or any(len(r) != m for r in M):
            raise ValueError("ordering matrix must be 2n x 2n")
        self.n = m // 2
        self.exact = all(isinstance(x, (int, Fraction)) for r in M for x in r)
        conv = Fraction if self.exact else float
        self.M = [[conv(x) for x in r] for r in M]
        JM = self.JM()
        for a in range(m):
            for b in range(m):
                d = JM[a][b] - JM[b][a]
                if (d != 0) if self.exact else (abs(d) > tol):
                    raise ValueError("matrix violates M^T J + J M = 0")

    @classmethod
    def tau(cls, tau):
        """``(1/2 - tau) diag(I, -I)`` for a given ``n`` via :meth:`tau_n`."""
        return cls.tau_n(1, tau)

    @classmethod
    def tau_n(cls, n, tau):
        tau = Fraction(tau) if isinstance(tau, (int, Fraction)) else float(tau)
        c = (Fraction(1, 2) if isinstance(tau, Fraction) else 0.5) - tau
        M = [[0] * (2 * n) for _ in range(2 * n)]
        for j in range(n):
            M[j][j] = c
            M[n + j][n + j] = -c
        return cls(M)

    @classmethod
    def from_blocks(cls, N, K, S):
        n = len(N)
        M = [[0] * (2 * n) for _ in range(2 * n)]
        for a in range(n):
            for b in range(n):
                M[a][b] = N[a][b]
                M[a][n + b] = K[a][b]
                M[n + a][b] = S[a][b]
                M[n + a][n + b] = -N[b][a]
        return cls(M)

    @classmethod
    def random(cls, n, rng, size=3):
        """Random admissible matrix with small rational entries."""
        r = lambda: Fraction(int(rng.integers(-size, size + 1)), int(rng.integers(1, size + 1)))  # noqa: E731
        N = [[r() for _ in range(n)] for _ in range(n)]
        K = [[None] * n for _ in range(n)]
        S = [[None] * n for _ in range(n)]
        for a in range(n):
            for b in range(a, n):
                K[a][b] = K[b][a] = r()
                S[a][b] = S[b][a] = r()
        return cls.from_blocks(N, K, S)

    def JM(self):
        n = self.n
        M = self.M
        # J = [[0, I], [-I, 0]]
        return [M[n + a] if a < n else [-x for x in M[a - n]] for a in range(2 * n)]

    def is_zero(self):
        return all(x == 0 for r in self.M for x in r)

    def __repr__(self):
        return f"OrderingMatrix({[[str(x) for x in r] for r in self.M]})"


def _ordering_exponent(E, slot, M, sign):
    """``sign * (i/hbar) 1/2 <JM V, V>`` with ``V = i hbar (d_p, d_q)``."""
    n = E.n
    D = [E.dp(slot, j) for j in range(n)] + [E.dq(slot, j) for j in range(n)]
    JM = M.JM()
    acc = E.R.zero
    for a in range(2 * n):
        for b in range(2 * n):
            if JM[a][b] != 0:
                acc += _q(JM[a][b]) * D[a] * D[b]
    # (i/hbar)(1/2)(i hbar)^2 = -i hbar / 2
    return acc * (-I * E.hbar * HALF) * sign


def _flux0_exponent(E, field, sign, t):
    """``sign * (i/hbar) Flux_0(q + u/2, q - u/2)`` with ``u = i hbar d_p``."""
    n = E.n
    ih = I * E.hbar
    flux = simplex_flux_poly(field)
    a = [E.q(j) + HALF * ih * E.dp(0, j) for j in range(n)]
    b = [E.q(j) - HALF * ih * E.dp(0, j) for j in range(n)]
    zero = [E.R.zero] * n
    # Flux_0(a, b): path 0 -> b -> a
    P = substitute(flux, E.R, zero + b + a + [E.const(t)])
    return E.lower_hbar(P) * I * sign


def ordering_transform(f, which, direction="fwd", F=None, M=None, tau=None, t=0):
    """Apply ``U_F``, ``U^M`` or ``U^tau`` (or an inverse) to a polynomial symbol.

    ``which`` is ``"F"``, ``"M"`` or ``"tau"``.
    """
    if direction not in ("fwd", "inv"):
        raise ValueError("direction must be 'fwd' or 'inv'")
    sign = 1 if direction == "fwd" else -1
    n = f.n
    E = _Engine(n, 1)
    if which == "F":
        field = _field(F, n)
        if field.is_zero():
            return f
        P = _flux0_exponent(E, field, sign, t)
    elif which in ("M", "tau"):
        if which == "tau":
            if tau is None:
                raise ValueError("tau required")
            M = OrderingMatrix.tau_n(n, tau)
        if M is None:
            raise ValueError("ordering matrix required")
        if M.n != n:
            raise ValueError("ordering matrix dimension mismatch")
        if M.is_zero():
            return f
        P = _ordering_exponent(E, 0, M, sign)
    else:
        raise ValueError(f"unknown transform {which!r}")
    return E.run(P, [f])


def _direct_m_exponent(E, M):
    """``i hbar d_L . (J/2 + Z M P) d_R`` with ``d = (d_q, d_p)``.

    ``P`` swaps the q and p blocks and ``Z = P J = diag(-I, I)``; this is the
    cross term left over when ``U^M`` is pulled through the Moyal exponent.
    """
    n = E.n
    m = 2 * n
    half = Fraction(1, 2) if M.exact else 0.5

    def C(a, b):
        c = (b + n) % m
        z = M.M[a][c] if a >= n else -M.M[a][c]
        if b == a + n:
            z += half
        elif a == b + n:
            z -= half
        return z

    L = [E.dq(0, j) for j in range(n)] + [E.dp(0, j) for j in range(n)]
    R = [E.dq(1, j) for j in range(n)] + [E.dp(1, j) for j in range(n)]
    acc = E.R.zero
    for a in range(m):
        for b in range(m):
            c = C(a, b)
            if c != 0:
                acc += _q(c) * L[a] * R[b]
    return acc * (I * E.hbar)


def m_ordered_product(f, g, M, method="direct"):
    """Product for the ``M``-ordering of Heisenberg generators.

    ``method="direct"`` uses the pseudodifferential exponent,
    ``method="conjugate"`` computes ``U^{-M}(U^M f * U^M g)``.
    """
    n = _check_same_n([f, g])
    if M.n != n:
        raise ValueError("ordering matrix dimension mismatch")
    if method == "direct":
        E = _Engine(n, 2)
        return E.run(_direct_m_exponent(E, M), [f, g])
    if method == "conjugate":
        k = moyal_product(ordering_transform(f, "M", M=M), ordering_transform(g, "M", M=M))
        return ordering_transform(k, "M", "inv", M=M)
    raise ValueError(f"unknown method {method!r}")


def tau_magnetic_product(f, g, tau, F, method="direct", t=0):
    """Magnetic product for the ``tau``-ordering (``tau = 1/2`` is Weyl)."""
    n = _check_same_n([f, g])
    field = _field(F, n)
    tau = Fraction(tau)
    if method == "conjugate":
        k = magnetic_weyl_product(ordering_transform(f, "tau", tau=tau),
                                  ordering_transform(g, "tau", tau=tau), field, t)
        return ordering_transform(k, "tau", "inv", tau=tau)
    if method != "direct":
        raise ValueError(f"unknown method {method!r}")
    c = _q(tau - Fraction(1, 2))

    def build():
        E, P = _magnetic_exponent(field, t, shift=c)
        extra = E.R.zero
        for j in range(n):
            extra += E.dp(1, j) * E.dq(0, j) + E.dp(0, j) * E.dq(1, j)
        return E, P + extra * c * I * E.hbar

    E, P = field.cached(("tauexp", tau, _tkey(t)), build)
    return E.run(P, [f, g])


def mixed_ordering_product(fs, Ms, out_M=None, F=None, t=0):
    """Product of factors quantized with different orderings.

    ``fs[k]`` is an ``Ms[k]``-symbol; the result is the symbol of the
    operator product in the ordering ``out_M`` (Weyl when ``None``).
    """
    fs, Ms = list(fs), list(Ms)
    if len(fs) != len(Ms):
        raise ValueError("length mismatch between symbols and orderings")
    n = _check_same_n(fs)
    weyl = [f if M is None else ordering_transform(f, "M", M=M) for f, M in zip(fs, Ms)]
    k = n_factor_product(weyl, F, t) if len(weyl) > 1 else weyl[0]
    if out_M is None:
        return k
    return ordering_transform(k, "M", "inv", M=out_M)


# ---------------------------------------------------------------------------
# regular representation

def weyl_apply(f, letters, g):
    """Apply the Weyl-symmetrized polynomial ``f`` of operators to ``g``.

    ``letters(kind, j)`` returns a callable acting on symbols, where ``kind``
    is ``"q"`` or ``"p"``.  Monomials are fully symmetrized (average over all
    distinct orderings of the word).
    """
    n = f.n
    out = PolySymbol(n)
    hb = PolySymbol.hbar(n)
    for (qe, pe, k), c in sorted(f.terms().items()):
        word = []
        for j in range(n):
            word += [("q", j)] * qe[j] + [("p", j)] * pe[j]
        acc = PolySymbol(n)
        count = 0
        for perm in multiset_permutations(word):
            h = g
            for kind, j in reversed(perm):
                h = letters(kind, j)(h)
            acc = acc + h
            count += 1
        if count == 0:
            acc, count = g, 1
        out = out + acc * (hb ** k) * PolySymbol.const(n, c * QQ_I(QQ(1, count), 0))
    return out


class RegularRep:
    """Left and right regular representations of the magnetic algebra.

    ``L_q = q + tau i hbar d_p``, ``R_q = q - (1 - tau) i hbar d_p``,
    ``L_p = p - (1 - tau) i hbar d_q - A(L_q, R_q)``,
    ``R_p = p + tau i hbar d_q - A(R_q, L_q)``; ``tau = 1/2`` is the Weyl case.
    """

    def __init__(self, n, F=None, tau=Fraction(1, 2), t=0):
        self.n = n
        self.field = _field(F, n)
        self.tau = Fraction(tau)
        self.t = t
        self.E = _Engine(n, 1)
        self._ops = {}

    def _dp_op(self, j, c):
        E = self.E
        return I * E.hbar * _q(c) * E.dp(0, j)

    def _potential_ops(self, side):
        """Operators ``A_j(L_q, R_q)`` (side 'L') or ``A_j(R_q, L_q)`` (side 'R')."""
        key = ("A", side)
        if key not in self._ops:
            n, E = self.n, self.E
            tau = self.tau
            Lq = [E.q(j) + self._dp_op(j, tau) for j in range(n)]
            Rq = [E.q(j) - self._dp_op(j, 1 - tau) for j in range(n)]
            a, b = (Lq, Rq) if side == "L" else (Rq, Lq)
            if self.field.is_zero():
                ops = [E.R.zero] * n
            else:
                A = valatin_polys(self.field)
                ops = [substitute(Aj, E.R, a + b + [E.const(self.t)]) for Aj in A]
            self._ops[key] = ops
        return self._ops[key]

    def _apply(self, P, g):
        return self.E.apply(P, [g])

    def Lq(self, j, g):
        return PolySymbol.q(self.n, j + 1) * g + self._apply(self._dp_op(j, self.tau), g)

    def Rq(self, j, g):
        return PolySymbol.q(self.n, j + 1) * g - self._apply(self._dp_op(j, 1 - self.tau), g)

    def Lp(self, j, g):
        E = self.E
        P = -I * E.hbar * _q(1 - self.tau) * E.dq(0, j) - self._potential_ops("L")[j]
        return PolySymbol.p(self.n, j + 1) * g + self._apply(P, g)

    def Rp(self, j, g):
        E = self.E
        P = I * E.hbar * _q(self.tau) * E.dq(0, j) - self._potential_ops("R")[j]
        return PolySymbol.p(self.n, j + 1) * g + self._apply(P, g)

    def left(self, f, g):
        """``f(L_q, L_p) g`` with Weyl symmetrization."""
        return weyl_apply(f, lambda kind, j: (lambda h: (self.Lq if kind == "q" else self.Lp)(j, h)), g)

    def right(self, g, f):
        """``g(R_q, R_p) f`` with Weyl symmetrization."""
        return weyl_apply(g, lambda kind, j: (lambda h: (self.Rq if kind == "q" else self.Rp)(j, h)), f)

    def _field_of(self, side, j, k, g):
        """``F_jk`` evaluated at the commuting operators ``L_q`` or ``R_q``, applied to ``g``."""
        n, E = self.n, self.E
        tau = self.tau
        if side == "L":
            args = [E.q(i) + self._dp_op(i, tau) for i in range(n)]
        else:
            args = [E.q(i) - self._dp_op(i, 1 - tau) for i in range(n)]
        P = substitute(self.field.F[j][k], E.R, args + [E.const(self.t)])
        return self._apply(P, g)

    def commutation_residuals(self, g):
        """Commutator residuals; every entry is zero exactly."""
        n = self.n
        hb = PolySymbol.hbar(n)
        ih = hb * PolySymbol.const(n, (0, 1))
        comm = lambda A, B, h: A(B(h)) - B(A(h))  # noqa: E731
        res = {}
        L = {("q", j): (lambda h, j=j: self.Lq(j, h)) for j in range(n)}
        L.update({("p", j): (lambda h, j=j: self.Lp(j, h)) for j in range(n)})
        R = {("q", j): (lambda h, j=j: self.Rq(j, h)) for j in range(n)}
        R.update({("p", j): (lambda h, j=j: self.Rp(j, h)) for j in range(n)})
        for j in range(n):
            for k in range(n):
                delta = g if j == k else PolySymbol(n)
                res[f"[Lq{j + 1},Lq{k + 1}]"] = comm(L["q", j], L["q", k], g)
                res[f"[Rq{j + 1},Rq{k + 1}]"] = comm(R["q", j], R["q", k], g)
                res[f"[Lq{j + 1},Lp{k + 1}]"] = comm(L["q", j], L["p", k], g) - ih * delta
                res[f"[Rq{j + 1},Rp{k + 1}]"] = comm(R["q", j], R["p", k], g) + ih * delta
                res[f"[Lp{j + 1},Lp{k + 1}]"] = comm(L["p", j], L["p", k], g) - ih * self._field_of("L", k, j, g)
                res[f"[Rp{j + 1},Rp{k + 1}]"] = comm(R["p", j], R["p", k], g) + ih * self._field_of("R", k, j, g)
                for a in "qp":
                    for b in "qp":
                        res[f"[L{a}{j + 1},R{b}{k + 1}]"] = comm(L[a, j], R[b, k], g)
        return res


# ---------------------------------------------------------------------------
# grid product

def _flux_grid_fn(field):
    n = field.n
    return field.cached("midpoint_fn", lambda: PolyFunction(midpoint_flux_poly(field), 3 * n + 1))


def grid_magnetic_product(f, g, F=None, t=0.0):
    """Magnetic product of grid symbols through the midpoint convolution in ``(q, u)``.

    Requires ``du = 2 dq`` on every axis so that the shifted points
    ``q +- u/2`` land on the lattice (the default of :meth:`GridSymbol.sample`);
    ``q`` is periodic and ``u`` outside the grid is treated as zero.
    """
    if not f.same_grid(g):
        raise ValueError("grid mismatch between factors")
    n = f.n
    field = _field(F, n)
    for j in range(n):
        if abs(f.du[j] - 2 * f.dq[j]) > 1e-9 * f.dq[j]:
            raise ValueError("grid must satisfy du = 2 dq (use dp = pi hbar / (N dq))")
    ft = (wigner_fourier(f) if f.rep == "qp" else f).data
    gt = (wigner_fourier(g) if g.rep == "qp" else g).data
    Nq, Nu = f.nq, f.np_
    hbar = f.hbar
    mu = [np.arange(N) - N // 2 for N in Nu]
    qax = [f.q_axis(j) for j in range(n)]
    flux = None if field.is_zero() else _flux_grid_fn(field)
    out = np.zeros_like(ft)
    weight = float(np.prod(f.du))
    if n == 1:
        iq = np.arange(Nq[0])[:, None]
        m = mu[0][None, :]
        for m1 in mu[0]:
            m2 = m - m1
            valid = (m2 >= -Nu[0] // 2) & (m2 < Nu[0] // 2)
            A = ft[(iq + m1) % Nq[0], np.clip(m2 + Nu[0] // 2, 0, Nu[0] - 1)]
            B = gt[(iq - m2) % Nq[0], m1 + Nu[0] // 2]
            out += np.where(valid, A * B, 0.0)
        return f.like(inverse_wigner_fourier(f.like(out * weight, rep="qu")).data, rep="qp")
    # n == 2: work on the sub-block of target u where u - u1 stays on the grid
    N1, N2 = Nu
    I1M = (np.arange(Nq[0])[:, None] - mu[0][None, :]) % Nq[0]
    I2M = (np.arange(Nq[1])[:, None] - mu[1][None, :]) % Nq[1]
    Q1 = qax[0][:, None, None, None]
    Q2 = qax[1][None, :, None, None]
    du = f.du
    gmax = np.abs(gt).max()
    for m1a in mu[0]:
        sa = slice(max(0, m1a), min(N1, N1 + m1a))
        fa = slice(sa.start - m1a, sa.stop - m1a)
        for m1b in mu[1]:
            col = gt[:, :, m1a + N1 // 2, m1b + N2 // 2]
            if np.abs(col).max() <= _NEGLIGIBLE * gmax:
                continue
            sb = slice(max(0, m1b), min(N2, N2 + m1b))
            fb = slice(sb.start - m1b, sb.stop - m1b)
            A = np.roll(ft[:, :, fa, fb], (-m1a, -m1b), axis=(0, 1))
            Gs = np.roll(col, (-m1a, -m1b), axis=(0, 1))
            B = Gs[I1M[:, None, sa, None], I2M[None, :, None, sb]]
            term = A * B
            if flux is not None:
                ua = mu[0][sa][None, None, :, None]
                ub = mu[1][sb][None, None, None, :]
                ph = flux(Q1, Q2, (ua - m1a) * du[0], (ub - m1b) * du[1], m1a * du[0], m1b * du[1], float(t))
                term = term * np.exp(1j * ph / hbar)
            out[:, :, sa, sb] += term
    return f.like(inverse_wigner_fourier(f.like(out * weight, rep="qu")).data, rep="qp")
