"""Phase-space symbols.

Two representations live here:

* :class:`PolySymbol` -- an exact polynomial in ``q1..qn, p1..pn`` whose
  coefficients are polynomials in a formal ``hbar`` over the Gaussian
  rationals.  All algebraic identities are checked on these.
* :class:`GridSymbol` -- complex samples on a uniform ``(q, p)`` grid with a
  Fourier partner in ``(q, u)`` where ``u`` is dual to ``p``.

The polynomial arithmetic is delegated to sympy's sparse polynomial rings
(``sympy.polys.rings``) over ``QQ_I``; this module adds the variable layout,
the text grammar and the binary formats.
"""
from __future__ import annotations

import re
import struct
from fractions import Fraction
from functools import lru_cache
from itertools import product as iproduct

import numpy as np
from sympy.polys.domains import QQ, QQ_I
from sympy.polys.rings import ring as _make_ring

__all__ = [
    "ParseError",
    "FormatError",
    "gauss",
    "gauss_pair",
    "gauss_complex",
    "poly_ring",
    "parse_poly",
    "format_poly",
    "compile_poly",
    "PolySymbol",
    "HbarSeries",
    "GridSymbol",
    "wigner_fourier",
    "inverse_wigner_fourier",
    "serialize",
    "deserialize",
]

I_UNIT = QQ_I(0, 1)


class ParseError(ValueError):
    """Malformed polynomial text."""


class FormatError(ValueError):
    """Malformed or incompatible binary/text payload."""


# ---------------------------------------------------------------------------
# scalars

def gauss(value):
    """Convert ``value`` to an exact Gaussian rational (``QQ_I`` element).

    Accepts ints, ``Fraction``, gmpy ``mpq``, ``QQ_I`` elements, strings
    such as ``"3/7"`` and 2-tuples ``(re, im)``.  Floats are converted
    exactly via their binary expansion.
    """
    if isinstance(value, type(I_UNIT)):
        return value
    if isinstance(value, tuple) and len(value) == 2:
        re_, im_ = (_rational(v) for v in value)
        return QQ_I(re_, im_)
    if isinstance(value, complex):
        return QQ_I(_rational(value.real), _rational(value.imag))
    if isinstance(value, str):
        return parse_poly(value, ()).LC if value.strip() else QQ_I(0, 0)
    return QQ_I(_rational(value), QQ(0))


def _rational(v):
    if isinstance(v, float):
        v = Fraction(v)
    if isinstance(v, Fraction):
        return QQ(v.numerator, v.denominator)
    if isinstance(v, str):
        f = Fraction(v)
        return QQ(f.numerator, f.denominator)
    return QQ.convert(v)


def gauss_pair(z):
    """Return ``(Fraction re, Fraction im)`` for a Gaussian rational."""
    z = gauss(z)
    return (Fraction(int(z.x.numerator), int(z.x.denominator)),
            Fraction(int(z.y.numerator), int(z.y.denominator)))


def gauss_complex(z):
    z = gauss(z)
    return complex(float(z.x), float(z.y))


def _conj(z):
    return QQ_I(z.x, -z.y)


# ---------------------------------------------------------------------------
# rings, text grammar, numeric compilation

@lru_cache(maxsize=None)
def poly_ring(names):
    """Sparse polynomial ring over ``QQ_I`` with the given generator names."""
    if not names:
        names = ("_one",)
    R, *_ = _make_ring(",".join(names), QQ_I)
    return R


_TOKEN = re.compile(r"\s*(?:(\d+(?:\.\d+)?(?:/\d+)?)|([A-Za-z_ħ][A-Za-z_0-9]*)|(\*\*|[-+*^()/]))")
_HBAR_ALIASES = {"h", "hbar", "ħ"}


def _tokenize(text):
    pos, out = 0, []
    text = text.strip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r} at {pos} in {text!r}")
        num, name, op = m.groups()
        if num is not None:
            out.append(("num", num))
        elif name is not None:
            out.append(("name", name))
        else:
            out.append(("op", "^" if op == "**" else op))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return out


class _Parser:
    def __init__(self, tokens, R, lookup, text):
        self.toks, self.i, self.R, self.lookup, self.text = tokens, 0, R, lookup, text

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self):
        t = self.peek()
        self.i += 1
        return t

    def fail(self, msg):
        raise ParseError(f"{msg} in {self.text!r}")

    def expr(self):
        kind, val = self.peek()
        sign = 1
        if kind == "op" and val in "+-":
            self.take()
            sign = -1 if val == "-" else 1
        acc = self.term() * sign
        while True:
            kind, val = self.peek()
            if kind == "op" and val in "+-":
                self.take()
                t = self.term()
                acc = acc + t if val == "+" else acc - t
            else:
                return acc

    def term(self):
        acc = self.power()
        while True:
            kind, val = self.peek()
            if kind == "op" and val == "*":
                self.take()
                acc = acc * self.power()
            elif kind == "op" and val == "/":
                self.take()
                k, v = self.take()
                if k != "num" or "/" in v:
                    self.fail("division only by an integer literal")
                acc = acc * self.R.ground_new(QQ_I(QQ(1, 1) / _rational(v), 0))
            elif kind in ("num", "name") or (kind == "op" and val == "("):
                acc = acc * self.power()
            else:
                return acc

    def power(self):
        base = self.atom()
        kind, val = self.peek()
        if kind == "op" and val == "^":
            self.take()
            k, v = self.take()
            # "x^2/3" tokenizes the exponent as the rational literal "2/3"
            e, _, den = v.partition("/") if k == "num" else (v, "", "")
            if k != "num" or not e.isdigit() or (den and not den.isdigit()):
                self.fail("exponent must be a non-negative integer")
            out = base ** int(e)
            if den:
                out = out * self.R.ground_new(QQ_I(QQ(1, int(den)), 0))
            return out
        return base

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return self.R.ground_new(QQ_I(_rational(val), QQ(0)))
        if kind == "name":
            if val == "i":
                return self.R.ground_new(I_UNIT)
            gen = self.lookup(val)
            if gen is None:
                self.fail(f"unknown variable {val!r}")
            return gen
        if kind == "op" and val == "(":
            e = self.expr()
            k, v = self.take()
            if (k, v) != ("op", ")"):
                self.fail("missing ')'")
            return e
        self.fail("unexpected end of input" if kind is None else f"unexpected token {val!r}")


def parse_poly(text, names):
    """Parse ``text`` into an element of ``poly_ring(names)``.

    Grammar: sums of products of rational literals (``3/7``, ``1.25``),
    the imaginary unit ``i``, generator names and integer powers (``^`` or
    ``**``).  Juxtaposition multiplies, so ``3/2 * q1^2 p1`` is valid.
    ``h`` and the Unicode hbar are accepted as aliases of ``hbar``.
    """
    names = tuple(names)
    R = poly_ring(names)
    index = {nm: g for nm, g in zip(R.symbols, R.gens)} if names else {}
    index = {str(k): v for k, v in index.items()}

    def lookup(name):
        if name in index:
            return index[name]
        if name in _HBAR_ALIASES and "hbar" in index:
            return index["hbar"]
        return None

    toks = _tokenize(str(text))
    if not toks:
        return R.zero
    p = _Parser(toks, R, lookup, text)
    out = p.expr()
    if p.i != len(toks):
        p.fail(f"trailing input at token {p.i}")
    return out


def _fmt_rational(r):
    r = QQ.convert(r)
    return str(int(r.numerator)) if r.denominator == 1 else f"{int(r.numerator)}/{int(r.denominator)}"


def _fmt_coeff(c):
    if c.y == 0:
        return _fmt_rational(c.x)
    if c.x == 0:
        s = _fmt_rational(c.y)
        return "i" if s == "1" else ("-i" if s == "-1" else f"{s}*i")
    im = _fmt_rational(c.y)
    sign = "-" if im.startswith("-") else "+"
    return f"({_fmt_rational(c.x)} {sign} {im.lstrip('-')}*i)"


def _monomial_key(m):
    return (sum(m), tuple(-e for e in m))


def format_poly(poly, names):
    """Inverse of :func:`parse_poly`; deterministic term order."""
    names = tuple(names)
    items = sorted(poly.items(), key=lambda kv: _monomial_key(kv[0]))
    if not items:
        return "0"
    parts = []
    for mono, c in items:
        factors = []
        for nm, e in zip(names, mono):
            if e == 1:
                factors.append(nm)
            elif e > 1:
                factors.append(f"{nm}^{e}")
        mono_s = " ".join(factors)
        cs = _fmt_coeff(c)
        if not mono_s:
            term = cs
        elif cs == "1":
            term = mono_s
        elif cs == "-1":
            term = "-" + mono_s
        else:
            term = f"{cs} * {mono_s}"
        parts.append(term)
    out = parts[0]
    for t in parts[1:]:
        out += " - " + t[1:] if t.startswith("-") else " + " + t
    return out


def compile_poly(poly, nvars, real=False):
    """Compile a ring element into a vectorised numeric callable.

    The returned function takes ``nvars`` positional arguments (scalars or
    broadcastable numpy arrays).  With ``real=True`` imaginary parts of the
    coefficients are dropped and the result is real.
    """
    terms = []
    for mono, c in poly.items():
        cv = float(c.x) if real else complex(float(c.x), float(c.y))
        if cv == 0:
            continue
        factors = []
        for k, e in enumerate(mono[:nvars]):
            if e == 1:
                factors.append(f"x[{k}]")
            elif e > 1:
                factors.append(f"x[{k}]**{e}")
        terms.append(repr(cv) + ("*" + "*".join(factors) if factors else ""))
    body = " + ".join(terms) if terms else "0.0"
    src = f"def _f(*x):\n    return {body} + 0.0*(x[0] if x else 0.0)\n"
    ns = {}
    exec(src, ns)  # noqa: S102 - generated from trusted ring data
    return ns["_f"]


def _eval_exact(poly, values):
    total = QQ_I(0, 0)
    vals = [gauss(v) for v in values]
    for mono, c in poly.items():
        term = c
        for v, e in zip(vals, mono):
            if e:
                term = term * v ** e
        total = total + term
    return total


# ---------------------------------------------------------------------------
# exact polynomial symbols

def symbol_names(n):
    return tuple(f"q{j + 1}" for j in range(n)) + tuple(f"p{j + 1}" for j in range(n)) + ("hbar",)


class PolySymbol:
    """Exact polynomial symbol on ``R^{2n}`` with a formal ``hbar``.

    Generators are ordered ``q1..qn, p1..pn, hbar``.  Instances are
    immutable; arithmetic returns new objects.
    """

    __slots__ = ("n", "poly")

    def __init__(self, n, poly=None):
        if not 1 <= n <= 4:
            raise ValueError("dimension n must be in 1..4")
        R = poly_ring(symbol_names(n))
        self.n = n
        if poly is None:
            poly = R.zero
        elif not hasattr(poly, "ring") or poly.ring != R:
            raise TypeError("polynomial belongs to a different ring")
        self.poly = poly

    # constructors -------------------------------------------------------
    @classmethod
    def ring(cls, n):
        return poly_ring(symbol_names(n))

    @classmethod
    def const(cls, n, c):
        R = cls.ring(n)
        return cls(n, R.ground_new(gauss(c)))

    @classmethod
    def q(cls, n, j=1):
        return cls(n, cls.ring(n).gens[j - 1])

    @classmethod
    def p(cls, n, j=1):
        return cls(n, cls.ring(n).gens[n + j - 1])

    @classmethod
    def hbar(cls, n):
        return cls(n, cls.ring(n).gens[2 * n])

    @classmethod
    def parse(cls, text, n):
        return cls(n, parse_poly(text, symbol_names(n)))

    @classmethod
    def from_terms(cls, n, terms):
        """Build from ``{(qexp, pexp, hpow): coeff}``."""
        R = cls.ring(n)
        data = {}
        for (qe, pe, k), c in terms.items():
            if len(qe) != n or len(pe) != n:
                raise ValueError("multi-index length does not match n")
            c = gauss(c)
            if c != QQ_I(0, 0):
                data[tuple(qe) + tuple(pe) + (k,)] = c
        return cls(n, R(data))

    # structure ----------------------------------------------------------
    def terms(self):
        """Mapping ``(qexp, pexp, hpow) -> QQ_I`` (no zero entries)."""
        n = self.n
        return {(m[:n], m[n:2 * n], m[2 * n]): c for m, c in self.poly.items()}

    def is_zero(self):
        return not self.poly

    def degree_q(self):
        return tuple(max((m[j] for m in self.poly), default=0) for j in range(self.n))

    def degree_p(self):
        n = self.n
        return tuple(max((m[n + j] for m in self.poly), default=0) for j in range(n))

    def total_degree(self):
        n = self.n
        return max((sum(m[:2 * n]) for m in self.poly), default=0)

    def hbar_degree(self):
        return max((m[2 * self.n] for m in self.poly), default=0)

    def hbar_coefficient(self, k):
        """Coefficient of ``hbar^k`` as an hbar-free symbol."""
        n, R = self.n, self.poly.ring
        data = {m[:2 * n] + (0,): c for m, c in self.poly.items() if m[2 * n] == k}
        return PolySymbol(n, R(data))

    def truncate_hbar(self, order):
        n, R = self.n, self.poly.ring
        return PolySymbol(n, R({m: c for m, c in self.poly.items() if m[2 * n] <= order}))

    # arithmetic ---------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, PolySymbol):
            if other.n != self.n:
                raise ValueError(f"dimension mismatch: {self.n} vs {other.n}")
            return other.poly
        return self.poly.ring.ground_new(gauss(other))

    def __add__(self, other):
        return PolySymbol(self.n, self.poly + self._coerce(other))

    __radd__ = __add__

    def __sub__(self, other):
        return PolySymbol(self.n, self.poly - self._coerce(other))

    def __rsub__(self, other):
        return PolySymbol(self.n, self._coerce(other) - self.poly)

    def __mul__(self, other):
        return PolySymbol(self.n, self.poly * self._coerce(other))

    __rmul__ = __mul__

    def __neg__(self):
        return PolySymbol(self.n, -self.poly)

    def __pow__(self, k):
        return PolySymbol(self.n, self.poly ** k)

    def scale(self, c):
        return PolySymbol(self.n, self.poly * gauss(c))

    def __eq__(self, other):
        if isinstance(other, PolySymbol):
            return self.n == other.n and self.poly == other.poly
        try:
            return self.poly == self._coerce(other)
        except (TypeError, ValueError):
            return NotImplemented

    def __hash__(self):
        return hash((self.n, frozenset(self.poly.items())))

    def diff_q(self, j, k=1):
        g = self.poly.ring.gens[j - 1]
        out = self.poly
        for _ in range(k):
            out = out.diff(g)
        return PolySymbol(self.n, out)

    def diff_p(self, j, k=1):
        g = self.poly.ring.gens[self.n + j - 1]
        out = self.poly
        for _ in range(k):
            out = out.diff(g)
        return PolySymbol(self.n, out)

    def conj(self):
        """Complex conjugation with ``hbar`` kept real."""
        R = self.poly.ring
        return PolySymbol(self.n, R({m: _conj(c) for m, c in self.poly.items()}))

    def substitute_hbar(self, value):
        """Replace the formal ``hbar`` by an exact number."""
        n, R = self.n, self.poly.ring
        v = gauss(value)
        data = {}
        for m, c in self.poly.items():
            key = m[:2 * n] + (0,)
            data[key] = data.get(key, QQ_I(0, 0)) + c * v ** m[2 * n]
        return PolySymbol(n, R({k: c for k, c in data.items() if c != QQ_I(0, 0)}))

    # evaluation ---------------------------------------------------------
    def evaluate(self, q, p, hbar=None):
        """Exact evaluation at rational ``q``, ``p`` (and ``hbar``).

        With ``hbar=None`` the result is a polynomial in hbar returned as a
        ``PolySymbol`` constant in ``q, p``; otherwise a Gaussian rational.
        """
        q, p = list(q), list(p)
        if len(q) != self.n or len(p) != self.n:
            raise ValueError("point dimension does not match n")
        if hbar is None:
            R = self.poly.ring
            vals = [gauss(v) for v in q + p]
            data = {}
            for m, c in self.poly.items():
                term = c
                for v, e in zip(vals, m):
                    if e:
                        term = term * v ** e
                key = (0,) * (2 * self.n) + (m[2 * self.n],)
                data[key] = data.get(key, QQ_I(0, 0)) + term
            return PolySymbol(self.n, R({k: c for k, c in data.items() if c != QQ_I(0, 0)}))
        return _eval_exact(self.poly, q + p + [hbar])

    def numeric(self, hbar):
        """Return ``f(q_arrays, p_arrays)`` evaluating with a numeric hbar."""
        fn = compile_poly(self.poly, 2 * self.n + 1)
        h = float(hbar)

        def call(q, p):
            q = [np.asarray(a, dtype=float) for a in q]
            p = [np.asarray(a, dtype=float) for a in p]
            return np.asarray(fn(*q, *p, h), dtype=complex)

        return call

    # text ---------------------------------------------------------------
    def __str__(self):
        return format_poly(self.poly, symbol_names(self.n))

    def __repr__(self):
        return f"PolySymbol(n={self.n}, {self!s})"


# ---------------------------------------------------------------------------
# truncated hbar series

class HbarSeries:
    """Truncated power series ``sum_k c_k hbar^k`` with hbar-free coefficients."""

    __slots__ = ("order", "coeffs")

    def __init__(self, order, coeffs):
        if order < 0:
            raise ValueError("truncation order must be non-negative")
        coeffs = list(coeffs)[:order + 1]
        if not coeffs:
            raise ValueError("need at least one coefficient")
        n = coeffs[0].n
        while len(coeffs) < order + 1:
            coeffs.append(PolySymbol(n))
        self.order, self.coeffs = order, coeffs

    @property
    def n(self):
        return self.coeffs[0].n

    @classmethod
    def from_symbol(cls, sym, order):
        return cls(order, [sym.hbar_coefficient(k) for k in range(order + 1)])

    def to_symbol(self):
        h = PolySymbol.hbar(self.n)
        out = PolySymbol(self.n)
        for k, c in enumerate(self.coeffs):
            out = out + c * h ** k
        return out

    def __add__(self, other):
        order = min(self.order, other.order)
        return HbarSeries(order, [a + b for a, b in zip(self.coeffs, other.coeffs)])

    def __mul__(self, other):
        order = min(self.order, other.order)
        out = [PolySymbol(self.n) for _ in range(order + 1)]
        for i, a in enumerate(self.coeffs[:order + 1]):
            for j, b in enumerate(other.coeffs[:order + 1 - i]):
                out[i + j] = out[i + j] + a * b
        return HbarSeries(order, out)

    def __eq__(self, other):
        return (isinstance(other, HbarSeries) and self.order == other.order
                and all(a == b for a, b in zip(self.coeffs, other.coeffs)))

    def __repr__(self):
        return f"HbarSeries(order={self.order}, {[str(c) for c in self.coeffs]})"


# ---------------------------------------------------------------------------
# grid symbols

def _is_pow2(k):
    return k > 0 and (k & (k - 1)) == 0


class GridSymbol:
    """Complex samples of a symbol on a uniform phase-space grid.

    Axes are ordered ``q1..qn`` then the momentum-like axes.  In the
    ``"qp"`` representation the latter are ``p1..pn`` on the centred grid
    ``p_k = (k - N/2) dp``; in the ``"qu"`` representation they are
    ``u1..un`` with ``du = 2*pi*hbar / (N dp)``, also centred.
    """

    REPS = ("qp", "qu")

    def __init__(self, data, q0, dq, dp, hbar, rep="qp"):
        data = np.asarray(data, dtype=complex)
        n = data.ndim // 2
        if data.ndim != 2 * n or n not in (1, 2):
            raise ValueError("grid symbols need n in {1, 2} and 2n axes")
        for k in data.shape:
            if not _is_pow2(k):
                raise ValueError(f"grid size {k} is not a power of two")
        if rep not in self.REPS:
            raise ValueError(f"unknown representation {rep!r}")
        self.data = data
        self.n = n
        self.q0 = tuple(float(v) for v in np.broadcast_to(q0, (n,)))
        self.dq = tuple(float(v) for v in np.broadcast_to(dq, (n,)))
        self.dp = tuple(float(v) for v in np.broadcast_to(dp, (n,)))
        self.hbar = float(hbar)
        if self.hbar <= 0:
            raise ValueError("hbar must be positive")
        self.rep = rep

    # grids ------------------------------------------------------------------
    @property
    def nq(self):
        return self.data.shape[:self.n]

    @property
    def np_(self):
        return self.data.shape[self.n:]

    @property
    def du(self):
        return tuple(2 * np.pi * self.hbar / (N * d) for N, d in zip(self.np_, self.dp))

    def q_axis(self, j):
        return self.q0[j] + self.dq[j] * np.arange(self.nq[j])

    def p_axis(self, j):
        N = self.np_[j]
        return (np.arange(N) - N // 2) * self.dp[j]

    def u_axis(self, j):
        N = self.np_[j]
        return (np.arange(N) - N // 2) * self.du[j]

    def mesh(self):
        """Open meshes ``(q_1..q_n, p_1..p_n)`` (or ``u``) broadcastable to data."""
        axes = [self.q_axis(j) for j in range(self.n)]
        axes += [(self.p_axis if self.rep == "qp" else self.u_axis)(j) for j in range(self.n)]
        return np.meshgrid(*axes, indexing="ij", sparse=True)

    def like(self, data, rep=None):
        return GridSymbol(data, self.q0, self.dq, self.dp, self.hbar, rep or self.rep)

    def same_grid(self, other):
        return (self.data.shape == other.data.shape and self.q0 == other.q0
                and self.dq == other.dq and self.dp == other.dp
                and self.hbar == other.hbar)

    @classmethod
    def sample(cls, func, n, N, dq, hbar, q_center=0.0, dp=None, Np=None):
        """Sample ``func(q_list, p_list)`` on a grid.

        By default ``dp = pi*hbar/(N dq)`` so that ``du = 2 dq``; that is the
        lattice on which the midpoint convolution closes.
        """
        Np = N if Np is None else Np
        dq = float(dq)
        if dp is None:
            dp = np.pi * hbar * 2 / (Np * 2 * dq)
        q0 = float(q_center) - dq * (N // 2)
        shape = (N,) * n + (Np,) * n
        tmp = cls(np.zeros(shape), q0, dq, dp, hbar)
        m = tmp.mesh()
        vals = np.broadcast_to(func(m[:n], m[n:]), shape)
        return tmp.like(np.array(vals, dtype=complex))

    def fourier(self):
        return wigner_fourier(self) if self.rep == "qp" else inverse_wigner_fourier(self)


def _centered_phase_fft(data, axes, sign):
    # sum_k exp(sign*2*pi*i*(m-N/2)(k-N/2)/N) data[k] for centred indices
    out = np.fft.ifftshift(data, axes=axes)
    out = np.fft.ifft(out, axis=axes[0]) * data.shape[axes[0]] if sign > 0 else np.fft.fft(out, axis=axes[0])
    for ax in axes[1:]:
        out = np.fft.ifft(out, axis=ax) * data.shape[ax] if sign > 0 else np.fft.fft(out, axis=ax)
    return np.fft.fftshift(out, axes=axes)


def wigner_fourier(f):
    """``f~(q,u) = (2 pi hbar)^-n sum_p exp(i u p / hbar) f(q,p) dp^n``."""
    if f.rep != "qp":
        raise ValueError("expected a (q,p) grid symbol")
    n = f.n
    axes = tuple(range(n, 2 * n))
    out = _centered_phase_fft(f.data, axes, +1)
    out = out * np.prod(f.dp) / (2 * np.pi * f.hbar) ** n
    return f.like(out, rep="qu")


def inverse_wigner_fourier(g):
    """Inverse of :func:`wigner_fourier`: ``f(q,p) = sum_u exp(-i u p/hbar) f~ du^n``."""
    if g.rep != "qu":
        raise ValueError("expected a (q,u) grid symbol")
    n = g.n
    axes = tuple(range(n, 2 * n))
    out = _centered_phase_fft(g.data, axes, -1) * np.prod(g.du)
    return g.like(out, rep="qp")


# ---------------------------------------------------------------------------
# serialization

_POLY_MAGIC = "MAGSTAR-POLY"
_GRID_MAGIC = b"MSGRID\x00\x00"
_GRID_VERSION = 1


def serialize(symbol):
    """Serialise a :class:`PolySymbol` (UTF-8 text) or :class:`GridSymbol` (binary)."""
    if isinstance(symbol, PolySymbol):
        return f"{_POLY_MAGIC} 1 n={symbol.n}\n{symbol}\n".encode()
    if isinstance(symbol, GridSymbol):
        n = symbol.n
        head = struct.pack("<8sHBB", _GRID_MAGIC, _GRID_VERSION, n, GridSymbol.REPS.index(symbol.rep))
        axes = b""
        for j in range(n):
            axes += struct.pack("<Idd", symbol.nq[j], symbol.q0[j], symbol.dq[j])
        for j in range(n):
            axes += struct.pack("<Id", symbol.np_[j], symbol.dp[j])
        body = np.ascontiguousarray(symbol.data).astype("<c16").tobytes()
        return head + axes + struct.pack("<d", symbol.hbar) + body
    raise TypeError(f"cannot serialise {type(symbol).__name__}")


def deserialize(blob):
    """Inverse of :func:`serialize` (text is accepted for polynomials)."""
    if isinstance(blob, str):
        blob = blob.encode()
    if blob[:len(_POLY_MAGIC)] == _POLY_MAGIC.encode():
        text = blob.decode()
        head, _, rest = text.partition("\n")
        parts = head.split()
        if len(parts) != 3 or parts[1] != "1" or not parts[2].startswith("n="):
            raise FormatError(f"bad polynomial header {head!r}")
        return PolySymbol.parse(rest.strip(), int(parts[2][2:]))
    if len(blob) < 12:
        raise FormatError("payload too short")
    magic, version, n, rep = struct.unpack_from("<8sHBB", blob, 0)
    if magic != _GRID_MAGIC:
        raise FormatError("bad magic bytes")
    if version != _GRID_VERSION:
        raise FormatError(f"unsupported grid format version {version}")
    if n not in (1, 2) or rep > 1:
        raise FormatError("corrupt header")
    off = 12
    nq, q0, dq, npts, dp = [], [], [], [], []
    for _ in range(n):
        a, b, c = struct.unpack_from("<Idd", blob, off)
        nq.append(a), q0.append(b), dq.append(c)
        off += struct.calcsize("<Idd")
    for _ in range(n):
        a, b = struct.unpack_from("<Id", blob, off)
        npts.append(a), dp.append(b)
        off += struct.calcsize("<Id")
    (hbar,) = struct.unpack_from("<d", blob, off)
    off += 8
    shape = tuple(nq) + tuple(npts)
    count = int(np.prod(shape))
    if len(blob) - off != 16 * count:
        raise FormatError("payload size does not match header")
    data = np.frombuffer(blob, dtype="<c16", count=count, offset=off).reshape(shape)
    return GridSymbol(data.astype(complex), q0, dq, dp, hbar, GridSymbol.REPS[rep])


def monomials(n, max_degree):
    """All ``(qexp, pexp)`` pairs of total degree ``<= max_degree``."""
    out = []
    for e in iproduct(range(max_degree + 1), repeat=2 * n):
        if sum(e) <= max_degree:
            out.append((e[:n], e[n:]))
    return out
