"""Operator-matrix referee on a spatial grid.

Operators act on functions sampled at ``x_a = q0 + a h`` (``n = 1`` or ``2``
physical dimensions).  ``q`` is diagonal and ``p_j = -i hbar D_j - A_j(q)``
with ``D_j`` the spectral derivative.  Symbols are read back from kernels
``k(x, y) = K_xy / h^n`` through the Wigner transform at the chord midpoint,
after removing the chord phase ``exp{(i/hbar) int_y^x A dq}``.  That phase
is what makes the extracted symbol independent of the chart.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import comb, factorial

import numpy as np
import scipy.linalg
from sympy.utilities.iterables import multiset_permutations

from .geometry import (MagneticForm, FieldError, field_names, integrate_unit, substitute,
                       valatin_polys, _pair_ring)
from .starprod import grid_magnetic_product, magnetic_weyl_product
from .symbols import (GridSymbol, PolySymbol, compile_poly, inverse_wigner_fourier, poly_ring,
                      _centered_phase_fft)

__all__ = [
    "OracleError",
    "Grid",
    "GaugeChart",
    "OperatorMatrix",
    "apply_poly",
    "quantize",
    "quantize_function",
    "extract_symbol",
    "interior",
    "relative_error",
    "product_referee",
    "state_referee",
    "evolution_operator",
    "evolution_symbol",
    "landau_level_symbol",
    "landau_husimi",
    "coherent_average",
    "evolution_referee",
    "gaussian_star",
    "gaussian_weyl_phase",
]


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    """Uniform grid: ``N`` points per axis, spacing ``h``, centred at ``center``.

    The point layout matches :meth:`GridSymbol.sample`:
    ``x_a = center - h N/2 + a h``.
    """

    n: int
    N: int
    h: float
    center: float = 0.0

    def __post_init__(self):
        if self.n not in (1, 2):
            raise ValueError("oracle grids support n = 1 or 2")
        if self.N < 4 or self.N % 2:
            raise ValueError("grid size must be even and >= 4")

    @property
    def q0(self):
        return self.center - self.h * (self.N // 2)

    def axis(self):
        return self.q0 + self.h * np.arange(self.N)

    @property
    def size(self):
        return self.N ** self.n

    @property
    def shape(self):
        return (self.N,) * self.n

    def points(self):
        """``(N^n, n)`` array of grid points in C order."""
        ax = self.axis()
        mesh = np.meshgrid(*([ax] * self.n), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _potential_phase_polys(n, A):
    """``Gamma(a, b) = int_b^a A . dq`` along the chord, as a polynomial in ``(a, b)``."""
    W = _pair_ring(n, ("s",))
    g = W.gens
    a, b, s = g[:n], g[n:2 * n], g[2 * n + 1]
    images = [b[l] + s * (a[l] - b[l]) for l in range(n)] + [g[2 * n]]
    acc = W.zero
    for j in range(n):
        acc += substitute(A[j], W, images) * (a[j] - b[j])
    acc = integrate_unit(acc, 2 * n + 1)
    return _pair_ring(n)({m[:-1]: c for m, c in acc.items()})


class GaugeChart:
    """Vector potential ``A(q)`` for a static field on a grid.

    ``F_jk = d_k A_j - d_j A_k`` is verified symbolically, so that
    ``[p_j, p_k] = i hbar F_kj``.
    """

    def __init__(self, field, potential, grid, hbar, name="custom"):
        if field.n != grid.n:
            raise ValueError("field and grid dimensions differ")
        if field.time_dependent:
            raise FieldError("oracle charts need a static field")
        R = field.ring
        A = [p if hasattr(p, "ring") else field._coerce(p, (j,)) for j, p in enumerate(potential)]
        if len(A) != field.n:
            raise ValueError("potential needs n components")
        g = R.gens
        for j in range(field.n):
            for k in range(field.n):
                if A[j].diff(g[k]) - A[k].diff(g[j]) != field.F[j][k]:
                    raise FieldError(f"curl of the potential does not reproduce F at ({j + 1},{k + 1})")
        self.field, self.A, self.grid, self.hbar, self.name = field, A, grid, float(hbar), name
        n = field.n
        self._Anum = [compile_poly(a, n + 1, real=True) for a in A]
        self._gamma = compile_poly(_potential_phase_polys(n, A), 2 * n + 1, real=True)

    @classmethod
    def symmetric(cls, field, grid, hbar):
        """Radial gauge ``A_j(q) = int_0^1 s F_jk(s q) q^k ds`` (``B q^perp / 2`` for constant B)."""
        n = field.n
        V = valatin_polys(field)
        R = field.ring
        images = list(R.gens[:n]) + [R.zero] * n + [R.gens[n]]
        A = [substitute(v, R, images) for v in V]
        return cls(field, A, grid, hbar, "symmetric")

    @classmethod
    def landau(cls, field, grid, hbar):
        """``A_1 = int_0^{q2} F_12(q1, s) ds``, other components zero (n = 2)."""
        if field.n != 2:
            if field.is_zero():
                return cls(field, [field.ring.zero] * field.n, grid, hbar, "landau")
            raise ValueError("Landau chart is defined for n = 2")
        R = field.ring
        W = poly_ring(field_names(2) + ("s",))
        q1, q2, t, s = W.gens
        F12 = substitute(field.F[0][1], W, [q1, s * q2, t])
        acc = integrate_unit(F12 * q2, 3)
        A1 = R({m[:-1]: c for m, c in acc.items()})
        return cls(field, [A1, R.zero], grid, hbar, "landau")

    def potential(self, X):
        X = np.asarray(X, dtype=float)
        args = [X[..., j] for j in range(self.grid.n)] + [0.0]
        return np.stack([np.broadcast_to(f(*args), X.shape[:-1]) for f in self._Anum], axis=-1)

    def chord_phase(self, X, Y):
        """``int_Y^X A . dq`` along the straight segment (broadcasting)."""
        X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
        n = self.grid.n
        X, Y = np.broadcast_arrays(X, Y)
        args = [X[..., j] for j in range(n)] + [Y[..., j] for j in range(n)] + [0.0]
        return np.broadcast_to(self._gamma(*args), X.shape[:-1])


@dataclass
class OperatorMatrix:
    matrix: np.ndarray
    label: str = ""

    def __matmul__(self, other):
        return OperatorMatrix(self.matrix @ other.matrix, f"({self.label})({other.label})")

    def hermiticity_defect(self):
        M = self.matrix
        return float(np.abs(M - M.conj().T).max() / max(np.abs(M).max(), 1e-300))


# ---------------------------------------------------------------------------
# operator polynomials

def _momentum(chart, j, psi):
    """``p_j psi`` for ``psi`` of shape ``grid.shape + (K,)``."""
    g = chart.grid
    k = 2 * np.pi * np.fft.fftfreq(g.N, d=g.h)
    if g.N % 2 == 0:
        k[g.N // 2] = 0.0  # odd-symmetric derivative drops the Nyquist mode
    shape = [1] * psi.ndim
    shape[j] = g.N
    d = np.fft.ifft(np.fft.fft(psi, axis=j) * (1j * k).reshape(shape), axis=j)
    A = chart.potential(g.points()).reshape(g.shape + (g.n,))[..., j]
    return -1j * chart.hbar * d - A.reshape(g.shape + (1,)) * psi


def _position(chart, j, psi):
    g = chart.grid
    shape = [1] * psi.ndim
    shape[j] = g.N
    return g.axis().reshape(shape) * psi


def _apply_word(chart, word, psi):
    # the rightmost letter acts first
    for letter in reversed(word):
        kind, j = letter
        psi = _position(chart, j, psi) if kind == "q" else _momentum(chart, j, psi)
    return psi


def _weyl_words(qe, pe):
    letters = [("q", j) for j, e in enumerate(qe) for _ in range(e)]
    letters += [("p", j) for j, e in enumerate(pe) for _ in range(e)]
    words = list(multiset_permutations(letters))
    return [(w, 1.0 / len(words)) for w in words] or [([], 1.0)]


def _tau_words(qe, pe, tau):
    # q^a p^b -> sum_k C(a,k) tau^k (1-tau)^(a-k) q^(a-k) [Weyl in p] q^k, per axis
    pwords = _weyl_words((0,) * len(qe), pe)
    out = []
    n = len(qe)
    ranges = [range(e + 1) for e in qe]
    import itertools
    for ks in itertools.product(*ranges):
        w = 1.0
        for a, k in zip(qe, ks):
            w *= comb(a, k) * tau ** k * (1 - tau) ** (a - k)
        if w == 0:
            continue
        left = [("q", j) for j in range(n) for _ in range(qe[j] - ks[j])]
        right = [("q", j) for j in range(n) for _ in range(ks[j])]
        for pw, pwt in pwords:
            out.append((left + pw + right, w * pwt))
    return out


def _coerce_complex(c):
    return complex(float(c.x), float(c.y)) if hasattr(c, "x") else complex(c)


def apply_poly(f, chart, psi, ordering="weyl"):
    """Apply the quantization of the polynomial ``f`` to state(s) ``psi``.

    ``ordering`` is ``"weyl"`` (average over all letter orderings) or
    ``("tau", tau)``.  ``psi`` has shape ``grid.shape`` or ``grid.shape + (K,)``.
    """
    g = chart.grid
    if f.n != g.n:
        raise ValueError("symbol and grid dimensions differ")
    psi = np.asarray(psi, dtype=complex)
    single = psi.shape == g.shape
    if single:
        psi = psi[..., None]
    out = np.zeros_like(psi)
    for (qe, pe, k), c in f.terms().items():
        coeff = _coerce_complex(c) * chart.hbar ** k
        if ordering == "weyl":
            words = _weyl_words(qe, pe)
        elif isinstance(ordering, tuple) and ordering[0] == "tau":
            words = _tau_words(qe, pe, float(ordering[1]))
        else:
            raise ValueError(f"unknown ordering {ordering!r}")
        for w, wt in words:
            out += coeff * wt * _apply_word(chart, w, psi)
    return out[..., 0] if single else out


def quantize(f, chart, ordering="weyl"):
    """Dense matrix of the quantized polynomial ``f``."""
    g = chart.grid
    eye = np.eye(g.size, dtype=complex).reshape(g.shape + (g.size,))
    M = apply_poly(f, chart, eye, ordering).reshape(g.size, g.size)
    return OperatorMatrix(M, str(f))


def quantize_function(func, chart, chunk=8):
    """Kernel quantization of a numeric symbol ``func(q_list, p_list)``.

    ``k(x, y) = (2 pi hbar)^-n int func((x+y)/2, p) exp{i p (x-y)/hbar} dp
    * exp{(i/hbar) int_y^x A dq}``; the momentum integral runs over the full
    grid band with ``2N`` samples per axis.  Intended for symbols that decay
    in ``p`` well inside the band and in ``q`` inside the box.
    """
    g = chart.grid
    n, N, h, hb = g.n, g.N, g.h, chart.hbar
    Np = 2 * N
    dp = np.pi * hb / (N * h)
    pax = (np.arange(Np) - Np // 2) * dp
    cax = g.q0 + 0.5 * h * np.arange(2 * N - 1)  # centres (a + b) h / 2
    # k0[s..., m...] for centre index s and offset m (u = (m - N) h)
    k0 = np.zeros((2 * N - 1,) * n + (Np,) * n, dtype=complex)
    if n == 1:
        vals = func([cax[:, None]], [pax[None, :]])
        vals = np.broadcast_to(vals, (2 * N - 1, Np))
        k0 = _centered_phase_fft(np.asarray(vals, dtype=complex), (1,), +1) * dp / (2 * np.pi * hb)
    else:
        for s0 in range(0, 2 * N - 1, chunk):
            c1 = cax[s0:s0 + chunk]
            vals = func([c1[:, None, None, None], cax[None, :, None, None]],
                        [pax[None, None, :, None], pax[None, None, None, :]])
            vals = np.broadcast_to(vals, (len(c1), 2 * N - 1, Np, Np))
            k0[s0:s0 + chunk] = _centered_phase_fft(np.asarray(vals, dtype=complex), (2, 3), +1) * dp ** 2 / (2 * np.pi * hb) ** 2
    a = np.arange(N)
    S = a[:, None] + a[None, :]
    D = a[:, None] - a[None, :] + N
    if n == 1:
        K = k0[S, D]
    else:
        K = k0[S[:, None, :, None], S[None, :, None, :], D[:, None, :, None], D[None, :, None, :]]
        K = K.reshape(N * N, N * N)
    P = g.points()
    phase = chart.chord_phase(P[:, None, :], P[None, :, :])
    K = K.reshape(g.size, g.size) * np.exp(1j * phase / hb) * h ** n
    return OperatorMatrix(K, "kernel")


# ---------------------------------------------------------------------------
# symbol extraction

def _half_shift_matrix(N):
    """Unitary trigonometric interpolation onto ``x_a + h/2``."""
    k = np.fft.fftfreq(N) * N
    mult = np.exp(1j * np.pi * k / N)
    return np.fft.ifft(mult[:, None] * np.fft.fft(np.eye(N), axis=0), axis=0)


def extract_symbol(op, chart, band="full", gauge_phase=True):
    """Symbol of ``op`` on the grid as a ``(q, p)`` :class:`GridSymbol`.

    ``band="half"`` uses only even offsets ``u = 2 m h`` (``du = 2 dq``, the
    layout of :func:`grid_magnetic_product`).  ``band="full"`` also uses odd
    offsets through half-grid interpolation, doubling the momentum range.
    Symbols that do not decay in ``p`` (the identity, say) fold onto the half
    band, so use ``"full"`` for those.
    ``gauge_phase=False`` skips the chord phase (the chart-dependent transform).
    """
    g = chart.grid
    n, N, h, hb = g.n, g.N, g.h, chart.hbar
    K = np.asarray(op.matrix if isinstance(op, OperatorMatrix) else op).reshape(g.shape * 2)
    m = np.arange(N) - N // 2
    c = np.arange(N)
    if band == "half":
        step = 2
        XI = c[:, None] + m[None, :]
        YI = c[:, None] - m[None, :]
        parity = np.zeros((N, N), dtype=int)
    elif band == "full":
        step = 1
        XI = c[:, None] + np.floor_divide(m, 2)[None, :]
        YI = c[:, None] - (-np.floor_divide(-m, 2))[None, :]
        parity = np.broadcast_to((m % 2)[None, :], (N, N))
    else:
        raise ValueError("band must be 'full' or 'half'")
    valid = (XI >= 0) & (XI < N) & (YI >= 0) & (YI < N)
    XIc, YIc = np.clip(XI, 0, N - 1), np.clip(YI, 0, N - 1)
    S = _half_shift_matrix(N)
    qax = g.axis()
    u = m * h * step
    Xpos = qax[:, None] + u[None, :] / 2
    Ypos = qax[:, None] - u[None, :] / 2
    if n == 1:
        Ks = [K, S @ K @ S.conj().T]
        out = np.where(parity == 0, Ks[0][XIc, YIc], Ks[1][XIc, YIc])
        out = np.where(valid, out, 0)
        if gauge_phase:
            ph = chart.chord_phase(Xpos[..., None], Ypos[..., None])
            out = out * np.exp(-1j * ph / hb)
    else:
        out = np.zeros((N, N, N, N), dtype=complex)
        for p1 in (0, 1):
            for p2 in (0, 1):
                Kp = K
                if p1:
                    Kp = np.einsum("ax,xyuv,bu->aybv", S, Kp, S.conj(), optimize=True)
                if p2:
                    Kp = np.einsum("ax,uxvy,by->uavb", S, Kp, S.conj(), optimize=True)
                vals = Kp[XIc[:, None, :, None], XIc[None, :, None, :],
                          YIc[:, None, :, None], YIc[None, :, None, :]]
                mask = ((parity[:, None, :, None] == p1) & (parity[None, :, None, :] == p2)
                        & valid[:, None, :, None] & valid[None, :, None, :])
                out = np.where(mask, vals, out)
        if gauge_phase:
            X = np.stack(np.broadcast_arrays(Xpos[:, None, :, None], Xpos[None, :, None, :]), axis=-1)
            Y = np.stack(np.broadcast_arrays(Ypos[:, None, :, None], Ypos[None, :, None, :]), axis=-1)
            out = out * np.exp(-1j * chart.chord_phase(X, Y) / hb)
    dp = 2 * np.pi * hb / (N * h * step)
    sym = GridSymbol(out / h ** n, g.q0, h, dp, hb, rep="qu")
    return inverse_wigner_fourier(sym)


def interior(data, n):
    """Interior half-window of a ``(q, p)`` array (both q and p axes)."""
    sl = tuple(slice(s // 4, 3 * s // 4) for s in data.shape)
    return data[sl]


def relative_error(a, b, n):
    """Max interior difference relative to the interior peak of ``b``."""
    A = interior(np.asarray(a), n)
    B = interior(np.asarray(b), n)
    return float(np.abs(A - B).max() / max(np.abs(B).max(), 1e-300))


# ---------------------------------------------------------------------------
# referees

def product_referee(f, g, chart, t=0.0):
    """Compare the matrix product of two kernel-quantized symbols with the
    grid magnetic product.  ``f``/``g`` are numeric symbols ``func(q, p)``.

    Returns ``(relative_error, oracle_symbol, starprod_symbol)``.
    """
    gr = chart.grid
    Kf = quantize_function(f, chart)
    Kg = quantize_function(g, chart)
    sym = extract_symbol(Kf @ Kg, chart, band="half")
    fs = GridSymbol.sample(f, gr.n, gr.N, gr.h, chart.hbar, q_center=gr.center)
    gs = GridSymbol.sample(g, gr.n, gr.N, gr.h, chart.hbar, q_center=gr.center)
    ref = grid_magnetic_product(fs, gs, chart.field, t)
    return relative_error(sym.data, ref.data, gr.n), sym, ref


def _packet(grid, center, width, momentum, hbar):
    X = grid.points()
    c = np.asarray(center, dtype=float)
    k = np.asarray(momentum, dtype=float)
    psi = np.exp(-((X - c) ** 2).sum(-1) / (2 * width ** 2) + 1j * (X @ k) / hbar)
    return psi.reshape(grid.shape)


def state_referee(f, g, chart, ordering="weyl", center=None, width=1.0, momentum=None):
    """``|Op(f) Op(g) psi - Op(f * g) psi| / |Op(f) Op(g) psi|`` on a wave packet.

    The product ``f * g`` is the exact magnetic Weyl product (or the tau
    product for ``ordering=("tau", tau)``).
    """
    from .starprod import tau_magnetic_product
    gr = chart.grid
    center = [gr.center] * gr.n if center is None else center
    momentum = [0.0] * gr.n if momentum is None else momentum
    psi = _packet(gr, center, width, momentum, chart.hbar)
    lhs = apply_poly(f, chart, apply_poly(g, chart, psi, ordering), ordering)
    if ordering == "weyl":
        fg = magnetic_weyl_product(f, g, chart.field)
    else:
        fg = tau_magnetic_product(f, g, Fraction(ordering[1]).limit_denominator(), chart.field)
    rhs = apply_poly(fg, chart, psi, ordering)
    return float(np.linalg.norm(lhs - rhs) / max(np.linalg.norm(lhs), 1e-300))


def evolution_operator(H, chart, t):
    """``exp(-i t H / hbar)`` for ``H`` a polynomial or an :class:`OperatorMatrix`."""
    Hm = H.matrix if isinstance(H, OperatorMatrix) else quantize(H, chart).matrix
    Hm = 0.5 * (Hm + Hm.conj().T)
    if chart.grid.size > 4096:
        raise OracleError("dense exponential limited to 4096 grid points")
    return OperatorMatrix(scipy.linalg.expm(-1j * t * Hm / chart.hbar), f"exp(-it{getattr(H, 'label', H)})")


def evolution_symbol(H, chart, t, band="full"):
    """Symbol of ``exp(-i t H / hbar)`` extracted from the dense exponential."""
    return extract_symbol(evolution_operator(H, chart, t), chart, band=band)


def _radial_coefficients(H):
    """``c_m`` with ``H = sum_m c_m (p1^2 + p2^2)^m``; raises unless ``H`` is of that form."""
    if H.n != 2 or any(H.degree_q()) or H.hbar_degree():
        raise ValueError("Landau-level reduction needs an hbar-free H(|p|^2) in n = 2")
    rest = H
    coeffs = {}
    r2 = PolySymbol.parse("p1^2 + p2^2", 2)
    for m in range(H.total_degree() // 2, -1, -1):
        c = rest.terms().get(((0, 0), (2 * m, 0), 0))
        if c is not None and c != 0:
            coeffs[m] = complex(float(c.x), float(c.y))
            rest = rest - (r2 ** m) * PolySymbol.from_terms(2, {((0, 0), (0, 0), 0): c})
    if not rest.is_zero():
        raise ValueError("H is not a polynomial in p1^2 + p2^2")
    return coeffs


def _landau_eigenvalue_poly(m, hb):
    """Eigenvalue of the Weyl quantization of ``(Q^2 + P^2)^m`` on level ``k``,
    as polynomial coefficients in ``k`` (highest first)."""
    vals = []
    for k in range(m + 1):
        acc = Fraction(0)
        for i in range(k + 1):
            acc += Fraction(comb(k, i) * (-1) ** i, factorial(i)) * factorial(m + i) * 2 ** (m + i + 1)
        vals.append(Fraction((-1) ** k, 2) * Fraction(1, 2 ** m) * acc)
    # Lagrange interpolation through k = 0..m gives the exact polynomial
    coeffs = np.zeros(m + 1)
    for k, v in enumerate(vals):
        basis = np.poly1d([1.0])
        for j in range(m + 1):
            if j != k:
                basis = basis * np.poly1d([1.0, -j]) / (k - j)
        coeffs = coeffs + float(v) * np.pad(basis.coeffs, (m + 1 - len(basis.coeffs), 0))
    return coeffs * hb ** m


def landau_level_symbol(H, F21, t, hbar, p, eps0=5e-4, order=4):
    """Symbol of ``exp(-i t H / hbar)`` for ``H = H(|p|^2)`` and constant ``F``.

    ``H`` is a function of the Landau-level number operator, so its symbol is
    ``sum_k exp(-i t E_k / hbar) 2 (-1)^k exp(-z/2) L_k(z)`` with
    ``z = 2|p|^2 / (hbar |F21|)``.  The series converges only conditionally;
    it is Abel-summed with weights ``exp(-eps k)`` and extrapolated to
    ``eps = 0`` from ``order`` values ``eps0, 2 eps0, ...``.  ``t`` may be
    complex.  ``p`` has shape ``(..., 2)``.
    """
    coeffs = _radial_coefficients(H)
    hb = hbar * abs(float(F21))
    K = int(40.0 / eps0) + 1
    k = np.arange(K, dtype=float)
    E = np.zeros(K, complex)
    for m, c in coeffs.items():
        E += c * np.polyval(_landau_eigenvalue_poly(m, hb), k)
    phase = np.exp(-1j * t * E / hbar)
    p = np.asarray(p, float)
    z = np.ravel((p[..., 0] ** 2 + p[..., 1] ** 2) * 2.0 / hb)
    eps = eps0 * np.arange(1, order + 1)
    damp = np.exp(-np.outer(eps, k))
    weights = damp * phase[None, :] * 2.0 * (-1.0) ** k[None, :]
    acc = np.zeros((order, z.size), complex)
    prev = np.exp(-z / 2)
    cur = (1 - z) * prev
    acc += weights[:, :1] * prev[None, :]
    for j in range(1, K):
        acc += weights[:, j:j + 1] * cur[None, :]
        prev, cur = cur, ((2 * j + 1 - z) * cur - j * prev) / (j + 1)
    lag = [np.prod([-eps[b] / (eps[a] - eps[b]) for b in range(order) if b != a]) for a in range(order)]
    out = sum(w * acc[a] for a, w in enumerate(lag))
    return out.reshape(p.shape[:-1])


def landau_husimi(H, F21, t, hbar, z, levels=None):
    """Coherent-state diagonal ``<z| exp(-i t H / hbar) |z>`` for ``H = H(|p|^2)``.

    ``z = (p1, p2)``; the coherent states are those of the Landau ladder
    with ``hbar' = hbar |F21|``, so the level populations are Poisson with
    mean ``|z|^2 / (2 hbar')``.
    """
    from scipy.special import gammaln
    coeffs = _radial_coefficients(H)
    hb = hbar * abs(float(F21))
    a2 = (z[0] ** 2 + z[1] ** 2) / (2 * hb)
    if levels is None:
        levels = int(a2 + 40 * np.sqrt(a2 + 1) + 200)
    k = np.arange(levels, dtype=float)
    E = np.zeros(levels, complex)
    for m, c in coeffs.items():
        E += c * np.polyval(_landau_eigenvalue_poly(m, hb), k)
    logw = -a2 + k * np.log(max(a2, 1e-300)) - gammaln(k + 1)
    return complex(np.sum(np.exp(logw - 1j * t * E / hbar)))


def coherent_average(values, z, hbar, nodes=8):
    """Gaussian smoothing ``(1/pi) int f(z + sqrt(hbar) s) exp(-|s|^2) ds`` in the plane.

    ``values`` maps an array of points of shape ``(M, 2)`` to ``M`` values;
    the integral uses a tensor Gauss-Hermite rule.
    """
    s, w = np.polynomial.hermite.hermgauss(nodes)
    S1, S2 = np.meshgrid(s, s, indexing="ij")
    W = np.outer(w, w).ravel() / np.pi
    pts = np.stack([z[0] + np.sqrt(hbar) * S1.ravel(), z[1] + np.sqrt(hbar) * S2.ravel()], -1)
    return complex(np.sum(W * np.asarray(values(pts))))


def evolution_referee(H, chart, t, dt=1e-6, tol=1e-4, band="half"):
    """Symbol of ``exp(-i t H / hbar)`` with a check of ``i hbar dU/dt = H * U``.

    The time derivative of the extracted symbol (central difference) is
    compared with the symbol of ``H U`` on the interior window.  Returns
    ``(symbol, residual)``; raises :class:`OracleError` above ``tol``.
    """
    Hm = H if isinstance(H, OperatorMatrix) else quantize(H, chart)
    U = evolution_operator(Hm, chart, t)
    sym = extract_symbol(U, chart, band=band)
    if t == 0:
        return sym, 0.0
    up = extract_symbol(evolution_operator(Hm, chart, t + dt), chart, band=band)
    dn = extract_symbol(evolution_operator(Hm, chart, t - dt), chart, band=band)
    H_sym = 0.5 * (Hm.matrix + Hm.matrix.conj().T)
    HU = extract_symbol(OperatorMatrix(H_sym @ U.matrix), chart, band=band)
    lhs = 1j * chart.hbar * (up.data - dn.data) / (2 * dt)
    res = relative_error(lhs, HU.data, chart.grid.n)
    if not res < tol:
        raise OracleError(f"evolution equation residual {res:.2e} exceeds {tol:.1e}")
    return sym, res


def gaussian_star(A1, c1, A2, c2, W, X):
    """Closed-form twisted product of two Gaussians.

    ``f = exp(-(x-c1) A1 (x-c1))`` and ``g`` likewise; the product multiplies
    the Fourier transforms by ``exp(i a^T W b)``.  ``X`` has shape ``(..., d)``.
    For constant ``F`` the magnetic Weyl product uses
    ``W = -(hbar/2) [[0, I], [-I, 0]] + (hbar/2) [[0, 0], [0, F]]``.
    """
    A1, A2, W = np.asarray(A1, float), np.asarray(A2, float), np.asarray(W, float)
    d = A1.shape[0]
    Q = np.zeros((2 * d, 2 * d), complex)
    Q[:d, :d] = 0.5 * np.linalg.inv(A1)
    Q[d:, d:] = 0.5 * np.linalg.inv(A2)
    Q[:d, d:] = -1j * W
    Q[d:, :d] = -1j * W.T

    def pref(A):
        return (2 * np.pi) ** (-d) * np.pi ** (d / 2) / np.sqrt(np.linalg.det(A))

    sq = np.prod(np.sqrt(np.linalg.eigvals(Q)))
    v = np.concatenate([X - np.asarray(c1), X - np.asarray(c2)], axis=-1)
    quad = np.einsum("...i,ij,...j->...", v, np.linalg.inv(Q), v)
    return pref(A1) * pref(A2) * (2 * np.pi) ** d / sq * np.exp(-0.5 * quad)


def gaussian_weyl_phase(n, hbar, F=None):
    """``W`` matrix for :func:`gaussian_star` (constant ``F`` as an ``n x n`` array)."""
    W = np.zeros((2 * n, 2 * n))
    W[:n, n:] = -hbar / 2 * np.eye(n)
    W[n:, :n] = hbar / 2 * np.eye(n)
    if F is not None:
        W[n:, n:] = hbar / 2 * np.asarray(F, float)
    return W
