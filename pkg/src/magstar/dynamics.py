"""Classical flows, WKB symbols of the evolution operator and their membranes.

The charged particle obeys

    q' = dH/dp,   p' = -dH/dq - F(t, q) dH/dp + E(t, q)

and the infinitely heavy companion ``lambda`` keeps ``q = q0`` while its
momentum integrates ``E(t, q0)``.  The WKB symbol is ``J^{-1/2} exp{(i/hbar) S}``
with base point ``x0`` solving ``x = (gamma + lambda)/2 + (0; A^s(gamma_q, q0))``.

Membrane areas are evaluated as loop integrals of the primitive
``p.dq + A(z, z_c).dz`` where ``A`` is the two-point potential of the
space-time form ``F + E_j dq^j ^ dt`` (closed by Faraday's law), so curved
trajectory sides only need a one-dimensional quadrature.

Flows, Newton solves and action integrals are vectorised over a leading
batch axis of initial points.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dfield
from fractions import Fraction

import numpy as np
from scipy.integrate import simpson

from .geometry import (MagneticForm, FieldError, PolyFunction, electric_polys, field_names, is_exact,
                       substitute, valatin_polys, valatin_potential, _pair_ring)
from .groupoid import left_right_maps, reconstruct
from .symbols import GridSymbol, PolySymbol, compile_poly, gauss, poly_ring

__all__ = [
    "DynamicsError",
    "CausticError",
    "Hamiltonian",
    "FlowResult",
    "WkbData",
    "magnetic_flow",
    "virtual_flow",
    "lifted_flow_check",
    "wkb_symbol",
    "wkb_batch",
    "marinov_check",
    "trotter_symbol",
    "contact_checks",
    "residuals_vanish",
    "klein_gordon_symbol",
    "spacetime_form",
]


class DynamicsError(RuntimeError):
    pass


class CausticError(DynamicsError):
    """The Jacobian fell below the validity threshold."""

    def __init__(self, J, delta):
        super().__init__(f"Jacobian {J:.3e} below validity threshold {delta}")
        self.J = J


def _call(fn, args, shape):
    return np.broadcast_to(fn(*args), shape)


def _array_function(polys, nv):
    """Vectorised evaluation of a list (or list of lists) of polynomials.

    Constant entries are filled once; only the others are called per point.
    """
    nested = isinstance(polys[0], list)
    entries = ([((i, j), p) for i, row in enumerate(polys) for j, p in enumerate(row)] if nested
               else [((i,), p) for i, p in enumerate(polys)])
    base = np.zeros((len(polys), len(polys[0])) if nested else (len(polys),))
    live = []
    for idx, p in entries:
        if p.is_ground:
            base[idx] = float(p.LC.x) if p else 0.0
        else:
            live.append((idx, compile_poly(p, nv, real=True)))

    def fn(X):
        out = np.broadcast_to(base, X.shape[:-1] + base.shape).copy()
        args = [X[..., a] for a in range(nv)]
        for idx, f in live:
            out[(Ellipsis,) + idx] = f(*args)
        return out

    return fn


# ---------------------------------------------------------------------------
# Hamiltonians

class Hamiltonian:
    """Classical Hamiltonian ``H(q, p)`` with gradient and Hessian.

    All methods take points of shape ``(..., 2n)``.
    """

    def __init__(self, n, value, grad, hess, label, symbol=None):
        self.n, self._value, self._grad, self._hess = n, value, grad, hess
        self.label, self.symbol = label, symbol

    @classmethod
    def from_symbol(cls, f):
        """Polynomial Hamiltonian (the ``hbar``-free part of ``f``)."""
        n = f.n
        f0 = PolySymbol.from_terms(n, {k: c for k, c in f.terms().items() if k[2] == 0})
        if any(c.y != 0 for c in f0.poly.values()):
            raise ValueError("Hamiltonian coefficients must be real")
        g = f0.poly.ring.gens
        nv = 2 * n
        val = compile_poly(f0.poly, nv, real=True)
        d = [f0.poly.diff(g[a]) for a in range(nv)]
        grad = _array_function(d, nv)
        hess = _array_function([[p.diff(g[b]) for b in range(nv)] for p in d], nv)

        def value(X):
            return _call(val, [X[..., a] for a in range(nv)], X.shape[:-1])

        return cls(n, value, grad, hess, str(f0), f0)

    @classmethod
    def nonrelativistic(cls, n, m=1):
        m = Fraction(m).limit_denominator(10 ** 9)
        terms = {((0,) * n, tuple(2 if k == j else 0 for k in range(n)), 0): 1 / (2 * m) for j in range(n)}
        return cls.from_symbol(PolySymbol.from_terms(n, terms))

    @classmethod
    def relativistic(cls, n, m=1.0, c=1.0, sign=+1):
        """``sign * c * sqrt(|p|^2 + m^2 c^2)``."""
        m, c, s = float(m), float(c), float(np.sign(sign))

        def root(X):
            a = np.sum(X[..., n:] ** 2, axis=-1) + (m * c) ** 2
            if np.any(a <= 0):
                raise DynamicsError("relativistic Hamiltonian outside its domain (|p|^2 + m^2c^2 <= 0)")
            return np.sqrt(a)

        def value(X):
            return s * c * root(X)

        def grad(X):
            r = root(X)[..., None]
            return np.concatenate([np.zeros(X.shape[:-1] + (n,)), s * c * X[..., n:] / r], axis=-1)

        def hess(X):
            p = X[..., n:]
            r = root(X)[..., None, None]
            out = np.zeros(X.shape[:-1] + (2 * n, 2 * n))
            out[..., n:, n:] = s * c * (np.eye(n) / r - p[..., :, None] * p[..., None, :] / r ** 3)
            return out

        label = f"{'+' if s > 0 else '-'}c*sqrt(p^2+m^2c^2)"
        return cls(n, value, grad, hess, label)

    def value(self, X):
        return self._value(np.asarray(X, float))

    def grad(self, X):
        return self._grad(np.asarray(X, float))

    def hess(self, X):
        return self._hess(np.asarray(X, float))


def _hamiltonian(H, n):
    if isinstance(H, Hamiltonian):
        out = H
    elif isinstance(H, PolySymbol):
        out = Hamiltonian.from_symbol(H)
    elif isinstance(H, str):
        out = Hamiltonian.from_symbol(PolySymbol.parse(H, n))
    else:
        raise TypeError("H must be a Hamiltonian, PolySymbol or polynomial string")
    if out.n != n:
        raise ValueError("Hamiltonian and field dimensions differ")
    return out


# ---------------------------------------------------------------------------
# field helpers (batched over leading axes)

def _field_derivs(F):
    """Compiled ``d_l F_jk`` and ``d_l E_j`` (for the variational equations)."""
    def build():
        n, g = F.n, F.ring.gens
        dF = [[[compile_poly(F.F[j][k].diff(g[l]), n + 1, real=True) for l in range(n)]
               for k in range(n)] for j in range(n)]
        dE = None
        if F.E is not None:
            dE = [[compile_poly(F.E[j].diff(g[l]), n + 1, real=True) for l in range(n)] for j in range(n)]
        return dF, dE
    return F.cached("dyn_derivs", build)


def _qargs(Q, t):
    n = Q.shape[-1]
    return [Q[..., j] for j in range(n)] + [np.asarray(t, float)]


def _dF(F, Q, t):
    dF, _ = _field_derivs(F)
    n = F.n
    A, sh = _qargs(Q, t), Q.shape[:-1]
    out = np.zeros(sh + (n, n, n))
    for j in range(n):
        for k in range(n):
            for l in range(n):
                out[..., j, k, l] = _call(dF[j][k][l], A, sh)
    return out


def _dE(F, Q, t):
    _, dE = _field_derivs(F)
    n = F.n
    sh = Q.shape[:-1]
    out = np.zeros(sh + (n, n))
    if dE is None:
        return out
    A = _qargs(Q, t)
    for j in range(n):
        for l in range(n):
            out[..., j, l] = _call(dE[j][l], A, sh)
    return out


def _E(F, Q, t):
    Q = np.asarray(Q, float)
    if F.E is None:
        return np.zeros(Q.shape)
    return np.asarray(F.electric(Q, t), float) * np.ones(Q.shape)


def _valatin_derivs(F):
    """Compiled ``A_j``, ``dA_j/da_k``, ``dA_j/db_k``, ``dA_j/dt`` in ``(a, b, t)``."""
    def build():
        n = F.n
        V = valatin_polys(F)
        g = _pair_ring(n).gens
        nv = 2 * n + 1
        A = [compile_poly(v, nv, real=True) for v in V]
        da = [[compile_poly(v.diff(g[k]), nv, real=True) for k in range(n)] for v in V]
        db = [[compile_poly(v.diff(g[n + k]), nv, real=True) for k in range(n)] for v in V]
        dt = [compile_poly(v.diff(g[2 * n]), nv, real=True) for v in V]
        return A, da, db, dt
    return F.cached("valatin_derivs", build)


def _alpha(F, a, b, t):
    """``A(a, b)`` at time ``t`` with its ``a``, ``b`` and ``t`` derivatives."""
    A, da, db, dt = _valatin_derivs(F)
    a, b = np.asarray(a, float), np.asarray(b, float)
    sh = np.broadcast_shapes(a.shape[:-1], b.shape[:-1], np.shape(t))
    n = F.n
    args = [a[..., j] for j in range(n)] + [b[..., j] for j in range(n)] + [np.asarray(t, float)]
    vec = lambda fs: np.stack([_call(f, args, sh) for f in fs], axis=-1)
    mat = lambda rows: np.stack([vec(row) for row in rows], axis=-2)
    return vec(A), mat(da), mat(db), vec(dt)


def _beta_derivs(F):
    def build():
        n = F.n
        b = electric_polys(F)
        g = _pair_ring(n).gens
        nv = 2 * n + 1
        return (compile_poly(b, nv, real=True),
                [compile_poly(b.diff(g[k]), nv, real=True) for k in range(n)],
                [compile_poly(b.diff(g[n + k]), nv, real=True) for k in range(n)])
    return F.cached("beta_derivs", build)


def _beta(F, a, b, t):
    """``beta(t, a, b) = int_a^b E dq`` with its ``a`` and ``b`` gradients."""
    f, fa, fb = _beta_derivs(F)
    a, b = np.asarray(a, float), np.asarray(b, float)
    sh = np.broadcast_shapes(a.shape[:-1], b.shape[:-1], np.shape(t))
    n = F.n
    args = [a[..., j] for j in range(n)] + [b[..., j] for j in range(n)] + [np.asarray(t, float)]
    return (_call(f, args, sh), np.stack([_call(g, args, sh) for g in fa], axis=-1),
            np.stack([_call(g, args, sh) for g in fb], axis=-1))


def spacetime_form(F):
    """Closed 2-form on ``(q1..qn, t)`` combining ``F`` and ``E dq ^ dt``."""
    def build():
        n = F.n
        if n + 1 > 4:
            raise FieldError("space-time form needs n <= 3")
        R = poly_ring(field_names(n + 1))
        images = list(R.gens[:n]) + [R.gens[n]]
        G = [[R.zero] * (n + 1) for _ in range(n + 1)]
        for j in range(n):
            for k in range(n):
                G[j][k] = substitute(F.F[j][k], R, images)
            if F.E is not None:
                e = substitute(F.E[j], R, images)
                G[n][j], G[j][n] = e, -e
        return MagneticForm(n + 1, G)
    return F.cached("spacetime", build)


# ---------------------------------------------------------------------------
# flows

@dataclass
class FlowResult:
    """Samples of a trajectory (or a batch of them) and the tangent map.

    ``states`` has shape ``(K, 2n)`` or ``(K, M, 2n)`` for a batch.
    """

    times: np.ndarray
    states: np.ndarray
    tangents: np.ndarray
    steps: int
    error: float
    order: int = 4

    @property
    def final(self):
        return self.states[-1]

    @property
    def monodromy(self):
        return self.tangents[-1]


def _rhs(H, F, X, t):
    n = F.n
    Q = X[..., :n]
    g = H.grad(X)
    Hq, Hp = g[..., :n], g[..., n:]
    Fm = F.matrix(Q, t)
    force = -Hq - np.einsum("...jk,...k->...j", Fm, Hp) + _E(F, Q, t)
    return np.concatenate([Hp, force], axis=-1)


def _jac(H, F, X, t):
    n = F.n
    Q = X[..., :n]
    Hp = H.grad(X)[..., n:]
    Hs = H.hess(X)
    Hqq, Hqp, Hpq, Hpp = Hs[..., :n, :n], Hs[..., :n, n:], Hs[..., n:, :n], Hs[..., n:, n:]
    Fm = F.matrix(Q, t)
    J = np.zeros(X.shape[:-1] + (2 * n, 2 * n))
    J[..., :n, :n] = Hpq
    J[..., :n, n:] = Hpp
    low = -Hqq - Fm @ Hpq + _dE(F, Q, t)
    if not F.is_constant():
        low = low - np.einsum("...jkl,...k->...jl", _dF(F, Q, t), Hp)
    J[..., n:, :n] = low
    J[..., n:, n:] = -Hqp - Fm @ Hpp
    return J


def _rk4(H, F, X0, t, steps, t0=0.0):
    X = np.array(X0, float)
    n2 = X.shape[-1]
    dt = (t - t0) / steps
    xs = np.zeros((steps + 1,) + X.shape)
    Ts = np.zeros((steps + 1,) + X.shape + (n2,))
    T = np.broadcast_to(np.eye(n2), X.shape + (n2,)).copy()
    xs[0], Ts[0] = X, T
    s = t0
    for k in range(steps):
        h2 = s + 0.5 * dt
        k1 = _rhs(H, F, X, s)
        K1 = _jac(H, F, X, s) @ T
        Xa = X + 0.5 * dt * k1
        k2 = _rhs(H, F, Xa, h2)
        K2 = _jac(H, F, Xa, h2) @ (T + 0.5 * dt * K1)
        Xb = X + 0.5 * dt * k2
        k3 = _rhs(H, F, Xb, h2)
        K3 = _jac(H, F, Xb, h2) @ (T + 0.5 * dt * K2)
        Xc = X + dt * k3
        k4 = _rhs(H, F, Xc, s + dt)
        K4 = _jac(H, F, Xc, s + dt) @ (T + dt * K3)
        X = X + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        T = T + dt / 6 * (K1 + 2 * K2 + 2 * K3 + K4)
        s = t0 + (k + 1) * dt
        xs[k + 1], Ts[k + 1] = X, T
    return np.linspace(t0, t, steps + 1), xs, Ts


def magnetic_flow(H, F, x0, t, steps=16, tol=1e-11, max_steps=2 ** 15, t0=0.0, fixed=False):
    """Integrate the charged-particle system with its tangent map.

    Fixed-step RK4.  Unless ``fixed``, the step count doubles until two
    successive resolutions of the end point agree to ``tol`` (relative to
    the state scale); :class:`DynamicsError` is raised past ``max_steps``.
    ``x0`` may carry a leading batch axis.
    """
    n = F.n
    H = _hamiltonian(H, n)
    x0 = np.asarray(x0, float)
    if x0.shape[-1] != 2 * n:
        raise ValueError("initial point needs 2n components")
    if t == t0:
        return FlowResult(np.array([t0]), x0[None], np.broadcast_to(np.eye(2 * n), x0.shape + (2 * n,))[None], 0, 0.0)
    steps = max(2, int(steps) + int(steps) % 2)
    if fixed:
        return FlowResult(*_rk4(H, F, x0, t, steps, t0), steps, float("nan"))
    prev = _rk4(H, F, x0, t, steps, t0)
    while True:
        steps *= 2
        if steps > max_steps:
            raise DynamicsError(f"step underflow: tolerance {tol} not reached with {max_steps} steps")
        cur = _rk4(H, F, x0, t, steps, t0)
        if not np.all(np.isfinite(cur[1][-1])):
            raise DynamicsError("flow left the domain (non-finite state)")
        scale = max(1.0, float(np.abs(cur[1]).max()))
        err = float(np.abs(cur[1][-1] - prev[1][-1]).max()) / 15.0
        if err <= tol * scale:
            return FlowResult(cur[0], cur[1], cur[2], steps, err)
        prev = cur


def _electric_time_integral(F):
    """``int_0^t E(s, q) ds`` and its ``q``-gradient, compiled in ``(q, t)``."""
    def build():
        n = F.n
        R = F.ring
        out, grads = [], []
        for j in range(n):
            e = F.E[j] if F.E is not None else R.zero
            data = {}
            for m, c in e.items():
                k = m[n]
                data[m[:n] + (k + 1,)] = c * gauss(Fraction(1, k + 1))
            P = R(data)
            out.append(P)
            grads.append([P.diff(R.gens[l]) for l in range(n)])
        compiled = ([compile_poly(P, n + 1, real=True) for P in out],
                    [[compile_poly(g, n + 1, real=True) for g in row] for row in grads])
        return out, compiled
    return F.cached("E_time_integral", build)


def virtual_flow(F, x0, t):
    """Flow of the infinitely heavy companion: ``(q0, p0 + int_0^t E(s, q0) ds)``.

    Exact (``Fraction``) for rational inputs.  Float inputs may carry a batch
    axis on ``x0`` and/or be an array of times; the result broadcasts as
    ``t.shape + x0.shape``.
    """
    n = F.n
    polys, (fns, _) = _electric_time_integral(F)
    if is_exact(list(x0), t):
        x0 = list(x0)
        q0 = x0[:n]
        shift = [PolyFunction(P, n + 1)(*q0, t) for P in polys]
        return q0 + [x0[n + j] + shift[j] for j in range(n)]
    X0 = np.asarray(x0, float)
    tt = np.asarray(t, float)
    tb = tt.reshape(tt.shape + (1,) * (X0.ndim - 1))
    sh = tt.shape + X0.shape[:-1]
    args = [X0[..., j] for j in range(n)] + [tb]
    out = np.broadcast_to(X0, sh + (2 * n,)).copy()
    for j in range(n):
        out[..., n + j] += _call(fns[j], args, sh)
    return out


def _virtual_tangent(F, X0, t):
    _, (_, gfns) = _electric_time_integral(F)
    n = F.n
    X0 = np.asarray(X0, float)
    sh = X0.shape[:-1]
    T = np.broadcast_to(np.eye(2 * n), sh + (2 * n, 2 * n)).copy()
    args = [X0[..., j] for j in range(n)] + [np.asarray(t, float)]
    for j in range(n):
        for l in range(n):
            T[..., n + j, l] = _call(gfns[j][l], args, sh)
    return T


def _lifted_rhs(H, F, Z, t):
    n = F.n
    X, Y = Z[:2 * n], Z[2 * n:]
    Xq, Xp, Yq, Yp = X[:n], X[n:], Y[:n], Y[n:]
    lq, rq = Xq - 0.5 * Yp, Xq + 0.5 * Yp
    al, da, db, _ = _alpha(F, lq, rq, t)
    lp = Xp + 0.5 * Yq - al
    g = H.grad(np.concatenate([lq, lp]))
    Hq, Hp = g[:n], g[n:]
    _, ba, bb = _beta(F, lq, rq, t)
    dlp_dXq = -(da + db)
    dlp_dYp = -(-0.5 * da + 0.5 * db)
    dXq = Hq + dlp_dXq.T @ Hp + ba + bb
    dXp = Hp
    dYq = 0.5 * Hp
    dYp = -0.5 * Hq + dlp_dYp.T @ Hp - 0.5 * ba + 0.5 * bb
    return np.concatenate([dYq, dYp, -dXq, -dXp])


def lifted_flow_check(H, F, x0, t, steps=None):
    """Integrate the Hamiltonian system on the doubled space with
    ``H(l) + beta(l_q, r_q)`` directly and compare with the closed form built
    from the particle and the companion.

    Returns max deviations ``{"X", "Y", "left", "right"}`` of ``(X, Y)`` from
    ``reconstruct(gamma, lambda)`` and of ``l(X, Y)``, ``r(X, Y)`` from
    ``gamma`` and ``lambda`` along the trajectory.
    """
    n = F.n
    H = _hamiltonian(H, n)
    x0 = np.asarray(x0, float)
    if steps is None:
        steps = magnetic_flow(H, F, x0, t).steps
    flow = magnetic_flow(H, F, x0, t, steps=steps, fixed=True)
    lam_all = virtual_flow(F, x0, flow.times)
    Z = np.concatenate([x0, np.zeros(2 * n)])
    dt = t / steps
    dev = {"X": 0.0, "Y": 0.0, "left": 0.0, "right": 0.0}
    for k in range(steps + 1):
        s = flow.times[k]
        if k:
            s0 = flow.times[k - 1]
            k1 = _lifted_rhs(H, F, Z, s0)
            k2 = _lifted_rhs(H, F, Z + 0.5 * dt * k1, s0 + 0.5 * dt)
            k3 = _lifted_rhs(H, F, Z + 0.5 * dt * k2, s0 + 0.5 * dt)
            k4 = _lifted_rhs(H, F, Z + dt * k3, s0 + dt)
            Z = Z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        gam, lam = flow.states[k], lam_all[k]
        Xc, Yc = reconstruct(list(gam), list(lam), F, None, s)
        l, r = left_right_maps(list(Z[:2 * n]), list(Z[2 * n:]), F, None, s)
        dev["X"] = max(dev["X"], float(np.abs(Z[:2 * n] - np.asarray(Xc, float)).max()))
        dev["Y"] = max(dev["Y"], float(np.abs(Z[2 * n:] - np.asarray(Yc, float)).max()))
        dev["left"] = max(dev["left"], float(np.abs(np.asarray(l, float) - gam).max()))
        dev["right"] = max(dev["right"], float(np.abs(np.asarray(r, float) - lam).max()))
    return dev


# ---------------------------------------------------------------------------
# membranes as loop integrals

_GL = np.polynomial.legendre.leggauss(12)


def _segment_integral(G, a, b, center, pa, pb):
    """``int p.dq + A_G(z, c).dz`` along the straight segment ``a -> b`` in
    ``(q, t)`` with ``p`` varying linearly from ``pa`` to ``pb``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    nodes, weights = _GL
    s = 0.5 * (nodes + 1)
    w = 0.5 * weights
    Z = a[None, :] + s[:, None] * (b - a)[None, :]
    A = np.asarray(valatin_potential(G, Z, np.broadcast_to(center, Z.shape)), float)
    dz = b - a
    n = len(pa)
    flat = 0.5 * float(np.dot(np.asarray(pa) + np.asarray(pb), dz[:n]))
    return flat + float(w @ (A @ dz))


def _curve_integral(G, times, Z, Zdot, P, center):
    """``int (p.q' + A_G(z, c).z') dt`` along a sampled curve (Simpson)."""
    n = P.shape[1]
    A = np.asarray(valatin_potential(G, Z, np.broadcast_to(center, Z.shape)), float)
    integrand = np.einsum("kj,kj->k", P, Zdot[:, :n]) + np.einsum("kj,kj->k", A, Zdot)
    return float(simpson(integrand, x=times))


def _with_time(q, t):
    q = np.atleast_2d(np.asarray(q, float))
    tt = np.broadcast_to(np.asarray(t, float).reshape(-1, 1), (q.shape[0], 1))
    return np.concatenate([q, tt], axis=1)


@dataclass
class WkbData:
    """WKB record at ``(t, x)``: base point, phase, Jacobian and amplitude.

    ``pieces`` holds the action and membrane decompositions of the phase.
    """

    t: float
    x: np.ndarray
    x0: np.ndarray
    S: float
    J: float
    amplitude: float
    valid: bool
    pieces: dict = dfield(default_factory=dict)
    gamma: np.ndarray | None = None
    lam: np.ndarray | None = None
    newton_iterations: int = 0

    def value(self, hbar):
        """``J^{-1/2} exp{(i/hbar) S}``."""
        return self.amplitude * np.exp(1j * self.S / hbar)


def _base_point_map(H, F, X0, t, steps):
    """``G(x0) = (gamma + lambda)/2 + (0; A^s(gamma_q, q0))`` and ``dG`` (batched)."""
    n = F.n
    flow = magnetic_flow(H, F, X0, t, steps=steps, fixed=True)
    gam, dgam = flow.final, flow.monodromy
    lam = virtual_flow(F, X0, float(t))
    dlam = _virtual_tangent(F, X0, t)
    Q0 = X0[..., :n]
    a1, da1, db1, _ = _alpha(F, gam[..., :n], Q0, t)
    a2, da2, db2, _ = _alpha(F, Q0, gam[..., :n], t)
    G = 0.5 * (gam + lam)
    G[..., n:] += 0.5 * (a1 + a2)
    dG = 0.5 * (dgam + dlam)
    dv = 0.5 * (da1 + db2) @ dgam[..., :n, :]  # through the gamma_q slot
    dv[..., :, :n] += 0.5 * (db1 + da2)       # through the q0 slot
    dG[..., n:, :] += dv
    return G, dG


def _newton(H, F, t, X, X0, steps, iters=50, tol=1e-12):
    """Damped Newton for ``G(x0) = x`` over a batch; step halving per point."""
    with np.errstate(over="ignore", invalid="ignore"):
        return _newton_loop(H, F, t, X, X0, steps, iters, tol)


def _newton_loop(H, F, t, X, X0, steps, iters, tol):
    scale = np.maximum(1.0, np.abs(X).max(axis=-1))
    G, dG = _base_point_map(H, F, X0, t, steps)
    res = G - X
    used = 0
    for it in range(iters):
        err = np.abs(res).max(axis=-1)
        todo = err > tol * scale
        if not todo.any():
            return X0, dG, used
        used = it + 1
        idx = np.nonzero(todo)[0]
        step = np.linalg.solve(dG[idx], -res[idx][..., None])[..., 0]
        lam = np.ones(len(idx))
        pending = np.arange(len(idx))
        for _ in range(12):
            sub = idx[pending]
            cand = X0[sub] + lam[pending, None] * step[pending]
            Gc, dGc = _base_point_map(H, F, cand, t, steps)
            rc = Gc - X[sub]
            ok = np.abs(rc).max(axis=-1) < err[sub]
            good = sub[ok]
            X0[good], dG[good], res[good] = cand[ok], dGc[ok], rc[ok]
            pending = pending[~ok]
            if not len(pending):
                break
            lam[pending] *= 0.5
        if len(pending):
            break
    err = np.abs(res).max(axis=-1)
    if np.any(err > 1e-9 * scale):
        raise DynamicsError(f"Newton did not converge in {iters} iterations (residual {err.max():.2e})")
    return X0, dG, used


def _action_batch(H, F, times, gam, X0):
    """Action-route pieces along a batch of trajectories.

    ``gam`` has shape ``(K, M, 2n)``; returns ``(int Y.dX, int beta, int H)``
    each of shape ``(M,)``.
    """
    n = F.n
    tK = times.reshape((-1,) + (1,) * (gam.ndim - 2))
    lam = virtual_flow(F, X0, times)
    Q0 = np.broadcast_to(X0[..., :n], gam[..., :n].shape)
    gdot = _rhs(H, F, gam, tK)
    gq = gam[..., :n]
    a1, da1, db1, dt1 = _alpha(F, gq, Q0, tK)
    a2, da2, db2, dt2 = _alpha(F, Q0, gq, tK)
    V = gam - lam
    Y = np.concatenate([V[..., n:] + (a1 - a2), -V[..., :n]], axis=-1)
    Xd = 0.5 * gdot
    Xd[..., n:] += 0.5 * _E(F, Q0, tK)
    Xd[..., n:] += 0.5 * np.einsum("...jk,...k->...j", da1 + db2, gdot[..., :n]) + 0.5 * (dt1 + dt2)
    YX = np.sum(Y * Xd, axis=-1)
    beta = _beta(F, gq, Q0, tK)[0]
    Hk = H.value(gam)
    return (simpson(YX, x=times, axis=0), simpson(beta, x=times, axis=0), simpson(Hk, x=times, axis=0))


def wkb_batch(H, F, t, X, delta=0.1, tol=1e-11, continuation=4, guess=None):
    """WKB phase and Jacobian at a batch of points ``X`` of shape ``(M, 2n)``.

    Returns a dict with ``S``, ``J``, ``x0``, ``valid`` (``J >= delta``),
    ``amplitude`` and ``steps``.
    """
    n = F.n
    H = _hamiltonian(H, n)
    X = np.atleast_2d(np.asarray(X, float))
    t = float(t)
    if t == 0:
        M = len(X)
        return {"S": np.zeros(M), "J": np.ones(M), "x0": X.copy(), "valid": np.ones(M, bool),
                "amplitude": np.ones(M), "steps": 0, "iterations": 0}
    steps = magnetic_flow(H, F, X, t, tol=tol).steps
    X0 = np.array(X if guess is None else guess, float)
    total = 0
    for k in range(1, continuation + 1):
        tk = t * k / continuation
        X0, dG, its = _newton(H, F, tk, X, X0, max(2, steps * k // continuation))
        total += its
    flow = magnetic_flow(H, F, X0, t, steps=steps, fixed=True)
    act, beta, Hint = _action_batch(H, F, flow.times, flow.states, X0)
    J = np.linalg.det(dG)
    with np.errstate(divide="ignore"):
        amp = np.abs(J) ** -0.5
    return {"S": act - beta - Hint, "J": J, "x0": X0, "valid": J >= delta, "amplitude": amp,
            "steps": steps, "iterations": total, "flow": flow,
            "pieces": {"action": act, "beta_integral": beta, "H_integral": Hint}}


def _membrane_pieces(H, F, flow, x, t):
    """Membrane routes to the phase for one solved configuration."""
    n = F.n
    times, gam = flow.times, flow.states
    x0 = gam[0]
    q0 = x0[:n]
    K = len(times)
    lam = virtual_flow(F, x0, times)
    gdot = _rhs(H, F, gam, times)
    H_int = float(simpson(H.value(gam), x=times))

    # space-time membrane: gamma world line, wing gamma -> x -> lambda at time t,
    # companion world line back to (q0, 0)
    G = spacetime_form(F)
    center = np.concatenate([q0, [0.0]])
    Zg = _with_time(gam[:, :n], times)
    Zgd = np.concatenate([gdot[:, :n], np.ones((K, 1))], axis=1)
    world = _curve_integral(G, times, Zg, Zgd, gam[:, n:], center)
    xt = np.concatenate([x[:n], [t]])
    wing = (_segment_integral(G, Zg[-1], xt, center, gam[-1, n:], x[n:])
            + _segment_integral(G, xt, _with_time(lam[-1, :n], t)[0], center, x[n:], lam[-1, n:]))
    Zl = _with_time(lam[:, :n], times)
    Zld = np.concatenate([np.zeros((K, n)), np.ones((K, 1))], axis=1)
    companion = -_curve_integral(G, times, Zl, Zld, lam[:, n:], center)
    dynamical = world + wing + companion

    # phase-space membrane with the field frozen at the final time, plus the
    # electric area swept by the chord [q0, gamma_q] in space-time
    Ft = _frozen(F, t)
    Pq = _curve_integral(Ft, times, gam[:, :n], gdot[:, :n], gam[:, n:], q0)
    wing6 = (_segment_integral(Ft, gam[-1, :n], x[:n], q0, gam[-1, n:], x[n:])
             + _segment_integral(Ft, x[:n], lam[-1, :n], q0, x[n:], lam[-1, n:]))
    phase_space = Pq + wing6
    e_area = _electric_area(F, times, gam[:, :n], q0)

    # blown-up membrane: gamma on the level p0 = -H, lambda on p0 = 0;
    # the extra primitive p0 dt only sees the gamma world line
    blown = dynamical + float(simpson(-H.value(gam), x=times))
    return {
        "H_integral": H_int,
        "dynamical_membrane": dynamical,
        "phase_space_membrane": phase_space,
        "electric_area": e_area,
        "S_membrane": dynamical - H_int,
        "S_phase_space": phase_space + e_area - H_int,
        "S_blown_up": blown,
    }


def _frozen(F, t):
    """Static field equal to ``F`` at time ``t``."""
    R = F.ring
    n = F.n
    tt = Fraction(t).limit_denominator(10 ** 12) if not isinstance(t, Fraction) else t
    images = list(R.gens[:n]) + [R.ground_new(gauss(tt))]
    return MagneticForm(n, [[substitute(F.F[j][k], R, images) for k in range(n)] for j in range(n)])


def _electric_area(F, times, gq, q0):
    """``int dt int_{q0}^{gamma_q(t)} E(t, q) dq`` over the ruled chord surface."""
    if F.E is None:
        return 0.0
    nodes, weights = _GL
    s = 0.5 * (nodes + 1)
    w = 0.5 * weights
    vals = np.zeros(len(times))
    for k, tk in enumerate(times):
        d = gq[k] - q0
        pts = q0[None, :] + s[:, None] * d[None, :]
        E = np.asarray(F.electric(pts, tk), float)
        vals[k] = float(w @ (E @ d))
    return float(simpson(vals, x=times))


def wkb_symbol(H, F, t, x, delta=0.1, tol=1e-11, continuation=4, guess=None):
    """WKB data of the evolution symbol at time ``t`` and point ``x``.

    Damped Newton solves the base-point equation, continued in time from
    ``x0 = x``.  ``S`` is the action route; ``pieces`` also carries the
    membrane routes.  ``valid`` is ``J >= delta``.
    """
    n = F.n
    H = _hamiltonian(H, n)
    x = np.asarray([float(v) for v in x])
    if len(x) != 2 * n:
        raise ValueError("x needs 2n components")
    t = float(t)
    if t == 0:
        return WkbData(0.0, x, x.copy(), 0.0, 1.0, 1.0, True, {}, x[None], x[None])
    res = wkb_batch(H, F, t, x[None], delta, tol, continuation, None if guess is None else np.asarray(guess)[None])
    flow = res["flow"]
    single = FlowResult(flow.times, flow.states[:, 0], flow.tangents[:, 0], flow.steps, flow.error)
    pieces = {k: float(v[0]) for k, v in res["pieces"].items()}
    pieces["S_action"] = float(res["S"][0])
    pieces.update(_membrane_pieces(H, F, single, x, t))
    x0 = res["x0"][0]
    return WkbData(t, x, x0, float(res["S"][0]), float(res["J"][0]), float(res["amplitude"][0]),
                   bool(res["valid"][0]), pieces, single.states,
                   virtual_flow(F, x0, single.times), res["iterations"])


def klein_gordon_symbol(F, t, x, m=1.0, c=1.0, delta=0.1):
    """Both relativistic branches and their combination ``(1/2) sum exp{iS/hbar} u``.

    Returns ``(plus, minus, combine)`` where ``combine(hbar)`` evaluates the sum.
    """
    n = F.n
    plus = wkb_symbol(Hamiltonian.relativistic(n, m, c, +1), F, t, x, delta)
    minus = wkb_symbol(Hamiltonian.relativistic(n, m, c, -1), F, t, x, delta)

    def combine(hbar):
        return 0.5 * (plus.value(hbar) + minus.value(hbar))

    return plus, minus, combine


# ---------------------------------------------------------------------------
# phase addition

def _membrane(F, gam_states, times, gdot, x, center):
    """``omega_F`` area of trajectory ``r -> l`` closed by the wing ``l -> x -> r``."""
    n = F.n
    traj = _curve_integral(F, times, gam_states[:, :n], gdot[:, :n], gam_states[:, n:], center) \
        if not F.is_zero() else float(simpson(np.einsum("kj,kj->k", gam_states[:, n:], gdot[:, :n]), x=times))
    l, r = gam_states[-1], gam_states[0]
    wing = (_segment_integral(F, l[:n], x[:n], center, l[n:], x[n:])
            + _segment_integral(F, x[:n], r[:n], center, x[n:], r[n:]))
    return traj + wing


def marinov_check(H, F, t1, t2, x, delta=0.1):
    """Defect of the phase addition rule at the classical composition point.

    With ``x0`` the base point of ``x`` at ``t = t1 + t2``, the three
    configurations are ``(gamma^t, x0)``, ``(gamma^t, gamma^t1)`` and
    ``(gamma^t1, x0)``; the hexagon is ``L -> x -> R -> x1 -> M -> x2 -> L``.
    Returns ``(defect, parts)``.
    """
    if F.time_dependent:
        raise ValueError("phase addition is checked for static fields")
    n = F.n
    H = _hamiltonian(H, n)
    t = float(t1) + float(t2)
    w = wkb_symbol(H, F, t, x, delta)
    if not w.valid:
        raise CausticError(w.J, delta)
    x0 = w.x0
    flow = magnetic_flow(H, F, x0, t)
    k1 = int(round(float(t1) / t * flow.steps))
    if abs(flow.times[k1] - float(t1)) > 1e-12 * max(1.0, t):
        flow = FlowResult(*_rk4(H, F, x0, t, flow.steps * 2), flow.steps * 2, flow.error)
        k1 = int(round(float(t1) / t * flow.steps))
    if k1 % 2:
        flow = FlowResult(*_rk4(H, F, x0, t, flow.steps * 2), flow.steps * 2, flow.error)
        k1 *= 2
    gd = np.array([_rhs(H, F, s, tt) for s, tt in zip(flow.states, flow.times)])
    L, M, R = flow.states[-1], flow.states[k1], flow.states[0]
    x1 = np.asarray(reconstruct(list(M), list(R), F)[0], float)
    x2 = np.asarray(reconstruct(list(L), list(M), F)[0], float)
    xs = np.asarray(reconstruct(list(L), list(R), F)[0], float)
    c = R[:n]
    big = _membrane(F, flow.states, flow.times, gd, xs, c)
    s1 = _membrane(F, flow.states[:k1 + 1], flow.times[:k1 + 1], gd[:k1 + 1], x1, c)
    s2 = _membrane(F, flow.states[k1:], flow.times[k1:], gd[k1:], x2, c)
    hexagon = 0.0
    loop = [L, xs, R, x1, M, x2, L]
    for a, b in zip(loop[:-1], loop[1:]):
        hexagon += _segment_integral(F, a[:n], b[:n], c, a[n:], b[n:])
    defect = s2 + s1 + hexagon - big
    return abs(defect), {"sigma": big, "sigma1": s1, "sigma2": s2, "hexagon": hexagon,
                         "x": xs, "x1": x1, "x2": x2, "x_target": np.asarray(x, float)}


# ---------------------------------------------------------------------------
# Trotter product

def trotter_symbol(H, F, t, N, grid_N, dq, hbar, q_center=0.0, warn_tol=1e-8):
    """``N``-fold grid product of ``exp(-i t H / (hbar N))``.

    ``H`` is a numeric symbol ``H(q_list, p_list)`` that decays at the grid
    edges; the factors are handled as ``1 + D`` with ``D`` localized.
    Returns ``(symbol, report)``; ``report["edge"]`` is the largest ``|D|``
    on the boundary (an aliasing indicator).
    """
    from .starprod import grid_magnetic_product
    import warnings
    n = F.n if F is not None else 1
    D1 = GridSymbol.sample(lambda q, p: np.exp(-1j * t * H(q, p) / (hbar * N)) - 1.0,
                           n, grid_N, dq, hbar, q_center)
    edge = _edge(D1.data)
    if edge > warn_tol:
        warnings.warn(f"Trotter factor not localized on the grid (edge value {edge:.2e})", RuntimeWarning)
    D = D1
    for _ in range(N - 1):
        DD = grid_magnetic_product(D, D1, F)
        D = D.like(D.data + D1.data + DD.data)
    return D.like(D.data + 1.0), {"edge": edge, "N": N}


def _edge(a):
    m = 0.0
    for ax in range(a.ndim):
        m = max(m, float(np.abs(np.take(a, [0, -1], axis=ax)).max()))
    return m


# ---------------------------------------------------------------------------
# contact structure

def _contact_ring(n):
    names = ("t",) + tuple(f"q{j + 1}" for j in range(n)) + tuple(f"p{j + 1}" for j in range(n))
    return poly_ring(names)


def _lie(W, v, g):
    """Components of ``L_v omega`` for ``omega(u, w) = u^a W_ab w^b``."""
    m = len(g)
    out = [[None] * m for _ in range(m)]
    for a in range(m):
        for b in range(m):
            acc = sum((v[c] * W[a][b].diff(g[c]) for c in range(m)), W[a][b] * 0)
            for c in range(m):
                acc += W[c][b] * v[c].diff(g[a]) + W[a][c] * v[c].diff(g[b])
            out[a][b] = acc
    return out


def contact_checks(F, H):
    """Symbolic residuals of the contact-structure identities on ``(t, q, p)``.

    ``F`` is a :class:`MagneticForm` (``E`` optional) or a pair
    ``(Fjk, E)`` of raw component lists (no closedness check; used for
    negative controls).  ``H`` is a ``hbar``-free polynomial symbol.
    Returns a dict of residual components (all zero when the identities hold).
    """
    if isinstance(F, MagneticForm):
        n, Fc, Ec = F.n, F.F, F.E
        src = F.ring
    else:
        Fc, Ec = F
        n = len(Fc)
        src = poly_ring(field_names(n))
        Fc = [[c if hasattr(c, "ring") else _coerce_poly(c, src, n) for c in row] for row in Fc]
        Ec = None if Ec is None else [e if hasattr(e, "ring") else _coerce_poly(e, src, n) for e in Ec]
    R = _contact_ring(n)
    g = R.gens
    tt, q, p = g[0], g[1:n + 1], g[n + 1:]
    images = list(q) + [tt]
    Fm = [[substitute(Fc[j][k], R, images) for k in range(n)] for j in range(n)]
    E = [substitute(e, R, images) for e in Ec] if Ec is not None else [R.zero] * n
    Hp = substitute(H.poly, R, list(q) + list(p) + [R.zero])
    m = 2 * n + 1
    iq = lambda j: 1 + j
    ip = lambda j: 1 + n + j
    W = [[R.zero] * m for _ in range(m)]
    for j in range(n):
        W[ip(j)][iq(j)] = R.one
        W[iq(j)][ip(j)] = -R.one
        W[iq(j)][0] = E[j]
        W[0][iq(j)] = -E[j]
        for k in range(n):
            W[iq(j)][iq(k)] = -Fm[j][k]
    v0 = [R.one] + [R.zero] * n + list(E)
    dHq = [Hp.diff(g[iq(j)]) for j in range(n)]
    dHp = [Hp.diff(g[ip(j)]) for j in range(n)]
    force = [E[j] - sum((Fm[j][k] * dHp[k] for k in range(n)), R.zero) - dHq[j] for j in range(n)]
    vH = [R.one] + dHp + force

    def contract(v):
        return [sum((W[a][b] * v[b] for b in range(m)), R.zero) for a in range(m)]

    v0H = sum((E[j] * dHp[j] for j in range(n)), R.zero)
    dH = [Hp.diff(g[a]) for a in range(m)]
    res = {}
    res["v0_null"] = contract(v0)
    res["v0_lie"] = _lie(W, v0, g)
    c = contract(vH)
    target = [dH[a] - (v0H if a == 0 else R.zero) for a in range(m)]
    res["vH_contraction"] = [c[a] - target[a] for a in range(m)]
    L = _lie(W, vH, g)
    dv = [v0H.diff(g[a]) for a in range(m)]
    # d(v0(H)) ^ dt
    wedge = [[dv[a] * (R.one if b == 0 else R.zero) - dv[b] * (R.one if a == 0 else R.zero)
              for b in range(m)] for a in range(m)]
    res["vH_lie"] = [[L[a][b] - wedge[a][b] for b in range(m)] for a in range(m)]
    return res


def _coerce_poly(c, R, n):
    from .symbols import parse_poly, gauss
    if isinstance(c, str):
        return parse_poly(c, field_names(n))
    return R.ground_new(gauss(c))


def residuals_vanish(res):
    """True when every component of a :func:`contact_checks` result is zero."""
    def flat(x):
        if isinstance(x, list):
            for y in x:
                yield from flat(y)
        else:
            yield x
    return all(not c for v in res.values() for c in flat(v))
