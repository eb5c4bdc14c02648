"""Compiled closed-loop kernels used by the integrator.

State vectors use one flat layout throughout::

    x = (x_c, phi, p_g, E_g, E_l),  x_c = tau_c * (P_g, P_l, v, lambda_g, lambda_l)

Errors are returned as integer status codes and mapped to exceptions by
the Python callers.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numba import njit

OK = 0
NONCONVERGENCE = 1
REGULARITY = 2
COLLAPSE = 3
NONFINITE = 4

# magnitude beyond which a state component counts as diverged
DIVERGENCE_LIMIT = 1e6


class Model(NamedTuple):
    n: int
    ng: int
    nl: int
    mc: int
    ref: int
    gen: np.ndarray
    load: np.ndarray
    lpos: np.ndarray  # bus index -> load position, -1 for generators
    nonref: np.ndarray
    li: np.ndarray
    lj: np.ndarray
    lB: np.ndarray
    Bself: np.ndarray
    M: np.ndarray
    Ag: np.ndarray
    Al: np.ndarray
    kx: np.ndarray  # Xd - Xd'
    T: np.ndarray
    Ef: np.ndarray
    Qbar: np.ndarray
    q: np.ndarray
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray
    Dc: np.ndarray
    tau: np.ndarray
    newton_tol: float
    newton_max_iter: int
    cond_limit: float
    e_floor: float
    o_phi: int
    o_p: int
    o_Eg: int
    o_El: int
    size: int


def build_model(net, e_floor: float) -> Model:
    n, ng, nl, mc = net.n, net.n_g, net.n_l, net.m_c
    lpos = -np.ones(n, dtype=np.int64)
    lpos[net.load_idx] = np.arange(nl)
    o_phi = 2 * n + mc
    o_p = o_phi + n - 1
    o_Eg = o_p + ng
    o_El = o_Eg + ng
    w, s = net.welfare, net.solver
    f = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
    i = lambda a: np.ascontiguousarray(a, dtype=np.int64)  # noqa: E731
    return Model(
        n, ng, nl, mc, int(net.ref),
        i(net.gen_idx), i(net.load_idx), lpos, i(net.nonref_idx),
        i(net.line_i), i(net.line_j), f(net.line_B), f(net.B_self),
        f(net.M), f(net.A_g), f(net.A_l), f(net.xd_diff), f(net.T), f(net.Ef), f(net.Qbar),
        f(w.q), f(w.c), f(w.a), f(w.b), f(net.D_c), f(net.tau_vector),
        float(s.newton_tol), int(s.newton_max_iter), float(s.cond_limit), float(e_floor),
        o_phi, o_p, o_Eg, o_El, o_El + nl,
    )


@njit(cache=True)
def bus_angles(m, x):
    delta = np.zeros(m.n)
    for k in range(m.n - 1):
        delta[m.nonref[k]] = x[m.o_phi + k]
    return delta


@njit(cache=True)
def bus_voltages(m, x, El):
    E = np.empty(m.n)
    for k in range(m.ng):
        E[m.gen[k]] = x[m.o_Eg + k]
    for k in range(m.nl):
        E[m.load[k]] = El[k]
    return E


@njit(cache=True)
def injections(m, delta, E):
    P = np.zeros(m.n)
    Q = m.Bself * E * E
    for e in range(m.li.shape[0]):
        i, j = m.li[e], m.lj[e]
        d = delta[i] - delta[j]
        f = m.lB[e] * E[i] * E[j]
        s = f * np.sin(d)
        c = f * np.cos(d)
        P[i] += s
        P[j] -= s
        Q[i] -= c
        Q[j] -= c
    return P, Q


@njit(cache=True)
def load_residual(m, Q):
    g = np.empty(m.nl)
    for k in range(m.nl):
        g[k] = m.Qbar[k] - Q[m.load[k]]
    return g


@njit(cache=True)
def load_jacobian(m, delta, E):
    """Jacobian of g = Qbar - Q_l with respect to E_l."""
    J = np.zeros((m.nl, m.nl))
    for k in range(m.nl):
        i = m.load[k]
        J[k, k] = -2.0 * m.Bself[i] * E[i]
    for e in range(m.li.shape[0]):
        i, j = m.li[e], m.lj[e]
        bc = m.lB[e] * np.cos(delta[i] - delta[j])
        pi, pj = m.lpos[i], m.lpos[j]
        if pi >= 0:
            J[pi, pi] += bc * E[j]
            if pj >= 0:
                J[pi, pj] += bc * E[i]
        if pj >= 0:
            J[pj, pj] += bc * E[i]
            if pi >= 0:
                J[pj, pi] += bc * E[j]
    return J


@njit(cache=True)
def lu_solve(A, r):
    """Solve A x = r by LU with partial pivoting.

    Returns (x, cond) with cond = max|U_ii| / min|U_ii|, inf when singular.
    """
    n = A.shape[0]
    U = A.copy()
    y = r.copy()
    for k in range(n):
        p = k
        big = abs(U[k, k])
        for i in range(k + 1, n):
            if abs(U[i, k]) > big:
                big = abs(U[i, k])
                p = i
        if p != k:
            for j in range(n):
                tmp = U[k, j]
                U[k, j] = U[p, j]
                U[p, j] = tmp
            tmp = y[k]
            y[k] = y[p]
            y[p] = tmp
        if U[k, k] == 0.0:
            continue
        for i in range(k + 1, n):
            f = U[i, k] / U[k, k]
            if f != 0.0:
                for j in range(k, n):
                    U[i, j] -= f * U[k, j]
                y[i] -= f * y[k]
    dmax = 0.0
    dmin = np.inf
    for k in range(n):
        d = abs(U[k, k])
        dmax = max(dmax, d)
        dmin = min(dmin, d)
    x = np.full(n, np.nan)
    if dmin == 0.0 or not np.isfinite(dmax):
        return x, np.inf
    for k in range(n - 1, -1, -1):
        s = y[k]
        for j in range(k + 1, n):
            s -= U[k, j] * x[j]
        x[k] = s / U[k, k]
    return x, dmax / dmin


@njit(cache=True)
def solve_loads(m, delta, x, El0):
    """Newton on the reactive-power constraint for the load voltages.

    At least one correction is always taken, so a converged answer is
    polished to roundoff. Returns (E_l, status, iterations, residual, cond).
    """
    El = El0.copy()
    cond = 1.0
    it = 0
    while True:
        E = bus_voltages(m, x, El)
        _, Q = injections(m, delta, E)
        g = load_residual(m, Q)
        res = 0.0
        for k in range(m.nl):
            res = max(res, abs(g[k]))
        if not np.isfinite(res):
            return El, NONFINITE, it, res, cond
        if it >= 1 and res < m.newton_tol:
            return El, OK, it, res, cond
        if it >= m.newton_max_iter:
            return El, NONCONVERGENCE, it, res, cond
        J = load_jacobian(m, delta, E)
        dx, cond = lu_solve(J, -g)
        if cond > m.cond_limit:
            return El, REGULARITY, it, res, cond
        El = El + dx
        it += 1
        for k in range(m.nl):
            if not El[k] > m.e_floor:
                return El, COLLAPSE, it, res, cond


@njit(cache=True)
def vector_field(m, x, El):
    """Closed-loop derivative of the differential states; also returns omega_l."""
    n, ng, nl, mc = m.n, m.ng, m.nl, m.mc
    delta = bus_angles(m, x)
    E = bus_voltages(m, x, El)
    P, Q = injections(m, delta, E)
    z = x[: 2 * n + mc] / m.tau
    Pg = z[:ng]
    Pl = z[ng:n]
    v = z[n:n + mc]
    lg = z[n + mc:n + mc + ng]
    ll = z[n + mc + ng:]

    omega = np.empty(n)
    for k in range(ng):
        omega[m.gen[k]] = x[m.o_p + k] / m.M[k]
    omega_l = np.empty(nl)
    for k in range(nl):
        i = m.load[k]
        omega_l[k] = -(P[i] + Pl[k]) / m.Al[k]
        omega[i] = omega_l[k]

    lam = np.empty(n)
    for k in range(ng):
        lam[m.gen[k]] = lg[k]
    for k in range(nl):
        lam[m.load[k]] = ll[k]
    Dv = m.Dc @ v
    DTlam = m.Dc.T @ lam

    dx = np.empty(m.o_El)
    # x_c dot = tau * z dot, i.e. the right-hand sides of the pricing law
    for k in range(ng):
        dx[k] = -(m.q[k] * Pg[k] + m.c[k]) + lg[k] - omega[m.gen[k]]
        dx[n + mc + k] = Dv[m.gen[k]] - Pg[k]
    for k in range(nl):
        dx[ng + k] = (m.a[k] - m.b[k] * Pl[k]) - ll[k] + omega_l[k]
        dx[n + mc + ng + k] = Dv[m.load[k]] + Pl[k]
    for e in range(mc):
        dx[n + e] = -DTlam[e]
    for k in range(n - 1):
        dx[m.o_phi + k] = omega[m.nonref[k]] - omega[m.ref]
    for k in range(ng):
        i = m.gen[k]
        dx[m.o_p + k] = -P[i] - m.Ag[k] * omega[i] + Pg[k]
        Ei = E[i]
        dx[m.o_Eg + k] = -(Ei - m.Ef[k] + m.kx[k] * Q[i] / Ei) / m.T[k]
    return dx, omega_l


@njit(cache=True)
def _state_ok(m, x):
    for k in range(x.shape[0]):
        if not np.isfinite(x[k]) or abs(x[k]) > DIVERGENCE_LIMIT:
            return NONFINITE
    for k in range(m.ng):
        if not x[m.o_Eg + k] > m.e_floor:
            return COLLAPSE
    return OK


@njit(cache=True)
def rk4_step(m, x, dt):
    """One half-explicit RK4 step; x holds a consistent E_l on entry.

    Returns (x_new, status, newton_iterations, residual).
    """
    nd = m.o_El
    y = x[:nd]
    El = x[nd:].copy()
    acc = np.zeros(nd)
    k_prev = np.zeros(nd)
    iters = 0
    weights = (1.0, 2.0, 2.0, 1.0)
    offsets = (0.0, 0.5, 0.5, 1.0)
    for s in range(4):
        ys = y + offsets[s] * dt * k_prev
        status = _state_ok(m, ys)
        if status != OK:
            return x, status, iters, np.nan
        delta = bus_angles(m, ys)
        El, status, it, res, _ = solve_loads(m, delta, ys, El)
        iters += it
        if status != OK:
            return x, status, iters, res
        k_prev, _ = vector_field(m, ys, El)
        acc += weights[s] * k_prev
    y_new = y + (dt / 6.0) * acc
    status = _state_ok(m, y_new)
    if status != OK:
        return x, status, iters, np.nan
    El, status, it, res, _ = solve_loads(m, bus_angles(m, y_new), y_new, El)
    iters += it
    out = np.empty(m.size)
    out[:nd] = y_new
    out[nd:] = El
    return out, status, iters, res


# ---------------------------------------------------------------------------
# shifted energy, evaluated without catastrophic cancellation near x_bar

@njit(cache=True)
def _sin_minus_id(d):
    """sin(d) - d."""
    if abs(d) < 0.1:
        d2 = d * d
        return -d * d2 / 6.0 * (1.0 - d2 / 20.0 * (1.0 - d2 / 42.0 * (1.0 - d2 / 72.0 * (1.0 - d2 / 110.0))))
    return np.sin(d) - d


@njit(cache=True)
def _u_minus_log1p(u):
    """u - log(1 + u)."""
    if abs(u) < 0.1:
        s = 0.0
        p = u * u
        for k in range(2, 20):
            s += p / k if k % 2 == 0 else -p / k
            p *= u
        return s
    return u - np.log1p(u)


@njit(cache=True)
def shifted_hamiltonian(m, x, xb):
    n, mc = m.n, m.mc
    H = 0.0
    for k in range(2 * n + mc):
        d = x[k] - xb[k]
        H += 0.5 * d * d / m.tau[k]
    for k in range(m.ng):
        d = x[m.o_p + k] - xb[m.o_p + k]
        H += 0.5 * d * d / m.M[k]
        d = x[m.o_Eg + k] - xb[m.o_Eg + k]
        H += 0.5 * d * d / m.kx[k]
    delta = bus_angles(m, x)
    deltab = bus_angles(m, xb)
    E = bus_voltages(m, x, x[m.o_El:])
    Eb = bus_voltages(m, xb, xb[m.o_El:])
    for i in range(n):
        d = E[i] - Eb[i]
        H += 0.5 * m.Bself[i] * d * d
    for e in range(m.li.shape[0]):
        i, j = m.li[e], m.lj[e]
        db = deltab[i] - deltab[j]
        dd = (delta[i] - delta[j]) - db
        ai = E[i] - Eb[i]
        aj = E[j] - Eb[j]
        cb, sb = np.cos(db), np.sin(db)
        sh = np.sin(0.5 * dd)
        EbEb = Eb[i] * Eb[j]
        term = (-ai * aj * cb + E[i] * E[j] * cb * 2.0 * sh * sh
                + sb * (EbEb * _sin_minus_id(dd) + (Eb[j] * ai + Eb[i] * aj + ai * aj) * np.sin(dd)))
        H += m.lB[e] * term
    for k in range(m.nl):
        if m.Qbar[k] != 0.0:
            i = m.load[k]
            H += m.Qbar[k] * _u_minus_log1p((E[i] - Eb[i]) / Eb[i])
    return H


@njit(cache=True)
def _grad_Eg(m, x, El):
    delta = bus_angles(m, x)
    E = bus_voltages(m, x, El)
    _, Q = injections(m, delta, E)
    out = np.empty(m.ng)
    for k in range(m.ng):
        i = m.gen[k]
        out[k] = (E[i] - m.Ef[k]) / m.kx[k] + Q[i] / E[i]
    return out


@njit(cache=True)
def dissipation_rate(m, x, xb):
    """Closed-form time derivative of the shifted energy at a consistent state."""
    n, ng, nl, mc = m.n, m.ng, m.nl, m.mc
    _, omega_l = vector_field(m, x, x[m.o_El:])
    ge = _grad_Eg(m, x, x[m.o_El:])
    geb = _grad_Eg(m, xb, xb[m.o_El:])
    r = 0.0
    for k in range(ng):
        w = x[m.o_p + k] / m.M[k]
        r -= m.Ag[k] * w * w
        d = ge[k] - geb[k]
        r -= (m.kx[k] / m.T[k]) * d * d
        dP = (x[k] - xb[k]) / m.tau[k]
        r -= m.q[k] * dP * dP
    for k in range(nl):
        r -= m.Al[k] * omega_l[k] * omega_l[k]
        dP = (x[ng + k] - xb[ng + k]) / m.tau[ng + k]
        r -= m.b[k] * dP * dP
    return r


@njit(cache=True)
def integrate(m, x0, xb, dt, nsteps, stride):
    """Fixed-step integration with per-step energy diagnostics.

    Returns (samples, H, Hdot, residual, iterations, status, failed_step).
    Diagnostics have nsteps + 1 entries; samples every ``stride`` steps.
    """
    nsamp = nsteps // stride + 1
    samples = np.empty((nsamp, m.size))
    H = np.full(nsteps + 1, np.nan)
    Hd = np.full(nsteps + 1, np.nan)
    res = np.full(nsteps + 1, np.nan)
    its = np.zeros(nsteps + 1, dtype=np.int64)
    x = x0.copy()
    samples[0] = x
    H[0] = shifted_hamiltonian(m, x, xb)
    Hd[0] = dissipation_rate(m, x, xb)
    _, Q = injections(m, bus_angles(m, x), bus_voltages(m, x, x[m.o_El:]))
    g = load_residual(m, Q)
    res[0] = np.max(np.abs(g)) if m.nl > 0 else 0.0
    for k in range(1, nsteps + 1):
        x, status, it, r = rk4_step(m, x, dt)
        if status != OK:
            return samples[: (k - 1) // stride + 1], H, Hd, res, its, status, k
        H[k] = shifted_hamiltonian(m, x, xb)
        Hd[k] = dissipation_rate(m, x, xb)
        res[k] = r
        its[k] = it
        if k % stride == 0:
            samples[k // stride] = x
    return samples, H, Hd, res, its, OK, -1
