"""Equilibria, the shifted energy function and its positivity certificates."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import DomainViolation, InfeasibleAngles, NewtonNonConvergence, StateDomainError
from .market import KKTSolution, kkt_oracle, kkt_residual
from .network import NetworkConfig
from .power import (
    EPS_E,
    PhysicalState,
    active_injection,
    bus_angles,
    grad_hamiltonian_physical,
    injection_jacobians,
    reactive_injection,
)
from .state import ClosedLoopState, Layout, model_for

log = logging.getLogger(__name__)

MAX_HALVINGS = 20


@dataclass
class EquilibriumReport:
    status: str  # "converged", "infeasible_angles" or "newton_failed"
    state: np.ndarray  # flat closed-loop vector x_bar
    kkt: KKTSolution
    kkt_residuals: dict[str, float]
    power_flow_residual: float
    rhs_residual: float
    angle_differences: np.ndarray
    newton_iterations: int
    hessian_values: np.ndarray | None = None
    hessian_verdicts: np.ndarray | None = None
    min_eigenvalue: float | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def negative_generation(self) -> bool:
        return bool(np.any(self.kkt.state.P_g < 0) or np.any(self.kkt.state.P_l < 0))

    def closed_loop_state(self, net: NetworkConfig) -> ClosedLoopState:
        return ClosedLoopState.from_vector(net, self.state)

    def to_dict(self, net: NetworkConfig) -> dict:
        s = self.closed_loop_state(net)
        ids = [int(i) for i in net.bus_ids]
        E = s.physical.voltages(net)
        delta = bus_angles(net, s.physical.phi)
        out = {
            "status": self.status,
            "price": self.kkt.price,
            "P_g": {ids[k]: float(p) for k, p in zip(net.gen_idx, s.controller.P_g)},
            "P_l": {ids[k]: float(p) for k, p in zip(net.load_idx, s.controller.P_l)},
            "v": [float(x) for x in s.controller.v],
            "delta": {ids[k]: float(delta[k]) for k in range(net.n)},
            "E": {ids[k]: float(E[k]) for k in range(net.n)},
            "angle_differences": [
                {"from": ids[i], "to": ids[j], "delta": float(d)}
                for i, j, d in zip(net.line_i, net.line_j, self.angle_differences)
            ],
            "kkt_residuals": self.kkt_residuals,
            "power_flow_residual": self.power_flow_residual,
            "rhs_residual": self.rhs_residual,
            "newton_iterations": self.newton_iterations,
            "negative_generation": self.negative_generation,
            "min_eigenvalue": self.min_eigenvalue,
            "notes": list(self.notes),
        }
        if self.hessian_verdicts is not None:
            out["hessian_condition"] = {
                ids[k]: {"value": float(self.hessian_values[k]), "holds": bool(self.hessian_verdicts[k])}
                for k in range(net.n)
            }
        else:
            out["hessian_condition"] = None
        return out


# ---------------------------------------------------------------------------
# steady-state power flow

def _flow_residual(net, phi, E, P_set):
    P = active_injection(net, phi, E)
    Q = reactive_injection(net, phi, E)
    gi, li = net.gen_idx, net.load_idx
    return np.concatenate([
        P[net.nonref_idx] - P_set[net.nonref_idx],
        net.Ef - E[gi] - net.xd_diff * Q[gi] / E[gi],
        Q[li] - net.Qbar,
    ])


def _flow_jacobian(net, phi, E):
    dP_dd, dP_dE, dQ_dd, dQ_dE = injection_jacobians(net, phi, E)
    Q = reactive_injection(net, phi, E)
    nr, gi, li = net.nonref_idx, net.gen_idx, net.load_idx
    k = net.xd_diff[:, None]
    Eg = E[gi][:, None]
    rows_g_phi = -k * dQ_dd[gi][:, nr] / Eg
    rows_g_E = -k * dQ_dE[gi] / Eg
    rows_g_E[np.arange(net.n_g), gi] += (net.xd_diff * Q[gi] / E[gi] ** 2) - 1.0
    return np.block([
        [dP_dd[nr][:, nr], dP_dE[nr]],
        [rows_g_phi, rows_g_E],
        [dQ_dd[li][:, nr], dQ_dE[li]],
    ])


def solve_power_flow(net: NetworkConfig, P_g, P_l, tol=None, max_iter=None):
    """Damped Newton for the synchronous steady state from a flat start.

    Returns (phi, E, residual_norm, iterations, converged).
    """
    tol = net.solver.newton_tol if tol is None else tol
    max_iter = net.solver.newton_max_iter if max_iter is None else max_iter
    P_set = np.empty(net.n)
    P_set[net.gen_idx] = P_g
    P_set[net.load_idx] = -np.asarray(P_l)
    a = net.n - 1
    y = np.concatenate([np.zeros(a), np.ones(net.n)])
    y[a + net.gen_idx] = net.Ef

    def residual(y):
        E = y[a:]
        if not np.all(E > EPS_E):
            return None
        return _flow_residual(net, y[:a], E, P_set)

    r = residual(y)
    norm = np.max(np.abs(r))
    polished = False
    it = 0
    while it < max_iter:
        if norm < tol:
            if polished:
                break
            polished = True
        J = _flow_jacobian(net, y[:a], y[a:])
        try:
            step = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            break
        it += 1
        alpha = 1.0
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            y_try = y + alpha * step
            r_try = residual(y_try)
            if r_try is not None and np.all(np.isfinite(r_try)):
                n_try = np.max(np.abs(r_try))
                if n_try < norm or norm < tol:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            break
        y, r, norm = y_try, r_try, n_try
    return y[:a], y[a:], float(norm), it, bool(norm < tol)


def _beyond_capacity(net: NetworkConfig, z, E) -> bool:
    """True when some bus demands more than its lines can carry at voltages E.

    |P_i| <= sum_j B_ij E_i E_j with equality only at |delta_ij| = pi/2.
    """
    P_set = np.empty(net.n)
    P_set[net.gen_idx] = z.P_g
    P_set[net.load_idx] = -z.P_l
    cap = np.zeros(net.n)
    flow = net.line_B * E[net.line_i] * E[net.line_j]
    np.add.at(cap, net.line_i, flow)
    np.add.at(cap, net.line_j, flow)
    return bool(np.any(np.abs(P_set) >= cap))


def find_equilibrium(net: NetworkConfig, with_hessian: bool = True, margin: float = 0.0) -> EquilibriumReport:
    kkt = kkt_oracle(net)
    z = kkt.state
    phi, E, pf_res, iters, ok = solve_power_flow(net, z.P_g, z.P_l)
    lay = Layout(net)
    x = np.empty(lay.size)
    x[lay.x_c] = z.to_energy(net)
    x[lay.phi] = phi
    x[lay.p_g] = 0.0
    x[lay.E_g] = E[net.gen_idx]
    x[lay.E_l] = E[net.load_idx]
    delta = bus_angles(net, phi)
    ang = delta[net.line_i] - delta[net.line_j]
    report = EquilibriumReport(
        status="converged",
        state=x,
        kkt=kkt,
        kkt_residuals=kkt_residual(net, z).norms(),
        power_flow_residual=pf_res,
        rhs_residual=math.nan,
        angle_differences=ang,
        newton_iterations=iters,
    )
    wrapped = np.abs(np.angle(np.exp(1j * ang)))
    if not ok:
        if np.all(np.isfinite(ang)) and (np.any(wrapped >= math.pi / 2) or _beyond_capacity(net, z, E)):
            report.status = "infeasible_angles"
            raise InfeasibleAngles(
                f"no synchronous solution with |delta_ij| < pi/2 (last residual {pf_res:.3e})", report
            )
        report.status = "newton_failed"
        raise NewtonNonConvergence(f"power-flow Newton did not converge (last residual {pf_res:.3e})", report)

    m = model_for(net)
    dx, _ = K.vector_field(m, x, x[lay.E_l])
    report.rhs_residual = float(np.max(np.abs(dx)))
    if report.negative_generation:
        report.notes.append("optimal dispatch contains negative generation or demand")
    if np.any(wrapped >= math.pi / 2):
        report.status = "infeasible_angles"
        report.notes.append("some |delta_ij| >= pi/2; outside the positivity certificate's domain")
        log.warning("equilibrium has angle differences outside (-pi/2, pi/2)")
        return report
    if with_hessian:
        vals, verdicts = hessian_condition(net, x, margin=margin)
        report.hessian_values = vals
        report.hessian_verdicts = verdicts
        report.min_eigenvalue = numeric_hessian_pd(net, x)
    return report


# ---------------------------------------------------------------------------
# shifted energy

def _check_load_voltages(net, x):
    El = np.asarray(x)[Layout(net).E_l]
    if not np.all(El > 0):
        raise StateDomainError("shifted energy needs positive load voltages")


def shifted_hamiltonian(net: NetworkConfig, x, x_bar) -> float:
    """Shifted energy H_p + H_a + H_c relative to ``x_bar`` (flat vectors).

    Evaluated term by term in difference form, so values near x_bar keep
    full relative precision.
    """
    x = np.asarray(x, dtype=float)
    _check_load_voltages(net, x)
    return float(K.shifted_hamiltonian(model_for(net), x, np.asarray(x_bar, dtype=float)))


def _grad_energy(net: NetworkConfig, x) -> np.ndarray:
    lay = Layout(net)
    g = np.empty(lay.size)
    g[lay.x_c] = x[lay.x_c] / net.tau_vector
    g[lay.x_p] = grad_hamiltonian_physical(net, PhysicalState.from_vector(net, x[lay.x_p]))
    g[lay.E_l] -= net.Qbar / x[lay.E_l]
    return g


def grad_shifted_hamiltonian(net: NetworkConfig, x, x_bar) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    _check_load_voltages(net, x)
    return _grad_energy(net, x) - _grad_energy(net, np.asarray(x_bar, dtype=float))


def dissipation_rate(net: NetworkConfig, x, x_bar) -> float:
    """Closed-form rate of change of the shifted energy; never positive."""
    x = np.asarray(x, dtype=float)
    _check_load_voltages(net, x)
    return float(K.dissipation_rate(model_for(net), x, np.asarray(x_bar, dtype=float)))


# ---------------------------------------------------------------------------
# positivity of the Hessian at the equilibrium

def hessian_condition(net: NetworkConfig, x_bar, margin: float = 0.0):
    """Per-bus sufficient conditions for a positive definite Hessian.

    Returns ``(values, verdicts)`` indexed by bus; a bus passes when its
    value exceeds ``margin``.
    """
    lay = Layout(net)
    x_bar = np.asarray(x_bar, dtype=float)
    phys = PhysicalState.from_vector(net, x_bar[lay.x_p])
    E = phys.voltages(net)
    delta = bus_angles(net, phys.phi)
    if not np.all(E > 0):
        raise DomainViolation("equilibrium voltages must be positive")
    vals = net.B_self.copy()
    vals[net.gen_idx] += 1.0 / net.xd_diff
    for i, j, B in zip(net.line_i, net.line_j, net.line_B):
        d = delta[i] - delta[j]
        if not abs(d) < math.pi / 2:
            raise DomainViolation(
                f"angle difference {d:.4f} on line {net.bus_label(i)}-{net.bus_label(j)} is outside (-pi/2, pi/2)"
            )
        s2, c = math.sin(d) ** 2, math.cos(d)
        vals[i] -= B * (E[i] + E[j] * s2) / (E[i] * c)
        vals[j] -= B * (E[j] + E[i] * s2) / (E[j] * c)
    return vals, vals > margin


def numeric_hessian(net: NetworkConfig, x_bar, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference Hessian of the shifted energy at x_bar.

    Every entry is computed from its own four-point stencil; symmetry is not
    imposed.
    """
    m = model_for(net)
    xb = np.asarray(x_bar, dtype=float)
    N = xb.size
    H = np.empty((N, N))
    f = lambda y: K.shifted_hamiltonian(m, y, xb)  # noqa: E731
    for i in range(N):
        for j in range(N):
            def at(si, sj):
                y = xb.copy()
                y[i] += si * h
                y[j] += sj * h
                return f(y)
            H[i, j] = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4 * h * h)
    return H


def numeric_hessian_pd(net: NetworkConfig, x_bar, h: float = 1e-5) -> float:
    """Smallest eigenvalue of the finite-difference Hessian."""
    H = numeric_hessian(net, x_bar, h)
    return float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])
