"""Physical model: injections, energy function and the port-Hamiltonian vector field.

These are the readable numpy versions. The integrator runs compiled
equivalents (see ``_kernels``) that are checked against this module.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import StateDomainError
from .network import NetworkConfig

# voltage floor; evaluations at or below it are outside the model's domain
EPS_E = 1e-6


@dataclass
class PhysicalState:
    phi: np.ndarray  # reduced angles, delta_k - delta_ref for k != ref
    p_g: np.ndarray  # generator angular momenta M * omega
    E_g: np.ndarray
    E_l: np.ndarray

    def voltages(self, net: NetworkConfig) -> np.ndarray:
        E = np.empty(net.n)
        E[net.gen_idx] = self.E_g
        E[net.load_idx] = self.E_l
        return E

    def omega_g(self, net: NetworkConfig) -> np.ndarray:
        return self.p_g / net.M

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.phi, self.p_g, self.E_g, self.E_l])

    @classmethod
    def from_vector(cls, net: NetworkConfig, x) -> "PhysicalState":
        x = np.asarray(x, dtype=float)
        a = net.n - 1
        b = a + net.n_g
        c = b + net.n_g
        return cls(x[:a].copy(), x[a:b].copy(), x[b:c].copy(), x[c:c + net.n_l].copy())


@dataclass
class PortInput:
    P_g: np.ndarray
    P_l: np.ndarray


def check_voltages(E) -> None:
    E = np.asarray(E)
    if not np.all(E > EPS_E):
        k = int(np.argmin(E))
        raise StateDomainError(f"voltage {E[k]!r} at bus index {k} is not above {EPS_E}")


def bus_angles(net: NetworkConfig, phi) -> np.ndarray:
    """A representative delta with delta_ref = 0."""
    delta = np.zeros(net.n)
    delta[net.nonref_idx] = phi
    return delta


def angle_differences(net: NetworkConfig, phi) -> np.ndarray:
    delta = bus_angles(net, phi)
    return delta[net.line_i] - delta[net.line_j]


def _pairwise(net: NetworkConfig, phi, E):
    delta = bus_angles(net, phi)
    dd = delta[:, None] - delta[None, :]
    BEE = net.B_matrix * np.outer(E, E)
    return dd, BEE


def active_injection(net: NetworkConfig, phi, E) -> np.ndarray:
    dd, BEE = _pairwise(net, phi, E)
    return (BEE * np.sin(dd)).sum(axis=1)


def reactive_injection(net: NetworkConfig, phi, E) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    dd, BEE = _pairwise(net, phi, E)
    return net.B_self * E**2 - (BEE * np.cos(dd)).sum(axis=1)


def injection_jacobians(net: NetworkConfig, phi, E):
    """Partials of (P, Q) with respect to bus angles delta and voltages E.

    Returns ``(dP_ddelta, dP_dE, dQ_ddelta, dQ_dE)``, each n x n.
    """
    E = np.asarray(E, dtype=float)
    dd, BEE = _pairwise(net, phi, E)
    B = net.B_matrix
    S, C = np.sin(dd), np.cos(dd)
    dP_dd = -BEE * C
    dP_dd[np.diag_indices(net.n)] = (BEE * C).sum(axis=1)
    dQ_dd = -BEE * S
    dQ_dd[np.diag_indices(net.n)] = (BEE * S).sum(axis=1)
    dP_dE = B * S * E[:, None]
    dP_dE[np.diag_indices(net.n)] = (B * S * E[None, :]).sum(axis=1)
    dQ_dE = -B * C * E[:, None]
    dQ_dE[np.diag_indices(net.n)] = 2 * net.B_self * E - (B * C * E[None, :]).sum(axis=1)
    return dP_dd, dP_dE, dQ_dd, dQ_dE


def hamiltonian_physical(net: NetworkConfig, x: PhysicalState) -> float:
    E = x.voltages(net)
    check_voltages(E)
    kinetic = 0.5 * np.sum(x.p_g**2 / net.M)
    excitation = 0.5 * np.sum((x.E_g - net.Ef) ** 2 / net.xd_diff)
    d = angle_differences(net, x.phi)
    network = 0.5 * np.sum(net.B_self * E**2) - np.sum(
        net.line_B * E[net.line_i] * E[net.line_j] * np.cos(d)
    )
    return float(kinetic + excitation + network)


def grad_hamiltonian_physical(net: NetworkConfig, x: PhysicalState) -> np.ndarray:
    """Gradient ordered as (d/dphi, d/dp_g, d/dE_g, d/dE_l), flattened."""
    E = x.voltages(net)
    check_voltages(E)
    P = active_injection(net, x.phi, E)
    Q = reactive_injection(net, x.phi, E)
    # dH/ddelta_i = P_i and delta = L phi with delta_ref = 0
    d_phi = P[net.nonref_idx]
    d_p = x.p_g / net.M
    QE = Q / E
    d_Eg = (x.E_g - net.Ef) / net.xd_diff + QE[net.gen_idx]
    d_El = QE[net.load_idx]
    return np.concatenate([d_phi, d_p, d_Eg, d_El])


def load_frequency(P_loads, P_l, A_l):
    """Frequency at frequency-dependent loads from P_i = -A_i w_i - P_li."""
    return -(np.asarray(P_loads) + np.asarray(P_l)) / np.asarray(A_l)


def reactive_residual(net: NetworkConfig, x: PhysicalState) -> np.ndarray:
    grad = grad_hamiltonian_physical(net, x)
    d_El = grad[-net.n_l:]
    return -x.E_l * d_El + net.Qbar


def physical_rhs(net: NetworkConfig, x: PhysicalState, omega_l, P_g, P_l):
    """Differential part of the physical pH system: (phi_dot, p_g_dot, E_g_dot).

    ``P_l`` enters only through ``omega_l``; it is accepted to keep the port
    signature complete.
    """
    grad = grad_hamiltonian_physical(net, x)
    a, ng = net.n - 1, net.n_g
    d_phi, d_p, d_Eg = grad[:a], grad[a:a + ng], grad[a + ng:a + 2 * ng]
    D_g = net.D_hat[net.gen_idx]
    D_l = net.D_hat[net.load_idx]
    omega_g = d_p
    phi_dot = D_g.T @ omega_g + D_l.T @ np.asarray(omega_l)
    p_dot = -D_g @ d_phi - net.A_g * omega_g + np.asarray(P_g)
    E_dot = -net.R_g * d_Eg
    return phi_dot, p_dot, E_dot


def load_omega(net: NetworkConfig, x: PhysicalState, P_l) -> np.ndarray:
    """omega_l at a state, with P_l the load demand setpoints."""
    P = active_injection(net, x.phi, x.voltages(net))
    return load_frequency(P[net.load_idx], P_l, net.A_l)
