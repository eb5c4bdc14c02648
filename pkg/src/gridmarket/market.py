"""Social welfare, distributed primal-dual pricing dynamics and the KKT point."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .network import NetworkConfig, QuadraticWelfare


@dataclass
class ControllerState:
    """Market variables z_c = (P_g, P_l, v, lambda_g, lambda_l).

    The energy variables are x_c = tau_c z_c with tau_c taken from the
    network configuration (``to_energy``/``from_energy``).
    """

    P_g: np.ndarray
    P_l: np.ndarray
    v: np.ndarray
    lam_g: np.ndarray
    lam_l: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.P_g, self.P_l, self.v, self.lam_g, self.lam_l])

    @classmethod
    def from_vector(cls, net: NetworkConfig, z) -> "ControllerState":
        z = np.asarray(z, dtype=float)
        ng, nl, mc = net.n_g, net.n_l, net.m_c
        cuts = np.cumsum([ng, nl, mc, ng])
        parts = np.split(z[: 2 * net.n + mc], cuts)
        return cls(*(p.copy() for p in parts))

    def to_energy(self, net: NetworkConfig) -> np.ndarray:
        return net.tau_vector * self.as_vector()

    @classmethod
    def from_energy(cls, net: NetworkConfig, x_c) -> "ControllerState":
        return cls.from_vector(net, np.asarray(x_c) / net.tau_vector)

    def prices(self, net: NetworkConfig) -> np.ndarray:
        lam = np.empty(net.n)
        lam[net.gen_idx] = self.lam_g
        lam[net.load_idx] = self.lam_l
        return lam


class KKTResidual(NamedTuple):
    stat_g: np.ndarray
    stat_l: np.ndarray
    flow: np.ndarray
    balance: np.ndarray

    def norms(self) -> dict[str, float]:
        return {k: float(np.max(np.abs(v), initial=0.0)) for k, v in self._asdict().items()}

    def max(self) -> float:
        return max(self.norms().values())


class KKTSolution(NamedTuple):
    state: ControllerState
    price: float
    residual: KKTResidual


def social_welfare(P_g, P_l, welfare: QuadraticWelfare) -> float:
    return float(np.sum(welfare.utility(np.asarray(P_l))) - np.sum(welfare.cost(np.asarray(P_g))))


def welfare_gradient(net: NetworkConfig, z: ControllerState) -> np.ndarray:
    """Gradient of S over the full z_c (zero in the v and lambda blocks)."""
    w = net.welfare
    return np.concatenate([
        -w.cost_grad(z.P_g), w.utility_grad(z.P_l),
        np.zeros(net.m_c + net.n),
    ])


def _nodal(net: NetworkConfig, gen_part, load_part) -> np.ndarray:
    out = np.empty(net.n)
    out[net.gen_idx] = gen_part
    out[net.load_idx] = load_part
    return out


def controller_structure(D_cg, D_cl) -> np.ndarray:
    """Skew-symmetric interconnection J_c acting on grad H_c = z_c."""
    D_cg, D_cl = np.atleast_2d(D_cg), np.atleast_2d(D_cl)
    ng, mc = D_cg.shape
    nl = D_cl.shape[0]
    N = 2 * (ng + nl) + mc
    J = np.zeros((N, N))
    g, l, v = slice(0, ng), slice(ng, ng + nl), slice(ng + nl, ng + nl + mc)
    lg = slice(ng + nl + mc, 2 * ng + nl + mc)
    ll = slice(2 * ng + nl + mc, N)
    J[g, lg] = np.eye(ng)
    J[l, ll] = -np.eye(nl)
    J[v, lg] = -D_cg.T
    J[v, ll] = -D_cl.T
    J[lg, g] = -np.eye(ng)
    J[lg, v] = D_cg
    J[ll, l] = np.eye(nl)
    J[ll, v] = D_cl
    return J


def controller_rhs(net: NetworkConfig, z: ControllerState, omega_g, omega_l) -> ControllerState:
    """Time derivative of z_c under the pricing dynamics with frequency feedback."""
    w, t = net.welfare, net.tau
    D = net.D_c
    Dv = D @ z.v
    lam = _nodal(net, z.lam_g, z.lam_l)
    return ControllerState(
        P_g=(-w.cost_grad(z.P_g) + z.lam_g - omega_g) / t.g,
        P_l=(w.utility_grad(z.P_l) - z.lam_l + omega_l) / t.l,
        v=-(D.T @ lam) / t.v,
        lam_g=(Dv[net.gen_idx] - z.P_g) / t.lg,
        lam_l=(Dv[net.load_idx] + z.P_l) / t.ll,
    )


def kkt_residual(net: NetworkConfig, z: ControllerState) -> KKTResidual:
    w = net.welfare
    D = net.D_c
    lam = _nodal(net, z.lam_g, z.lam_l)
    return KKTResidual(
        stat_g=w.cost_grad(z.P_g) - z.lam_g,
        stat_l=-w.utility_grad(z.P_l) + z.lam_l,
        flow=D.T @ lam,
        balance=-D @ z.v + _nodal(net, z.P_g, -z.P_l),
    )


def kkt_oracle(net: NetworkConfig) -> KKTSolution:
    """Closed-form optimum of the quadratic welfare problem.

    Marginal costs and utilities equalize at a single price; total supply
    equals total demand fixes it. For a cyclic communication graph the
    virtual flows are the minimum-norm solution.
    """
    w = net.welfare
    denom = np.sum(1.0 / w.q) + np.sum(1.0 / w.b)
    assert denom > 0
    price = (np.sum(w.c / w.q) + np.sum(w.a / w.b)) / denom
    P_g = (price - w.c) / w.q
    P_l = (w.a - price) / w.b
    rhs = _nodal(net, P_g, -P_l)
    v = np.linalg.lstsq(net.D_c, rhs, rcond=None)[0]
    z = ControllerState(
        P_g=P_g, P_l=P_l, v=v,
        lam_g=np.full(net.n_g, price), lam_l=np.full(net.n_l, price),
    )
    return KKTSolution(state=z, price=float(price), residual=kkt_residual(net, z))
