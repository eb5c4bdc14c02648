"""Closed-loop state bundle and the flat vector layout shared by all solvers."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels as K
from .market import ControllerState
from .network import NetworkConfig
from .power import EPS_E, PhysicalState


@lru_cache(maxsize=64)
def model_for(net: NetworkConfig) -> K.Model:
    return K.build_model(net, EPS_E)


class Layout:
    """Slices of the flat vector (x_c, phi, p_g, E_g, E_l)."""

    def __init__(self, net: NetworkConfig):
        n, ng, nl, mc = net.n, net.n_g, net.n_l, net.m_c
        self.x_c = slice(0, 2 * n + mc)
        self.P_g = slice(0, ng)
        self.P_l = slice(ng, n)
        self.v = slice(n, n + mc)
        self.lam_g = slice(n + mc, n + mc + ng)
        self.lam_l = slice(n + mc + ng, 2 * n + mc)
        o = 2 * n + mc
        self.phi = slice(o, o + n - 1)
        o += n - 1
        self.p_g = slice(o, o + ng)
        self.E_g = slice(o + ng, o + 2 * ng)
        self.E_l = slice(o + 2 * ng, o + 2 * ng + nl)
        self.x_p = slice(2 * n + mc, o + 2 * ng + nl)
        self.differential = slice(0, o + 2 * ng)
        self.size = o + 2 * ng + nl


@dataclass
class ClosedLoopState:
    controller: ControllerState
    physical: PhysicalState
    t: float = 0.0

    def to_vector(self, net: NetworkConfig) -> np.ndarray:
        return np.concatenate([self.controller.to_energy(net), self.physical.as_vector()])

    @classmethod
    def from_vector(cls, net: NetworkConfig, x, t: float = 0.0) -> "ClosedLoopState":
        lay = Layout(net)
        x = np.asarray(x, dtype=float)
        return cls(
            controller=ControllerState.from_energy(net, x[lay.x_c]),
            physical=PhysicalState.from_vector(net, x[lay.x_p]),
            t=t,
        )

    def omega_g(self, net: NetworkConfig) -> np.ndarray:
        return self.physical.omega_g(net)

    def omega_l(self, net: NetworkConfig) -> np.ndarray:
        from .power import load_omega

        return load_omega(net, self.physical, self.controller.P_l)

    def frequencies(self, net: NetworkConfig) -> np.ndarray:
        w = np.empty(net.n)
        w[net.gen_idx] = self.omega_g(net)
        w[net.load_idx] = self.omega_l(net)
        return w
