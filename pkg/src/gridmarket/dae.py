"""Closed-loop DAE integration: algebraic solves, half-explicit RK4, trajectories."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import NonConvergence, NonFiniteState, RegularityLoss, VoltageCollapse
from .market import controller_structure, welfare_gradient
from .network import NetworkConfig
from .power import bus_angles, check_voltages
from .state import ClosedLoopState, Layout, model_for

log = logging.getLogger(__name__)

_ERRORS = {
    K.NONCONVERGENCE: NonConvergence,
    K.REGULARITY: RegularityLoss,
    K.COLLAPSE: VoltageCollapse,
    K.NONFINITE: NonFiniteState,
}


def _raise(status: int, message: str):
    if status != K.OK:
        raise _ERRORS[status](message)


def regularity_check(jacobian) -> float:
    """Condition estimate max|U_ii| / min|U_ii| from LU with partial pivoting."""
    J = np.atleast_2d(np.asarray(jacobian, dtype=float))
    _, cond = K.lu_solve(J, np.zeros(J.shape[0]))
    return float(cond)


def solve_algebraic(net: NetworkConfig, phi, E_g, E_l_guess, full_output: bool = False):
    """Load voltages satisfying the reactive-power balance at fixed (phi, E_g)."""
    m = model_for(net)
    guess = np.asarray(E_l_guess, dtype=float)
    check_voltages(guess)
    lay = Layout(net)
    x = np.zeros(lay.size)
    x[lay.phi] = phi
    x[lay.E_g] = E_g
    check_voltages(x[lay.E_g])
    El, status, iters, res, cond = K.solve_loads(m, bus_angles(net, phi), x, guess)
    _raise(status, f"load-voltage Newton failed after {iters} iterations (residual {res:.3e}, cond {cond:.3e})")
    if full_output:
        return El, {"iterations": int(iters), "residual": float(res), "cond": float(cond)}
    return El


def closed_loop_rhs(net: NetworkConfig, x):
    """Derivative of the differential states at a consistent flat state, and omega_l."""
    lay = Layout(net)
    x = np.asarray(x, dtype=float)
    return K.vector_field(model_for(net), x, x[lay.E_l].copy())


def interconnection_matrix(net: NetworkConfig, E_l) -> np.ndarray:
    """Block matrix of the shifted closed loop after eliminating omega_l.

    Acts on the gradient of the shifted energy, ordered (x_c, phi, p_g, E_g, E_l).
    """
    lay = Layout(net)
    N = lay.size
    ng, nl = net.n_g, net.n_l
    nc = lay.x_c.stop
    G1 = np.zeros((ng, nc))
    G1[:, lay.P_g] = np.eye(ng)
    G2 = np.zeros((nl, nc))
    G2[:, lay.P_l] = np.eye(nl)
    Dg = net.D_hat[net.gen_idx]
    Dl = net.D_hat[net.load_idx]
    Ali = np.diag(1.0 / net.A_l)
    Jc = controller_structure(net.D_c[net.gen_idx], net.D_c[net.load_idx])
    F = np.zeros((N, N))
    c, f, p, e, l = lay.x_c, lay.phi, lay.p_g, lay.E_g, lay.E_l
    F[c, c] = Jc - G2.T @ Ali @ G2
    F[c, f] = -G2.T @ Ali @ Dl
    F[c, p] = -G1.T
    F[f, c] = -Dl.T @ Ali @ G2
    F[f, f] = -Dl.T @ Ali @ Dl
    F[f, p] = Dg.T
    F[p, c] = G1
    F[p, f] = -Dg
    F[p, p] = -np.diag(net.A_g)
    F[e, e] = -np.diag(net.R_g)
    F[l, l] = -np.diag(np.asarray(E_l))
    return F


def structured_rhs(net: NetworkConfig, x, x_bar) -> np.ndarray:
    """F(E_l) grad H_bar + welfare-gradient shift; last block is the algebraic residual."""
    from .analysis import grad_shifted_hamiltonian
    from .market import ControllerState

    lay = Layout(net)
    x = np.asarray(x, dtype=float)
    F = interconnection_matrix(net, x[lay.E_l])
    out = F @ grad_shifted_hamiltonian(net, x, x_bar)
    z = ControllerState.from_energy(net, x[lay.x_c])
    zb = ControllerState.from_energy(net, np.asarray(x_bar)[lay.x_c])
    out[lay.x_c] += welfare_gradient(net, z) - welfare_gradient(net, zb)
    return out


def step(net: NetworkConfig, state: ClosedLoopState, dt: float) -> ClosedLoopState:
    x, status, iters, res = K.rk4_step(model_for(net), state.to_vector(net), float(dt))
    _raise(status, f"step from t={state.t:g} failed (newton iterations {iters}, residual {res:.3e})")
    return ClosedLoopState.from_vector(net, x, state.t + dt)


@dataclass
class Trajectory:
    """Snapshots every ``stride`` steps plus per-step diagnostics.

    ``H`` and ``Hdot`` are the shifted energy and its closed-form rate
    relative to ``x_bar``; ``residual`` is the reactive-constraint residual
    after each step's projection.
    """

    times: np.ndarray
    states: np.ndarray
    step_times: np.ndarray
    H: np.ndarray
    Hdot: np.ndarray
    residual: np.ndarray
    newton_iterations: np.ndarray
    x_bar: np.ndarray
    dt: float
    stride: int

    def state(self, net: NetworkConfig, k: int = -1) -> ClosedLoopState:
        return ClosedLoopState.from_vector(net, self.states[k], float(self.times[k]))

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def consistent_state(net: NetworkConfig, x) -> np.ndarray:
    """Replace E_l in a flat state by the solution of the reactive balance."""
    lay = Layout(net)
    x = np.array(x, dtype=float)
    x[lay.E_l] = solve_algebraic(net, x[lay.phi], x[lay.E_g], x[lay.E_l])
    return x


def initial_state(net: NetworkConfig, x_bar, perturb: float = 0.0, seed: int | None = None) -> np.ndarray:
    """Flat initial vector from the configuration's initial recipe.

    Starts from ``x_bar`` (or a flat profile with zero dispatch when
    ``from_equilibrium`` is off), applies explicit per-bus overrides, then adds
    the configured frequency and price offsets. ``perturb`` adds a seeded
    uniform perturbation of that half-width to every differential variable
    in physical units (angles, frequencies, voltages, dispatch, flows, prices).
    Frequency offsets apply to generators only; load frequencies are
    algebraic.
    """
    lay = Layout(net)
    recipe = net.initial
    idx = {int(b): k for k, b in enumerate(net.bus_ids)}
    gen_pos = {int(k): p for p, k in enumerate(net.gen_idx)}
    load_pos = {int(k): p for p, k in enumerate(net.load_idx)}

    if recipe.from_equilibrium:
        s = ClosedLoopState.from_vector(net, x_bar)
    else:
        from .market import ControllerState
        from .power import PhysicalState

        E = np.ones(net.n)
        E[net.gen_idx] = net.Ef
        s = ClosedLoopState(
            ControllerState(
                np.zeros(net.n_g), np.zeros(net.n_l), np.zeros(net.m_c), np.zeros(net.n_g), np.zeros(net.n_l)
            ),
            PhysicalState(np.zeros(net.n - 1), np.zeros(net.n_g), E[net.gen_idx], E[net.load_idx]),
        )
    z, ph = s.controller, s.physical
    omega = ph.omega_g(net)
    delta = bus_angles(net, ph.phi)
    E = ph.voltages(net)

    for bid, val in (recipe.delta or {}).items():
        delta[idx[bid]] = val
    for bid, val in (recipe.E or {}).items():
        E[idx[bid]] = val
    for bid, val in (recipe.P or {}).items():
        k = idx[bid]
        if k in gen_pos:
            z.P_g[gen_pos[k]] = val
        else:
            z.P_l[load_pos[k]] = val
    for bid, val in (recipe.lam or {}).items():
        k = idx[bid]
        if k in gen_pos:
            z.lam_g[gen_pos[k]] = val
        else:
            z.lam_l[load_pos[k]] = val
    if recipe.v is not None:
        z.v[:] = recipe.v

    def offsets(value) -> np.ndarray:
        if isinstance(value, dict):
            out = np.zeros(net.n)
            for bid, val in value.items():
                out[idx[bid]] = val
            return out
        return np.full(net.n, float(value))

    omega = omega + offsets(recipe.omega)[net.gen_idx]
    dlam = offsets(recipe.price)
    z.lam_g += dlam[net.gen_idx]
    z.lam_l += dlam[net.load_idx]

    if perturb:
        rng = np.random.default_rng(seed)
        u = lambda k: rng.uniform(-perturb, perturb, k)  # noqa: E731
        delta = delta + u(net.n)
        omega = omega + u(net.n_g)
        E[net.gen_idx] += u(net.n_g)
        z.P_g += u(net.n_g)
        z.P_l += u(net.n_l)
        z.v += u(net.m_c)
        z.lam_g += u(net.n_g)
        z.lam_l += u(net.n_l)

    check_voltages(E)
    x = np.empty(lay.size)
    x[lay.x_c] = z.to_energy(net)
    x[lay.phi] = (delta - delta[net.ref])[net.nonref_idx]
    x[lay.p_g] = net.M * omega
    x[lay.E_g] = E[net.gen_idx]
    x[lay.E_l] = E[net.load_idx]
    return x


def simulate(
    net: NetworkConfig,
    initial: ClosedLoopState | np.ndarray,
    t_end: float | None = None,
    dt: float | None = None,
    x_bar=None,
    stride: int = 1,
) -> Trajectory:
    """Integrate the closed loop from ``initial``.

    The initial load voltages are treated as a guess and made consistent
    first. ``x_bar`` defaults to the computed equilibrium and only affects
    the energy diagnostics.
    """
    t_end = net.solver.t_end if t_end is None else float(t_end)
    dt = net.solver.dt if dt is None else float(dt)
    if isinstance(initial, ClosedLoopState):
        x0 = initial.to_vector(net)
    else:
        x0 = np.asarray(initial, dtype=float)
    if x_bar is None:
        from .analysis import find_equilibrium

        x_bar = find_equilibrium(net, with_hessian=False).state
    x0 = consistent_state(net, x0)
    nsteps = int(round(t_end / dt))
    stride = max(1, int(stride))
    log.info("integrating %d steps of %g s", nsteps, dt)
    samples, H, Hd, res, its, status, failed = K.integrate(
        model_for(net), x0, np.asarray(x_bar, dtype=float), dt, nsteps, stride
    )
    _raise(status, f"integration failed at step {failed} (t = {failed * dt:g} s)")
    return Trajectory(
        times=np.arange(samples.shape[0]) * stride * dt,
        states=samples,
        step_times=np.arange(nsteps + 1) * dt,
        H=H,
        Hdot=Hd,
        residual=res,
        newton_iterations=its,
        x_bar=np.asarray(x_bar, dtype=float),
        dt=dt,
        stride=stride,
    )
