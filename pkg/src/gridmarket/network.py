"""Network topology, parameters, communication graph and welfare data.

Everything here is immutable once built. ``NetworkConfig`` exposes the
index bookkeeping and per-bus parameter arrays the numerical modules use.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ConfigParseError, DisconnectedGraph, ValidationError

GENERATOR = "generator"
LOAD = "load"


@dataclass(frozen=True)
class BusParams:
    id: int
    kind: str
    A: float
    shunt: float = 0.0
    # generator only
    M: float | None = None
    Xd: float | None = None
    Xdp: float | None = None
    T: float | None = None
    Ef: float | None = None
    # load only
    Qbar: float | None = None

    @property
    def is_generator(self) -> bool:
        return self.kind == GENERATOR

    def validate(self) -> None:
        who = f"bus {self.id}"
        if self.kind not in (GENERATOR, LOAD):
            raise ValidationError(f"unknown bus kind {self.kind!r}", who)
        _finite(who, A=self.A, shunt=self.shunt)
        if not self.A > 0:
            raise ValidationError("damping must be positive (A > 0)", who)
        if not self.shunt >= 0:
            raise ValidationError("shunt must be nonnegative (shunt >= 0)", who)
        if self.is_generator:
            for name in ("M", "Xd", "Xdp", "T", "Ef"):
                if getattr(self, name) is None:
                    raise ValidationError(f"generator requires {name}", who)
            _finite(who, M=self.M, Xd=self.Xd, Xdp=self.Xdp, T=self.T, Ef=self.Ef)
            if not self.M > 0:
                raise ValidationError("inertia must be positive (M > 0)", who)
            if not self.Xdp > 0:
                raise ValidationError("transient reactance must be positive (Xdp > 0)", who)
            if not self.Xd > self.Xdp:
                raise ValidationError("reactances must satisfy Xd > Xdp", who)
            if not self.T > 0:
                raise ValidationError("time constant must be positive (T > 0)", who)
            if not self.Ef > 0:
                raise ValidationError("excitation voltage must be positive (Ef > 0)", who)
        else:
            if self.Qbar is None:
                raise ValidationError("load requires Qbar", who)
            _finite(who, Qbar=self.Qbar)
            if not self.Qbar >= 0:
                raise ValidationError("reactive demand must be nonnegative (Qbar >= 0)", who)


@dataclass(frozen=True)
class LineParams:
    i: int
    j: int
    B: float


@dataclass(frozen=True, eq=False)
class QuadraticWelfare:
    """C_i(P) = q P^2/2 + c P per generator, U_i(P) = a P - b P^2/2 per load.

    Arrays are aligned with the generator and load orderings of the network.
    """

    q: np.ndarray
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def cost(self, P_g):
        return 0.5 * self.q * P_g**2 + self.c * P_g

    def cost_grad(self, P_g):
        return self.q * P_g + self.c

    def cost_hess(self, P_g):
        return np.diag(self.q * np.ones_like(P_g))

    def utility(self, P_l):
        return self.a * P_l - 0.5 * self.b * P_l**2

    def utility_grad(self, P_l):
        return self.a - self.b * P_l

    def utility_hess(self, P_l):
        return np.diag(-self.b * np.ones_like(P_l))


@dataclass(frozen=True, eq=False)
class CommGraph:
    edges: tuple[tuple[int, int], ...]  # internal bus indices, oriented
    D: np.ndarray
    is_tree: bool

    @property
    def m(self) -> int:
        return self.D.shape[1]


@dataclass(frozen=True)
class Gains:
    g: float = 1.0
    l: float = 1.0
    v: float = 1.0
    lg: float = 1.0
    ll: float = 1.0


@dataclass(frozen=True)
class SolverSettings:
    dt: float = 1e-3
    t_end: float = 200.0
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    cond_limit: float = 1e12


@dataclass(frozen=True)
class InitialSpec:
    """Initial condition recipe.

    With ``from_equilibrium`` the simulation starts at the computed
    equilibrium; explicit per-bus values (keyed by bus id) then override
    it and ``omega``/``price`` perturbations are added on top.
    """

    from_equilibrium: bool = True
    omega: float | dict[int, float] = 0.0
    price: float | dict[int, float] = 0.0
    delta: dict[int, float] | None = None
    E: dict[int, float] | None = None
    P: dict[int, float] | None = None
    v: tuple[float, ...] | None = None
    lam: dict[int, float] | None = None


@dataclass(frozen=True, eq=False)
class NetworkConfig:
    buses: tuple[BusParams, ...]
    lines: tuple[LineParams, ...]
    comm: CommGraph
    welfare: QuadraticWelfare
    tau: Gains = field(default_factory=Gains)
    solver: SolverSettings = field(default_factory=SolverSettings)
    initial: InitialSpec = field(default_factory=InitialSpec)
    reference: int = -1  # internal index of the reference bus
    source: dict | None = field(default=None, compare=False, repr=False)

    # -- sizes and index maps -------------------------------------------
    @property
    def n(self) -> int:
        return len(self.buses)

    @cached_property
    def bus_ids(self) -> np.ndarray:
        return np.array([b.id for b in self.buses])

    @cached_property
    def gen_idx(self) -> np.ndarray:
        return np.array([k for k, b in enumerate(self.buses) if b.is_generator], dtype=np.int64)

    @cached_property
    def load_idx(self) -> np.ndarray:
        return np.array([k for k, b in enumerate(self.buses) if not b.is_generator], dtype=np.int64)

    @property
    def n_g(self) -> int:
        return len(self.gen_idx)

    @property
    def n_l(self) -> int:
        return len(self.load_idx)

    @property
    def m(self) -> int:
        return len(self.lines)

    @property
    def m_c(self) -> int:
        return self.comm.m

    @property
    def ref(self) -> int:
        return self.reference % self.n

    @cached_property
    def nonref_idx(self) -> np.ndarray:
        return np.array([k for k in range(self.n) if k != self.ref], dtype=np.int64)

    # -- parameter arrays -----------------------------------------------
    @cached_property
    def line_i(self) -> np.ndarray:
        return np.array([ln.i for ln in self.lines], dtype=np.int64)

    @cached_property
    def line_j(self) -> np.ndarray:
        return np.array([ln.j for ln in self.lines], dtype=np.int64)

    @cached_property
    def line_B(self) -> np.ndarray:
        return np.array([ln.B for ln in self.lines], dtype=float)

    @cached_property
    def shunt(self) -> np.ndarray:
        return np.array([b.shunt for b in self.buses], dtype=float)

    @cached_property
    def B_self(self) -> np.ndarray:
        """B_ii = sum of incident line susceptances + shunt."""
        Bii = self.shunt.copy()
        np.add.at(Bii, self.line_i, self.line_B)
        np.add.at(Bii, self.line_j, self.line_B)
        return Bii

    @cached_property
    def B_matrix(self) -> np.ndarray:
        """Symmetric matrix of line susceptances, zero diagonal."""
        B = np.zeros((self.n, self.n))
        B[self.line_i, self.line_j] = self.line_B
        B[self.line_j, self.line_i] = self.line_B
        return B

    @cached_property
    def A(self) -> np.ndarray:
        return np.array([b.A for b in self.buses], dtype=float)

    @property
    def A_g(self) -> np.ndarray:
        return self.A[self.gen_idx]

    @property
    def A_l(self) -> np.ndarray:
        return self.A[self.load_idx]

    def _gen_array(self, name: str) -> np.ndarray:
        return np.array([getattr(self.buses[k], name) for k in self.gen_idx], dtype=float)

    @cached_property
    def M(self) -> np.ndarray:
        return self._gen_array("M")

    @cached_property
    def Ef(self) -> np.ndarray:
        return self._gen_array("Ef")

    @cached_property
    def T(self) -> np.ndarray:
        return self._gen_array("T")

    @cached_property
    def xd_diff(self) -> np.ndarray:
        """X_d - X'_d per generator."""
        return self._gen_array("Xd") - self._gen_array("Xdp")

    @cached_property
    def R_g(self) -> np.ndarray:
        """Diagonal of R_g = diag((X_d - X'_d)/T)."""
        return self.xd_diff / self.T

    @cached_property
    def Qbar(self) -> np.ndarray:
        return np.array([self.buses[k].Qbar for k in self.load_idx], dtype=float)

    @cached_property
    def D_hat(self) -> np.ndarray:
        return physical_incidence(self.lines, self.n, self.ref)

    @property
    def D_c(self) -> np.ndarray:
        return self.comm.D

    @cached_property
    def tau_vector(self) -> np.ndarray:
        """Diagonal of tau_c, ordered as (P_g, P_l, v, lambda_g, lambda_l)."""
        t = self.tau
        return np.concatenate([
            np.full(self.n_g, t.g), np.full(self.n_l, t.l), np.full(self.m_c, t.v),
            np.full(self.n_g, t.lg), np.full(self.n_l, t.ll),
        ])

    def bus_label(self, k: int) -> str:
        return str(self.buses[k].id)

    def with_solver(self, **changes) -> "NetworkConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, solver=replace(self.solver, **changes))

    def with_initial(self, initial: InitialSpec) -> "NetworkConfig":
        return replace(self, initial=initial)


def _finite(who: str, **values) -> None:
    for name, val in values.items():
        if not isinstance(val, (int, float)) or isinstance(val, bool) or not math.isfinite(val):
            raise ValidationError(f"{name} must be a finite number, got {val!r}", who)


def _connected(n: int, edges: Sequence[tuple[int, int]]) -> bool:
    if n == 0:
        return False
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = {0}
    queue = deque([0])
    while queue:
        k = queue.popleft()
        for nb in adj[k]:
            if nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return len(seen) == n


def physical_incidence(lines: Sequence[LineParams], n: int, reference_bus: int = -1) -> np.ndarray:
    """Reduced map D_hat (n x n-1) with D_hat^T = [I, -1] up to bus permutation.

    ``reference_bus`` is an internal index; -1 selects the last bus. The
    reference row carries -1 in every column, so phi_k = delta_k - delta_ref.
    """
    if reference_bus < 0:
        reference_bus += n
    if not 0 <= reference_bus < n:
        raise ValidationError(f"reference bus index {reference_bus} out of range")
    if not _connected(n, [(ln.i, ln.j) for ln in lines]):
        raise DisconnectedGraph("physical line graph is not connected", "lines")
    D = np.zeros((n, n - 1))
    col = 0
    for k in range(n):
        if k == reference_bus:
            continue
        D[k, col] = 1.0
        col += 1
    D[reference_bus, :] = -1.0
    return D


def comm_incidence(comm_edges: Sequence[tuple[int, int]], n: int) -> CommGraph:
    """Oriented incidence matrix of the communication graph (+1 at tail, -1 at head)."""
    edges = tuple((int(i), int(j)) for i, j in comm_edges)
    seen = set()
    for i, j in edges:
        if i == j:
            raise ValidationError(f"self-loop on bus index {i}", "comm_edges")
        if not (0 <= i < n and 0 <= j < n):
            raise ValidationError(f"edge ({i}, {j}) references an unknown bus", "comm_edges")
        key = frozenset((i, j))
        if key in seen:
            raise ValidationError(f"duplicate edge ({i}, {j})", "comm_edges")
        seen.add(key)
    if not _connected(n, edges):
        raise DisconnectedGraph("communication graph is not connected", "comm_edges")
    D = np.zeros((n, len(edges)))
    for e, (i, j) in enumerate(edges):
        D[i, e] = 1.0
        D[j, e] = -1.0
    return CommGraph(edges=edges, D=D, is_tree=len(edges) == n - 1)


# ---------------------------------------------------------------------------
# document parsing

def load_config(text: str) -> NetworkConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"malformed config document: {exc}") from exc
    return config_from_dict(doc)


def load_config_file(path: str | Path) -> NetworkConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigParseError(f"cannot read {path}: {exc}") from exc
    return load_config(text)


def _num(obj: dict, key: str, who: str, default: Any = None, required: bool = True):
    if key not in obj:
        if required and default is None:
            raise ValidationError(f"missing field {key!r}", who)
        return default
    val = obj[key]
    _finite(who, **{key: val})
    return float(val)


def _per_bus(value, id_to_idx: dict[int, int], who: str) -> dict[int, float] | None:
    if value is None:
        return None
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            bid = int(k)
            if bid not in id_to_idx:
                raise ValidationError(f"unknown bus id {bid}", who)
            _finite(who, value=v)
            out[bid] = float(v)
        return out
    raise ValidationError("expected a mapping from bus id to value", who)


def _parse_initial(doc: dict | None, id_to_idx: dict[int, int], m_c: int) -> InitialSpec:
    if not doc:
        return InitialSpec()
    if not isinstance(doc, dict):
        raise ValidationError("initial must be an object", "initial")

    def scalar_or_bus(key):
        val = doc.get(key, 0.0)
        if isinstance(val, dict):
            return _per_bus(val, id_to_idx, f"initial.{key}")
        _finite(f"initial.{key}", **{key: val})
        return float(val)

    v = doc.get("v")
    if v is not None:
        if len(v) != m_c:
            raise ValidationError(f"v must have {m_c} entries", "initial.v")
        for x in v:
            _finite("initial.v", v=x)
        v = tuple(float(x) for x in v)
    return InitialSpec(
        from_equilibrium=bool(doc.get("from_equilibrium", True)),
        omega=scalar_or_bus("omega"),
        price=scalar_or_bus("price"),
        delta=_per_bus(doc.get("delta"), id_to_idx, "initial.delta"),
        E=_per_bus(doc.get("E"), id_to_idx, "initial.E"),
        P=_per_bus(doc.get("P"), id_to_idx, "initial.P"),
        v=v,
        lam=_per_bus(doc.get("lambda"), id_to_idx, "initial.lambda"),
    )


def config_from_dict(doc: dict) -> NetworkConfig:
    if not isinstance(doc, dict):
        raise ConfigParseError("config document must be a JSON object")
    raw_buses = doc.get("buses")
    if not raw_buses:
        raise ValidationError("at least one bus is required", "buses")

    buses = []
    for rb in raw_buses:
        if not isinstance(rb, dict) or "id" not in rb:
            raise ValidationError("every bus needs an id", "buses")
        bid = rb["id"]
        if not isinstance(bid, int) or isinstance(bid, bool):
            raise ValidationError(f"bus id must be an integer, got {bid!r}", "buses")
        who = f"bus {bid}"
        kind = rb.get("kind")
        gen = kind == GENERATOR
        bus = BusParams(
            id=bid,
            kind=kind,
            A=_num(rb, "A", who),
            shunt=_num(rb, "shunt", who, default=0.0),
            M=_num(rb, "M", who) if gen else None,
            Xd=_num(rb, "Xd", who) if gen else None,
            Xdp=_num(rb, "Xdp", who) if gen else None,
            T=_num(rb, "T", who) if gen else None,
            Ef=_num(rb, "Ef", who) if gen else None,
            Qbar=_num(rb, "Qbar", who, default=0.0) if kind == LOAD else None,
        )
        bus.validate()
        buses.append(bus)

    buses.sort(key=lambda b: b.id)
    ids = [b.id for b in buses]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate bus ids", "buses")
    id_to_idx = {bid: k for k, bid in enumerate(ids)}
    n = len(buses)
    if not any(b.is_generator for b in buses):
        raise ValidationError("at least one generator bus is required", "buses")
    if all(b.is_generator for b in buses):
        raise ValidationError("at least one load bus is required", "buses")

    lines = []
    pairs = set()
    for rl in doc.get("lines", []):
        who = f"line {rl.get('from')}-{rl.get('to')}"
        try:
            i, j = id_to_idx[rl["from"]], id_to_idx[rl["to"]]
        except KeyError:
            raise ValidationError("line references an unknown bus", who) from None
        if i == j:
            raise ValidationError("line endpoints must be distinct", who)
        key = frozenset((i, j))
        if key in pairs:
            raise ValidationError("at most one line per bus pair", who)
        pairs.add(key)
        B = _num(rl, "B", who)
        if not B > 0:
            raise ValidationError("line susceptance must be positive (B > 0)", who)
        lines.append(LineParams(i, j, B))
    if n > 1 and not _connected(n, [(ln.i, ln.j) for ln in lines]):
        raise DisconnectedGraph("physical line graph is not connected", "lines")

    comm_raw = doc.get("comm_edges", [])
    try:
        comm_edges = [(id_to_idx[e[0]], id_to_idx[e[1]]) for e in comm_raw]
    except (KeyError, IndexError, TypeError):
        raise ValidationError("comm edge references an unknown bus", "comm_edges") from None
    comm = comm_incidence(comm_edges, n)

    welfare_doc = doc.get("welfare") or {}
    costs = {}
    for entry in welfare_doc.get("cost", []):
        bid = entry.get("bus")
        who = f"cost at bus {bid}"
        if bid not in id_to_idx or not buses[id_to_idx[bid]].is_generator:
            raise ValidationError("cost must be attached to a generator bus", who)
        q, c = _num(entry, "q", who), _num(entry, "c", who, default=0.0)
        if not q > 0:
            raise ValidationError("cost curvature must be positive (q > 0)", who)
        costs[bid] = (q, c)
    utils = {}
    for entry in welfare_doc.get("utility", []):
        bid = entry.get("bus")
        who = f"utility at bus {bid}"
        if bid not in id_to_idx or buses[id_to_idx[bid]].is_generator:
            raise ValidationError("utility must be attached to a load bus", who)
        a, b = _num(entry, "a", who, default=0.0), _num(entry, "b", who)
        if not b > 0:
            raise ValidationError("utility curvature must be positive (b > 0)", who)
        utils[bid] = (a, b)
    gen_ids = [b.id for b in buses if b.is_generator]
    load_ids = [b.id for b in buses if not b.is_generator]
    for bid in gen_ids:
        if bid not in costs:
            raise ValidationError("generator has no cost function", f"bus {bid}")
    for bid in load_ids:
        if bid not in utils:
            raise ValidationError("load has no utility function", f"bus {bid}")
    welfare = QuadraticWelfare(
        q=np.array([costs[b][0] for b in gen_ids]),
        c=np.array([costs[b][1] for b in gen_ids]),
        a=np.array([utils[b][0] for b in load_ids]),
        b=np.array([utils[b][1] for b in load_ids]),
    )

    tau_doc = doc.get("tau") or {}
    tau = Gains(**{k: _num(tau_doc, k, "tau", default=1.0) for k in ("g", "l", "v", "lg", "ll")})
    for k in ("g", "l", "v", "lg", "ll"):
        if not getattr(tau, k) > 0:
            raise ValidationError(f"time constant tau_{k} must be positive", "tau")

    s = doc.get("solver") or {}
    defaults = SolverSettings()
    solver = SolverSettings(
        dt=_num(s, "dt", "solver", default=defaults.dt),
        t_end=_num(s, "t_end", "solver", default=defaults.t_end),
        newton_tol=_num(s, "newton_tol", "solver", default=defaults.newton_tol),
        newton_max_iter=int(_num(s, "newton_max_iter", "solver", default=defaults.newton_max_iter)),
        cond_limit=_num(s, "cond_limit", "solver", default=defaults.cond_limit),
    )
    for name in ("dt", "newton_tol", "cond_limit"):
        if not getattr(solver, name) > 0:
            raise ValidationError(f"{name} must be positive", "solver")
    if solver.t_end < 0:
        raise ValidationError("t_end must be nonnegative", "solver")
    if solver.newton_max_iter < 1:
        raise ValidationError("newton_max_iter must be at least 1", "solver")

    ref_id = doc.get("reference_bus", ids[-1])
    if ref_id not in id_to_idx:
        raise ValidationError(f"unknown reference bus {ref_id}", "reference_bus")

    return NetworkConfig(
        buses=tuple(buses),
        lines=tuple(lines),
        comm=comm,
        welfare=welfare,
        tau=tau,
        solver=solver,
        initial=_parse_initial(doc.get("initial"), id_to_idx, comm.m),
        reference=id_to_idx[ref_id],
        source=doc,
    )
