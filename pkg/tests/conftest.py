from __future__ import annotations

import copy

import numpy as np
import pytest

from gridmarket import scenarios
from gridmarket.dae import consistent_state
from gridmarket.network import config_from_dict
from gridmarket.state import Layout

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def gen_bus(bid, M=4.0, A=2.0, Xd=0.7, Xdp=0.3, T=6.0, Ef=1.0, shunt=0.0):
    return {"id": bid, "kind": "generator", "M": M, "A": A, "Xd": Xd, "Xdp": Xdp, "T": T, "Ef": Ef, "shunt": shunt}


def load_bus(bid, A=1.5, Qbar=0.0, shunt=0.0):
    return {"id": bid, "kind": "load", "A": A, "Qbar": Qbar, "shunt": shunt}


def two_bus_doc(B=5.0, Qbar=0.0, Ef=1.0, shunt_g=0.0, shunt_l=0.0, q=1.0, c=0.0, a=1.0, b=1.0):
    return {
        "buses": [gen_bus(1, Ef=Ef, shunt=shunt_g), load_bus(2, Qbar=Qbar, shunt=shunt_l)],
        "lines": [{"from": 1, "to": 2, "B": B}],
        "comm_edges": [[1, 2]],
        "welfare": {"cost": [{"bus": 1, "q": q, "c": c}], "utility": [{"bus": 2, "a": a, "b": b}]},
    }


def two_bus(**kw):
    return config_from_dict(two_bus_doc(**kw))


def random_doc(rng: np.random.Generator, n: int | None = None, loading: float = 0.3) -> dict:
    """Connected random network with at least one generator and one load."""
    n = int(rng.integers(2, 11)) if n is None else n
    n_g = int(rng.integers(1, n))
    kinds = ["generator"] * n_g + ["load"] * (n - n_g)
    rng.shuffle(kinds)
    buses = []
    for k, kind in enumerate(kinds, start=1):
        if kind == "generator":
            Xdp = rng.uniform(0.2, 0.4)
            buses.append(gen_bus(k, M=rng.uniform(2, 10), A=rng.uniform(0.5, 3), Xd=Xdp + rng.uniform(0.3, 0.8),
                                 Xdp=Xdp, T=rng.uniform(3, 8), Ef=rng.uniform(1.0, 1.5),
                                 shunt=rng.uniform(0, 0.5)))
        else:
            buses.append(load_bus(k, A=rng.uniform(0.5, 3), Qbar=rng.uniform(0, 0.2), shunt=rng.uniform(0.2, 1.2)))
    order = rng.permutation(n) + 1
    pairs = {tuple(sorted((int(order[k]), int(order[rng.integers(0, k)])))) for k in range(1, n)}
    for _ in range(int(rng.integers(0, n))):
        i, j = rng.choice(n, 2, replace=False) + 1
        pairs.add(tuple(sorted((int(i), int(j)))))
    lines = [{"from": i, "to": j, "B": float(rng.uniform(3, 8))} for i, j in sorted(pairs)]
    comm_order = rng.permutation(n) + 1
    comm = [[int(comm_order[k]), int(comm_order[rng.integers(0, k)])] for k in range(1, n)]
    gens = [b["id"] for b in buses if b["kind"] == "generator"]
    loads = [b["id"] for b in buses if b["kind"] == "load"]
    return {
        "buses": buses,
        "lines": lines,
        "comm_edges": comm,
        "welfare": {
            "cost": [{"bus": g, "q": rng.uniform(0.5, 3), "c": rng.uniform(0, loading)} for g in gens],
            "utility": [{"bus": b_, "a": rng.uniform(0, 2 * loading) + loading, "b": rng.uniform(0.5, 3)}
                        for b_ in loads],
        },
        "tau": {k: float(rng.uniform(0.5, 3)) for k in ("g", "l", "v", "lg", "ll")},
    }


def random_net(seed: int, **kw):
    return config_from_dict(random_doc(np.random.default_rng(seed), **kw))


def random_state(net, rng: np.random.Generator, consistent: bool = True, spread: float = 0.4) -> np.ndarray:
    """Flat closed-loop vector near a moderately loaded operating point."""
    lay = Layout(net)
    x = np.empty(lay.size)
    x[lay.x_c] = rng.uniform(-1, 1, lay.x_c.stop) * net.tau_vector
    x[lay.phi] = rng.uniform(-spread, spread, net.n - 1)
    x[lay.p_g] = rng.uniform(-0.5, 0.5, net.n_g) * net.M
    x[lay.E_g] = net.Ef * rng.uniform(0.9, 1.1, net.n_g)
    x[lay.E_l] = rng.uniform(0.9, 1.1, net.n_l)
    if consistent:
        x = consistent_state(net, x)
    return x


@pytest.fixture(scope="session")
def four_bus():
    return scenarios.load("four_bus")


@pytest.fixture(scope="session")
def four_bus_doc():
    import json

    return json.loads(scenarios.path("four_bus").read_text())


@pytest.fixture
def doc_copy(four_bus_doc):
    return copy.deepcopy(four_bus_doc)
