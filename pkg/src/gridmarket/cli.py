"""Command-line scenario runner: validate, equilibrium, kkt, check-hessian, simulate."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .analysis import EquilibriumReport, find_equilibrium
from .dae import Trajectory, initial_state, simulate
from .errors import EquilibriumError, GridMarketError
from .market import ControllerState, kkt_oracle, social_welfare
from .network import NetworkConfig, load_config_file
from .state import Layout, model_for

log = logging.getLogger("gridmarket")

FREQ_TOL = 1e-4
DISPATCH_TOL = 1e-4
PRICE_SPREAD_TOL = 1e-5
WELFARE_TOL = 1e-4


@dataclass
class RunSummary:
    config: str
    t_end: float
    dt: float
    steps: int
    converged_frequency: bool
    converged_prices: bool
    converged_welfare: bool
    final_frequency_norm: float
    final_dispatch_error: float
    final_price_spread: float
    final_welfare_gap: float
    final_shifted_energy: float
    max_energy_increase: float
    max_constraint_residual: float
    wall_clock_s: float
    tolerances: dict = field(default_factory=lambda: {
        "frequency": FREQ_TOL,
        "dispatch": DISPATCH_TOL,
        "price_spread": PRICE_SPREAD_TOL,
        "welfare": WELFARE_TOL,
    })
    files: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.converged_frequency and self.converged_prices and self.converged_welfare


def csv_header(net: NetworkConfig) -> list[str]:
    """Column names of timeseries.csv, in order."""
    ids = [int(b) for b in net.bus_ids]
    cols = ["t"]
    cols += [f"omega_{i}" for i in ids]
    cols += [f"E_{i}" for i in ids]
    cols += [f"Pg_{ids[k]}" for k in net.gen_idx]
    cols += [f"Pl_{ids[k]}" for k in net.load_idx]
    cols += [f"lambda_{i}" for i in ids]
    cols += [f"v_{ids[a]}_{ids[b]}" for a, b in net.comm.edges]
    cols += ["H", "Hdot", "residual"]
    return cols


def trajectory_rows(net: NetworkConfig, tr: Trajectory):
    lay = Layout(net)
    m = model_for(net)
    for k, (t, x) in enumerate(zip(tr.times, tr.states)):
        step = k * tr.stride
        _, omega_l = K.vector_field(m, x, x[lay.E_l].copy())
        w = np.empty(net.n)
        w[net.gen_idx] = x[lay.p_g] / net.M
        w[net.load_idx] = omega_l
        E = np.empty(net.n)
        E[net.gen_idx] = x[lay.E_g]
        E[net.load_idx] = x[lay.E_l]
        z = ControllerState.from_energy(net, x[lay.x_c])
        row = [t, *w, *E, *z.P_g, *z.P_l, *z.prices(net), *z.v]
        row += [tr.H[step], tr.Hdot[step], tr.residual[step]]
        yield row


def write_timeseries(path: Path, net: NetworkConfig, tr: Trajectory) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header(net))
        for row in trajectory_rows(net, tr):
            w.writerow([repr(float(v)) for v in row])


def summarize(net: NetworkConfig, tr: Trajectory, config: str, wall: float) -> RunSummary:
    lay = Layout(net)
    x = tr.final
    _, omega_l = K.vector_field(model_for(net), x, x[lay.E_l].copy())
    omega = np.concatenate([x[lay.p_g] / net.M, omega_l])
    z = ControllerState.from_energy(net, x[lay.x_c])
    opt = kkt_oracle(net)
    zs = opt.state
    dispatch = np.concatenate([z.P_g - zs.P_g, z.P_l - zs.P_l, z.prices(net) - opt.price])
    prices = z.prices(net)
    gap = abs(social_welfare(z.P_g, z.P_l, net.welfare) - social_welfare(zs.P_g, zs.P_l, net.welfare))
    f_norm = float(np.max(np.abs(omega)))
    d_norm = float(np.max(np.abs(dispatch)))
    spread = float(prices.max() - prices.min())
    return RunSummary(
        config=config,
        t_end=float(tr.step_times[-1]),
        dt=tr.dt,
        steps=len(tr.step_times) - 1,
        converged_frequency=f_norm < FREQ_TOL,
        converged_prices=d_norm < DISPATCH_TOL and spread < PRICE_SPREAD_TOL,
        converged_welfare=gap < WELFARE_TOL,
        final_frequency_norm=f_norm,
        final_dispatch_error=d_norm,
        final_price_spread=spread,
        final_welfare_gap=float(gap),
        final_shifted_energy=float(tr.H[-1]),
        max_energy_increase=float(np.max(np.diff(tr.H), initial=0.0)),
        max_constraint_residual=float(np.max(tr.residual)),
        wall_clock_s=wall,
    )


# ---------------------------------------------------------------------------
# commands

def _emit(doc, out_dir: Path | None, name: str) -> None:
    text = json.dumps(doc, indent=2, default=_jsonable)
    print(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serializable: {type(obj).__name__}")


def _load(args) -> NetworkConfig:
    net = load_config_file(args.config)
    changes = {}
    if args.t_end is not None:
        changes["t_end"] = args.t_end
    if args.dt is not None:
        changes["dt"] = args.dt
    return net.with_solver(**changes) if changes else net


def _out_dir(args) -> Path | None:
    return Path(args.output_dir) if args.output_dir else None


def cmd_validate(args) -> int:
    net = _load(args)
    print(f"valid: {net.n} buses ({net.n_g} generators, {net.n_l} loads), "
          f"{net.m} lines, {net.m_c} communication edges")
    return 0


def cmd_kkt(args) -> int:
    net = _load(args)
    sol = kkt_oracle(net)
    z = sol.state
    ids = [int(b) for b in net.bus_ids]
    doc = {
        "price": sol.price,
        "P_g": {ids[k]: float(p) for k, p in zip(net.gen_idx, z.P_g)},
        "P_l": {ids[k]: float(p) for k, p in zip(net.load_idx, z.P_l)},
        "v": [float(x) for x in z.v],
        "lambda": {ids[k]: float(lam) for k, lam in enumerate(z.prices(net))},
        "welfare": social_welfare(z.P_g, z.P_l, net.welfare),
        "residuals": sol.residual.norms(),
    }
    _emit(doc, _out_dir(args), "kkt.json")
    return 0


def cmd_equilibrium(args) -> int:
    net = _load(args)
    report = find_equilibrium(net, with_hessian=True, margin=args.margin)
    _emit(report.to_dict(net), _out_dir(args), "equilibrium.json")
    return 0 if report.status == "converged" else EquilibriumError.exit_code


def cmd_check_hessian(args) -> int:
    net = _load(args)
    report = find_equilibrium(net, with_hessian=False)
    if report.status != "converged":
        _emit(report.to_dict(net), _out_dir(args), "hessian.json")
        return EquilibriumError.exit_code
    from .analysis import hessian_condition, numeric_hessian_pd

    vals, verdicts = hessian_condition(net, report.state, margin=args.margin)
    ids = [int(b) for b in net.bus_ids]
    doc = {
        "margin": args.margin,
        "buses": {ids[k]: {"value": float(vals[k]), "holds": bool(verdicts[k])} for k in range(net.n)},
        "all_hold": bool(np.all(verdicts)),
        "min_eigenvalue": numeric_hessian_pd(net, report.state),
    }
    _emit(doc, _out_dir(args), "hessian.json")
    return 0 if doc["all_hold"] else 5


def cmd_simulate(args) -> int:
    net = _load(args)
    out = _out_dir(args) or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    report = find_equilibrium(net, with_hessian=True, margin=args.margin)
    x0 = initial_state(net, report.state, perturb=args.perturb, seed=args.seed)
    tr = simulate(net, x0, x_bar=report.state, stride=args.sample_every)
    wall = time.perf_counter() - start
    summary = summarize(net, tr, str(args.config), wall)
    ts_path, sum_path = out / "timeseries.csv", out / "summary.json"
    write_timeseries(ts_path, net, tr)
    summary.files = {"timeseries": str(ts_path), "summary": str(sum_path)}
    doc = {"run": asdict(summary), "converged": summary.converged, "equilibrium": report.to_dict(net)}
    sum_path.write_text(json.dumps(doc, indent=2, default=_jsonable) + "\n")
    verdict = "converged" if summary.converged else "criteria unmet"
    print(f"{args.config}: {verdict}; |omega|_inf = {summary.final_frequency_norm:.3e}, "
          f"dispatch error = {summary.final_dispatch_error:.3e}, wall {wall:.1f} s")
    return 0 if summary.converged else 5


COMMANDS = {
    "simulate": cmd_simulate,
    "equilibrium": cmd_equilibrium,
    "kkt": cmd_kkt,
    "check-hessian": cmd_check_hessian,
    "validate": cmd_validate,
}


def run_command(args) -> int:
    """Run one command, mapping library errors to exit codes."""
    try:
        return COMMANDS[args.command](args)
    except GridMarketError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        report = getattr(exc, "report", None)
        if isinstance(report, EquilibriumReport):
            try:
                net = _load(args)
                _emit(report.to_dict(net), _out_dir(args), "equilibrium.json")
            except GridMarketError:
                pass
        return exc.exit_code


def _run_one(args, config: Path) -> tuple[str, int]:
    one = argparse.Namespace(**vars(args))
    one.config = str(config)
    if args.output_dir:
        one.output_dir = str(Path(args.output_dir) / config.stem)
    else:
        one.output_dir = str(config.stem) if args.command == "simulate" else None
    return str(config), run_command(one)


def run_batch(args) -> int:
    configs = sorted(Path(args.scenario_dir).glob("*.json"))
    if not configs:
        print(f"no *.json configs in {args.scenario_dir}", file=sys.stderr)
        return 2
    with ProcessPoolExecutor(max_workers=args.workers) as pool:
        results = list(pool.map(_run_one, [args] * len(configs), configs))
    for name, code in results:
        print(f"{name}: exit {code}")
    return max(code for _, code in results)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridmarket", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--config", help="network configuration (JSON)")
        src.add_argument("--scenario-dir", help="run every *.json in this directory")
        p.add_argument("--t-end", type=float, help="override the simulated horizon [s]")
        p.add_argument("--dt", type=float, help="override the step size [s]")
        p.add_argument("--output-dir", help="directory for reports and time series")
        p.add_argument("--perturb", type=float, default=0.0,
                       help="half-width of a uniform random perturbation of the initial state")
        p.add_argument("--seed", type=int, default=None, help="seed for --perturb")
        p.add_argument("--margin", type=float, default=0.0, help="required slack in the Hessian conditions")
        p.add_argument("--sample-every", type=int, default=100, help="write every N-th step to the CSV")
        p.add_argument("--workers", type=int, default=None, help="processes for --scenario-dir")
    return parser


def main(argv=None) -> int:
    level = getattr(logging, os.environ.get("GRIDMARKET_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.scenario_dir:
        return run_batch(args)
    return run_command(args)


if __name__ == "__main__":
    sys.exit(main())
