"""Command-line front end.

Exit codes: 0 success, 1 numerical failure, 2 bad input or usage.
Defaults for the common numeric settings can be overridden through
``LYAPGRID_H``, ``LYAPGRID_T_END``, ``LYAPGRID_BETA``, ``LYAPGRID_RIDGE``,
``LYAPGRID_NR_TOL`` and ``LYAPGRID_WORKERS``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .allocate import (DEFAULT_RIDGE, ExperimentConfig, allocate_with_failures, run_equilibrium,
                       run_experiment,
                       sweep_nodes, verify_theorem1)
from .errors import InputError, NumericalError
from .integrator import SimConfig
from .lyapunov import (flow_from_qr, is_stable, max_le, node_exponents, qr_accumulate,
                       stability_ranking)
from .netmodel import BusKind, bundled_case, load_case
from .powerflow import solve_powerflow

REPORT_SCHEMA = "lyapgrid.report/1"
SUM_IDENTITY_SAME_TOL = 1e-8
SUM_IDENTITY_CROSS_TOL = 1e-3


def _env(name, cast, default):
    raw = os.environ.get(name)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise InputError(f"environment variable {name}={raw!r} is not a valid {cast.__name__}")


def _s_arg(text):
    if text == "all":
        return text
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer or 'all'") from None
    if value < 0:
        raise argparse.ArgumentTypeError("s must be non-negative")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", required=True,
                        help="MATPOWER .m or network .json file, or a bundled name (case9, case39)")
    common.add_argument("--gen-params", help="generator parameter sidecar JSON")
    common.add_argument("--out", help="output file (stdout when omitted)")
    common.add_argument("--literal-qbalance", action="store_true",
                        help="reactive balance with G cos - B sin")
    common.add_argument("--literal-governor", action="store_true",
                        help="turbine equation with +T_N feedback")
    common.add_argument("--seed", type=int, default=0, help="recorded for reproducibility")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--h", type=float, default=_env("LYAPGRID_H", float, 0.1))
    sim.add_argument("--t", dest="t_end", type=float, default=_env("LYAPGRID_T_END", float, 30.0))
    sim.add_argument("--nr-tol", type=float, default=_env("LYAPGRID_NR_TOL", float, 1e-10))
    sim.add_argument("--nr-max-iter", type=int, default=25)
    sim.add_argument("--rer-base", type=float, default=0.5,
                     help="pre-disturbance renewable injection (pu) where a bus declares none")
    sim.add_argument("--beta", type=float, default=_env("LYAPGRID_BETA", float, 2.0),
                     help="renewable perturbation in percent")

    parser = argparse.ArgumentParser(prog="lyapgrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("powerflow", parents=[common], help="solve the AC power flow")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=20)

    p = sub.add_parser("simulate", parents=[common, sim], help="simulate and write a state CSV")
    p.add_argument("--perturb-node", type=int)
    p.add_argument("--plot", help="frequency plot (SVG)")

    p = sub.add_parser("lyapunov", parents=[common, sim], help="Lyapunov spectrum of one run")
    p.add_argument("--perturb-node", type=int)
    p.add_argument("--plot", help="spectrum plot (SVG)")

    workers = _env("LYAPGRID_WORKERS", int, 1)
    p = sub.add_parser("rank", parents=[common, sim], help="per-bus stability ranking")
    p.add_argument("--workers", type=int, default=workers)
    p.add_argument("--plot", help="ranking bar chart (SVG)")

    p = sub.add_parser("allocate", parents=[common, sim], help="greedy renewable allocation")
    p.add_argument("--s", type=_s_arg, default="all")
    p.add_argument("--workers", type=int, default=workers)
    p.add_argument("--ridge", type=float, default=_env("LYAPGRID_RIDGE", float, DEFAULT_RIDGE))

    p = sub.add_parser("validate", parents=[common, sim],
                       help="check the exponent-sum / log-det identity")
    p.add_argument("--perturb-node", type=int)
    return parser


# --------------------------------------------------------------------------

def _load(args):
    path = Path(args.case)
    if not path.exists() and not path.suffix:
        path = bundled_case(args.case)
    return load_case(path, args.gen_params)


def _experiment_config(args) -> ExperimentConfig:
    try:
        sim = SimConfig(h=args.h, t_end=args.t_end, nr_tol=args.nr_tol,
                        nr_max_iter=args.nr_max_iter)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return ExperimentConfig(sim=sim, rer_base_p=args.rer_base,
                            literal_qbalance=args.literal_qbalance,
                            literal_governor=args.literal_governor)


def _default_node(net, node):
    if node is not None:
        net.index_of(node)
        return node
    loads = [b.id for b in net.buses if b.kind is BusKind.LOAD]
    return min(loads) if loads else min(net.bus_ids)


def _config_record(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _emit(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _emit_json(payload: dict, args):
    payload = {"schema_version": REPORT_SCHEMA, "config": _config_record(args), **payload}
    _emit(json.dumps(payload, sort_keys=True, indent=2, allow_nan=True) + "\n", args.out)


def _float_list(a):
    return [float(x) for x in np.asarray(a).ravel()]


# --------------------------------------------------------------------------

def cmd_powerflow(args):
    net = _load(args)
    ss = solve_powerflow(net, tol=args.tol, max_iter=args.max_iter,
                         literal_q=args.literal_qbalance)
    ids = [str(b) for b in net.bus_ids]
    _emit_json({"v": dict(zip(ids, _float_list(ss.v))),
                "theta": dict(zip(ids, _float_list(ss.theta))),
                "p_gen": {str(g.bus): float(p) for g, p in zip(net.generators, ss.p_gen)},
                "q_gen": {str(g.bus): float(q) for g, q in zip(net.generators, ss.q_gen)},
                "iterations": ss.iterations, "mismatch": ss.mismatch}, args)
    return 0


def _run_single(args, net, variational):
    """Perturbed run at the requested (or first load) bus.

    ``simulate`` without ``--perturb-node`` runs the undisturbed case instead.
    """
    cfg = _experiment_config(args)
    if args.command == "simulate" and args.perturb_node is None:
        exp, traj = run_equilibrium(net, cfg, variational=variational)
        return exp, traj, None, 0.0
    node = _default_node(net, args.perturb_node)
    exp, traj = run_experiment(net, node, args.beta, cfg, variational=variational)
    return exp, traj, node, args.beta


def cmd_simulate(args):
    net = _load(args)
    exp, traj, _, _ = _run_single(args, net, variational=False)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["time"] + exp.model.layout.labels())
    for t, x in zip(traj.times, traj.states):
        writer.writerow([repr(float(t))] + [repr(float(v)) for v in x])
    _emit(buf.getvalue(), args.out)
    if args.plot:
        from .plots import plot_frequencies
        plot_frequencies(traj.times, traj.states[:, exp.model.layout.block("omega")],
                         exp.model.layout.gen_buses, args.plot, exp.model.omega0)
    return 0


def cmd_lyapunov(args):
    net = _load(args)
    exp, traj, node, beta = _run_single(args, net, variational=True)
    layout = exp.model.layout
    spec = qr_accumulate(traj)
    tangent = qr_accumulate(traj, q0=exp.model.constraint_tangent_basis(traj.states[0]))
    lambdas = node_exponents(flow_from_qr(traj), layout)
    ranking = stability_ranking(lambdas)
    labels = layout.labels()
    _emit_json({
        "perturb_node": node, "beta": beta, "horizon": spec.horizon,
        "exponents": _float_list(spec.exponents),
        "directions": [labels[i] for i in spec.directions],
        "sum": spec.total, "mle": max_le(spec), "stable": is_stable(spec),
        "constraint_tangent": {"exponents": _float_list(tangent.exponents),
                               "mle": max_le(tangent), "stable": is_stable(tangent)},
        "buses": [{"bus": e.bus, "lambda": e.exponent, "S": e.index} for e in ranking.entries],
    }, args)
    if args.plot:
        from .plots import plot_spectrum
        plot_spectrum(spec.exponents, args.plot)
    return 0


def _sweep(args, net):
    cfg = _experiment_config(args)
    if args.workers < 1:
        raise InputError("workers must be at least 1")
    return sweep_nodes(net, args.beta, cfg, workers=args.workers), cfg


def cmd_rank(args):
    net = _load(args)
    results, _ = _sweep(args, net)
    ok = {r.node: r.exponent for r in results if not r.failed}
    ranking = stability_ranking(ok)
    failed = sorted(r.node for r in results if r.failed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bus", "kind", "lambda", "S", "status"])
    kinds = {b.id: b.kind.value for b in net.buses}
    for e in ranking.entries:
        writer.writerow([e.bus, kinds[e.bus], repr(e.exponent), e.index, "ok"])
    # failed runs count as least stable and close the ranking
    for i, bus in enumerate(failed, start=len(ranking.entries) + 1):
        writer.writerow([bus, kinds[bus], "nan", i, "failed"])
    _emit(buf.getvalue(), args.out)
    if args.plot:
        from .plots import plot_ranking
        plot_ranking(ranking.order, [e.exponent for e in ranking.entries], args.plot)
    return 0


def cmd_allocate(args):
    net = _load(args)
    results, cfg = _sweep(args, net)
    s = len(results) if args.s == "all" else args.s
    res = allocate_with_failures(results, s, ridge=args.ridge, horizon=cfg.sim.n_states)
    _emit_json({
        "ordered_nodes": res.ordered_nodes,
        "marginal_gains": res.marginal_gains,
        "objective_trace": res.objective_trace,
        "failed_nodes": res.failed_nodes,
        "failures": {str(r.node): r.error for r in results if r.failed},
        "most_stable": res.ordered_nodes[-1] if res.ordered_nodes else None,
    }, args)
    return 0


def cmd_validate(args):
    net = _load(args)
    exp, traj, node, beta = _run_single(args, net, variational=True)
    chk = verify_theorem1(traj)
    ok = (chk.rel_error <= SUM_IDENTITY_SAME_TOL and chk.same_tensor_rel_error <= SUM_IDENTITY_SAME_TOL
          and chk.cross_path_rel_error <= SUM_IDENTITY_CROSS_TOL)
    verdict = "PASS" if ok else "FAIL"
    lines = [
        f"case={args.case} node={node} beta={beta} steps={chk.steps}",
        f"lhs  log det (eigenvalues)      = {chk.lhs:.12g}",
        f"rhs  2(N-1) * sum(lambda)       = {chk.rhs:.12g}",
        f"relative error                  = {chk.rel_error:.3e}",
        f"log det (LU) / 2(N-1)           = {chk.logdet_direct / (2 * chk.steps):.12g}",
        f"sum lambda, QR-factor tensor    = {chk.sum_qr:.12g}",
        f"sum lambda, raw-product tensor  = {chk.sum_eigen:.12g}",
        f"cross-path relative error       = {chk.cross_path_rel_error:.3e}",
        f"sum of discrete-QR spectrum     = {chk.sum_spectrum:.12g}",
        verdict,
    ]
    _emit("\n".join(lines) + "\n", args.out)
    return 0 if ok else 1


COMMANDS = {"powerflow": cmd_powerflow, "simulate": cmd_simulate, "lyapunov": cmd_lyapunov,
            "rank": cmd_rank, "allocate": cmd_allocate, "validate": cmd_validate}


def run(argv=None) -> int:
    try:
        parser = build_parser()
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
