"""Command-line interface: ``rdoe <subcommand> ...``.

Exit codes: 0 success, 1 domain or usage error, 2 solver failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import oracle, robustness
from .exceptions import NetworkError, RDOEError, SolverFailure
from .ipm import SolverOptions
from .network import Network, bundled_networks, load_bundled, loads_document, parse_network, validate
from .nlp import Envelope, RDOEEngine
from .objectives import DEFAULT_ALPHA, DEFAULT_ETA, STRATEGIES, ObjectiveSpec
from .powerflow import InjectionVector
from .sensitivity import DEFAULT_DELTA_W, DEFAULT_EPS, filter_scenarios, write_beta_csv, write_matrix_csv

log = logging.getLogger("rdoe")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _g6(v: float) -> str:
    return f"{v:.6g}"


def load_network(ref: str) -> Network:
    """A document path, or the name of a bundled network."""
    path = Path(ref)
    if path.exists():
        return parse_network(path)
    if ref in bundled_networks():
        return load_bundled(ref)
    raise NetworkError(f"--network: no such file or bundled network '{ref}'")


def _base(net: Network, ref: str | None) -> InjectionVector | None:
    if ref in (None, "noload"):
        return None
    try:
        data = json.loads(Path(ref).read_text())
    except OSError as exc:
        raise RDOEError(f"--base: cannot read {ref}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise RDOEError(f"--base: {ref} is not JSON: {exc}") from exc
    try:
        return InjectionVector.from_dict(net, data)
    except ValueError as exc:
        raise RDOEError(f"--base: unknown customer in {ref}: {exc}") from exc


def _options(args) -> SolverOptions:
    return SolverOptions(tol=args.tol, max_iter=args.max_iter, mu0=args.mu0, verbose=args.verbose)


def _spec(args, strategy: str) -> ObjectiveSpec:
    return ObjectiveSpec(strategy, alpha=args.alpha, gamma=args.gamma, eta=args.eta)


def _engine(args, net: Network, optimize_q: bool) -> RDOEEngine:
    return RDOEEngine(net, optimize_q=optimize_q, options=_options(args), eps=args.eps, delta_w=args.delta_w,
                      base=_base(net, args.base), threads=args.threads)


def _write_json(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=1) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# -- subcommands -----------------------------------------------------------


def cmd_validate(args) -> int:
    path = Path(args.network)
    if path.exists():
        try:
            net = loads_document(path.read_text(), check=False)
        except OSError as exc:
            raise NetworkError(f"cannot read {path}: {exc.strerror}") from exc
    else:
        net = load_network(args.network)
    rep = validate(net)
    for w in rep.warnings:
        print(f"warning: {w}")
    for e in rep.errors:
        print(f"error: {e}")
    print(f"{net.name}: {'valid' if rep.ok else 'invalid'} ({len(rep.errors)} errors, {len(rep.warnings)} warnings)")
    return 0 if rep.ok else 1


def cmd_sensitivity(args) -> int:
    net = load_network(args.network)
    sens, H, hbar = filter_scenarios(net, eps=args.eps, delta_w=args.delta_w, base=_base(net, args.base),
                                     threads=args.threads)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_beta_csv(sens, out / "beta.csv")
    write_matrix_csv(H.customers, ["/".join(r) for r in H.rows], H.H, out / "H.csv")
    write_matrix_csv(hbar.customers, [f"s{m}" for m in range(hbar.count)], hbar.H, out / "Hbar.csv")
    print(f"customers={len(sens.customers)}, sign_rows={H.H.shape[0]}, scenarios={hbar.count}")
    return 0


def cmd_solve(args) -> int:
    net = load_network(args.network)
    eng = _engine(args, net, args.optimize_q)
    t0 = time.perf_counter()
    env = eng.solve(_spec(args, args.objective))
    seconds = time.perf_counter() - t0
    if args.no_timestamp:
        env.stats.pop("seconds", None)
    else:
        env.stats["seconds"] = seconds
    _write_json(env.to_dict(timestamp=not args.no_timestamp), args.out)
    if args.csv:
        env.write_csv(args.csv)
    line = f"aggregate_kw={_g6(env.aggregate_kw)}, iterations={env.stats['iterations']}"
    if not args.no_timestamp:
        line += f", seconds={_g6(seconds)}"
    print(line, file=sys.stderr if not args.out else sys.stdout)
    return 0


def cmd_solve_all(args) -> int:
    net = load_network(args.network)
    variants = [False, True] if args.include_q else [args.optimize_q]
    rows = []
    for optimize_q in variants:
        eng = _engine(args, net, optimize_q)
        for strategy in STRATEGIES:
            t0 = time.perf_counter()
            env = eng.solve(_spec(args, strategy))
            rows.append((strategy + ("*" if optimize_q else ""), env.aggregate_kw, time.perf_counter() - t0, env))
    name_w = max(len(r[0]) for r in rows)
    header = f"{'strategy':<{name_w}}  {'aggregate_kw':>12}"
    if not args.no_timestamp:
        header += f"  {'seconds':>10}"
    print(f"{net.name}: {len(net.doe_customers)} DOE customers")
    print(header)
    for name, agg, sec, _ in rows:
        line = f"{name:<{name_w}}  {_g6(agg):>12}"
        if not args.no_timestamp:
            line += f"  {_g6(sec):>10}"
        print(line)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, _, sec, env in rows:
            if args.no_timestamp:
                env.stats.pop("seconds", None)
            env.save(out / f"{name.replace('*', '_q')}.json", timestamp=not args.no_timestamp)
    return 0


def cmd_evaluate(args) -> int:
    net = load_network(args.network)
    env = Envelope.load(args.envelope)
    if tuple(env.customers) != tuple(c.id for c in net.doe_customers):
        raise RDOEError(f"--envelope: customers {list(env.customers)} do not match the network's DOE customers")
    samples = robustness.sample_utilisations(env, args.samples, args.seed, net=net, q_mode=args.q_mode)
    rep = robustness.evaluate(net, samples, tol=args.tol, threads=args.threads)
    if args.out:
        rep.save(args.out)
    if args.csv:
        rep.write_csv(args.csv)
    print(f"samples={rep.samples}, violations={rep.violations}, worst_overvoltage={_g6(rep.worst_overvoltage)}, "
          f"worst_undervoltage={_g6(rep.worst_undervoltage)}")
    return 0


def _envelope_for(net, path):
    if not path:
        return None
    env = Envelope.load(path)
    if tuple(env.customers) != tuple(c.id for c in net.doe_customers):
        raise RDOEError("--envelope: customers do not match the network's DOE customers")
    return env


def cmd_trace_fr(args) -> int:
    net = load_network(args.network)
    env = _envelope_for(net, args.envelope)
    q = env.q_kvar if env is not None else None
    tr = oracle.trace_feasible_region(net, tuple(args.customers), resolution=args.resolution, q_kvar=q)
    tr.write_csv(args.out)
    feasible = int(np.sum(tr.status == oracle.FEASIBLE))
    print(f"grid={tr.status.shape[0]}x{tr.status.shape[1]}, feasible={feasible}, "
          f"diverged={int(np.sum(tr.status == oracle.DIVERGED))}")
    if env is not None:
        idx = [env.customers.index(c) for c in args.customers]
        inside = tr.contains_rectangle(env.p_minus_kw[idx], env.p_plus_kw[idx])
        print(f"rectangle_inside={'yes' if inside else 'no'}")
    return 0


def cmd_oracle(args) -> int:
    if args.mode == "enumerate":
        for v in oracle.enumerate_vertices(args.k):
            print(" ".join(f"{s:+d}" for s in v))
        return 0
    net = load_network(args.network)
    if args.mode == "bisection":
        if not args.customer:
            raise RDOEError("--customer is required for bisection")
        lim = oracle.bisection_limit(net, args.customer, args.direction, tol=args.bisection_tol)
        print(f"{args.customer} {args.direction}_limit_kw={_g6(lim)}")
        return 0
    env = _envelope_for(net, args.envelope)
    if env is None:
        raise RDOEError("--envelope is required for extremes")
    ex = oracle.brute_force_extremes(net, env.p_minus_kw, env.p_plus_kw)
    rows = [{"bus": b, "phase": p, "u_min": float(lo), "u_max": float(hi), "argmin": list(amin), "argmax": list(amax)}
            for (b, p), lo, hi, amin, amax in zip(ex.labels, ex.u_min, ex.u_max, ex.argmin, ex.argmax)]
    _write_json({"format_version": 1, "kind": "vertex_extremes", "customers": list(env.customers), "nodes": rows},
                args.out)
    return 0


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rdoe", description="Robust dynamic operating envelopes for unbalanced LV feeders.")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def network(sp):
        sp.add_argument("--network", required=True, help="network document path or bundled network name")

    def common(sp):
        sp.add_argument("--threads", type=int, default=None, help="worker cap (default: machine parallelism)")
        sp.add_argument("--no-timestamp", action="store_true", help="omit timestamps and wall times")

    def filt(sp):
        sp.add_argument("--eps", type=float, default=DEFAULT_EPS, help="sensitivity threshold (p.u.)")
        sp.add_argument("--delta-w", type=float, default=DEFAULT_DELTA_W, help="perturbation per phase (kW)")
        sp.add_argument("--base", default="noload", help="'noload' or a JSON file of customer injections")

    def solver(sp):
        sp.add_argument("--optimize-q", action="store_true", help="optimise controllable reactive powers")
        sp.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
        sp.add_argument("--gamma", type=float, default=None)
        sp.add_argument("--eta", type=float, default=DEFAULT_ETA)
        sp.add_argument("--tol", type=float, default=1e-6, help="scaled KKT tolerance")
        sp.add_argument("--max-iter", type=int, default=300)
        sp.add_argument("--mu0", type=float, default=0.1, help="initial barrier parameter")

    sp = sub.add_parser("validate", help="check a network document")
    sp.add_argument("network", help="network document path or bundled network name")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("sensitivity", help="emit beta, H and Hbar as CSV")
    network(sp), filt(sp), common(sp)
    sp.add_argument("--out-dir", default=".", help="directory for beta.csv, H.csv, Hbar.csv")
    sp.set_defaults(func=cmd_sensitivity)

    sp = sub.add_parser("solve", help="compute an envelope")
    network(sp), filt(sp), solver(sp), common(sp)
    sp.add_argument("--objective", choices=STRATEGIES, default="ppn_fair")
    sp.add_argument("--out", help="envelope JSON (default: stdout)")
    sp.add_argument("--csv", help="also write the envelope as CSV")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("solve-all", help="all four objectives side by side")
    network(sp), filt(sp), solver(sp), common(sp)
    sp.add_argument("--include-q", action="store_true", help="add rows with reactive optimisation (marked *)")
    sp.add_argument("--out-dir", help="write one envelope JSON per row")
    sp.set_defaults(func=cmd_solve_all)

    sp = sub.add_parser("evaluate", help="Monte Carlo robustness check of an envelope")
    network(sp), common(sp)
    sp.add_argument("--envelope", required=True)
    sp.add_argument("--samples", type=int, default=30000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=robustness.DEFAULT_TOL, help="voltage tolerance (p.u.)")
    sp.add_argument("--q-mode", choices=("setpoint", "box"), default="setpoint")
    sp.add_argument("--out", help="report JSON")
    sp.add_argument("--csv", help="violation listing CSV")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("trace-fr", help="grid-trace a two-customer feasible region")
    network(sp), common(sp)
    sp.add_argument("--customers", nargs=2, required=True, metavar=("C1", "C2"))
    sp.add_argument("--resolution", type=float, default=0.1, help="grid step (kW)")
    sp.add_argument("--envelope", help="also check the envelope rectangle against the traced region")
    sp.add_argument("--out", required=True, help="CSV point cloud")
    sp.set_defaults(func=cmd_trace_fr)

    sp = sub.add_parser("oracle", help="brute-force references")
    sp.add_argument("mode", choices=("extremes", "bisection", "enumerate"))
    sp.add_argument("--network")
    sp.add_argument("--envelope")
    sp.add_argument("--customer")
    sp.add_argument("--direction", choices=("export", "import"), default="export")
    sp.add_argument("--bisection-tol", type=float, default=1e-3)
    sp.add_argument("--k", type=int, default=2, help="dimension for enumerate")
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(func=cmd_oracle)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "mode", None) in ("extremes", "bisection") and not args.network:
        print("rdoe: error: --network is required", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except SolverFailure as exc:
        print(f"rdoe: solver failure: {exc}", file=sys.stderr)
        return 2
    except (RDOEError, ValueError) as exc:
        print(f"rdoe: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
