"""Command-line interface.

Subcommands: gen-graph, simulate, fit, predict, fixed-point, compare,
validate, run.  Exit codes: 0 success, 1 usage/config error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import abm, metrics, mfd, recipe, rum, twostate
from .graph import DirectedGraph, GraphGenSpec, degree_distribution, generate

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _parse_probs(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _load_degree_dist(args):
    from .graph import JointDegreeDistribution

    if getattr(args, "degree_dist", None):
        return JointDegreeDistribution.load(args.degree_dist)
    return degree_distribution(DirectedGraph.load(args.graph))


def _cmd_gen_graph(args) -> int:
    spec = GraphGenSpec(model=args.model, node_count=args.n, gamma=args.gamma,
                        edge_clip=args.clip, er_p=args.p, tree_branching=args.branching,
                        seed=args.seed)
    g = generate(spec)
    g.save(args.out)
    print(f"wrote {args.out}: {g.node_count} nodes, {g.edge_count} edges")
    return 0


def _cmd_simulate(args) -> int:
    g = DirectedGraph.load(args.graph)
    kernel = rum.load_kernel(args.model)
    init = abm.InitSpec(args.init, placement=args.placement)
    mode = "parallel" if args.rounds is not None else "sequential"
    steps = args.steps or 0
    rounds = args.rounds if args.rounds is not None else 10
    out = Path(args.out)
    for run_idx in range(args.runs):
        seed = args.seed + run_idx
        sim = abm.SimSpec(models=kernel, mode=mode, steps=steps, rounds=rounds,
                          u=args.u, seed=seed, log_transitions=args.log is not None)
        result = abm.run(g, init, sim)
        path = out if args.runs == 1 else out.with_name(f"{out.stem}_seed{seed}{out.suffix}")
        metrics.write_trajectory_csv(path, result.times, result.rho, result.labels,
                                     degrees=result.degrees, by_degree=result.rho_by_degree)
        if args.log is not None:
            space = rum.StateSpace(tuple(result.labels), len(result.labels) - 1)
            log_path = Path(args.log)
            if args.runs > 1:
                log_path = log_path.with_name(f"{log_path.stem}_seed{seed}{log_path.suffix}")
            rum.write_records_jsonl(log_path, result.records, space)
        terminal = ", ".join(f"{lab}={v:.4f}" for lab, v in zip(result.labels, result.terminal_rho))
        print(f"seed {seed}: terminal {terminal} -> {path}")
    return 0


def _cmd_fit(args) -> int:
    records, space = rum.read_records_jsonl(args.log, labels=args.labels)
    if args.reference is not None:
        space = rum.StateSpace(space.labels, space.index(args.reference))
    if args.method == "rum":
        features = rum.FeatureMapSpec(tuple(args.features.split(",")), args.context_dim)
        fit = rum.fit_mle(records, features, space, args.l2)
        rum.save_kernel(args.out, fit.model)
        print(f"fit {len(records)} records: ll={fit.log_likelihood:.4f} "
              f"grad={fit.grad_inf_norm:.2e} iters={fit.iterations} converged={fit.converged}")
    else:
        kernel = rum.fit_plugin(records, space, args.buckets)
        rum.save_kernel(args.out, kernel)
        print(f"fit {len(records)} records into {args.buckets}+1 buckets")
    return 0


def _cmd_predict(args) -> int:
    q = _load_degree_dist(args)
    kernel = rum.load_kernel(args.model)
    rho0 = mfd.PopulationVector.uniform(q, np.asarray(args.init))
    ode = mfd.OdeSpec(t_end=args.t_end, h=args.h, u=args.u)
    traj = mfd.integrate(q, rho0, kernel, ode)
    labels = traj.labels or tuple(f"s{i}" for i in range(traj.rho.shape[1]))
    metrics.write_trajectory_csv(args.out, traj.times, traj.rho, labels,
                                 degrees=traj.degrees, by_degree=traj.by_degree)
    terminal = ", ".join(f"{lab}={v:.4f}" for lab, v in zip(labels, traj.rho[-1]))
    print(f"integrated to t={args.t_end}: terminal {terminal} -> {args.out}")
    return 0


def _cmd_fixed_point(args) -> int:
    q = _load_degree_dist(args)
    c = args.logits
    logits = twostate.TwoStateLogits(c[0], c[1], c[2], c[3], c[4], c[5])
    ctx = twostate.PhiContext(q, logits, args.u)
    solved = twostate.solve_fixed_point(ctx)
    assumptions = twostate.check_assumptions(logits, ctx)
    report = {
        "theta_star": solved.theta_star,
        "residual": solved.residual,
        "method": solved.method,
        "iterations": solved.iterations,
        "assumptions": {"A1": assumptions.a1, "A2": assumptions.a2,
                        "A3": assumptions.a3, "A4": assumptions.a4,
                        "witnesses": assumptions.witnesses},
    }
    if args.check_contraction:
        con = twostate.contraction_check(ctx)
        report.update({"S_H": con.s_h, "S_T": con.s_t, "eta": con.eta,
                       "bound": con.bound, "is_contraction": con.is_contraction,
                       "sup_phi_prime": con.sup_phi_prime})
    if args.comparative_statics:
        stat = twostate.comparative_statics(ctx, solved.theta_star)
        report["dtheta_du"] = stat.dtheta_du
        report["phi_prime"] = stat.phi_prime
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
        print(f"theta* = {solved.theta_star:.6f} -> {args.out}")
    else:
        print(text)
    return 0


def _cmd_compare(args) -> int:
    a = metrics.read_trajectory_csv(args.empirical)
    b = metrics.read_trajectory_csv(args.predicted)
    report = {
        "state": args.state,
        "pearson": metrics.pearson_correlation(a, b, args.state),
        "mean_kl": metrics.mean_kl(a, b),
    }
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_validate(args) -> int:
    g = DirectedGraph.load(args.graph)
    kernel = rum.load_kernel(args.model)
    init = abm.InitSpec(args.init, placement=args.placement)
    features = rum.FeatureMapSpec(tuple(args.features.split(","))) if args.features else None
    report = metrics.validate_protocol(
        g, kernel, init, steps=args.steps, fit_window=args.window,
        fit_method=args.method, seeds=args.seeds, u=args.u, features=features,
        l2=args.l2, buckets=args.buckets)
    text = json.dumps(report.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(f"correlation {report.mean_correlation:.4f} +/- {report.std_correlation:.4f}, "
          f"KL {report.mean_kl:.4f} +/- {report.std_kl:.4f}")
    return 0


def _cmd_run(args) -> int:
    parsed = recipe.parse_config(Path(args.recipe).read_text())
    result = recipe.run_recipe(parsed, out_dir=args.out_dir)
    n_cells = len(result.manifest["cells"])
    n_failed = sum(1 for c in result.manifest["cells"] if "error" in c)
    print(f"ran {n_cells} cells ({n_failed} failed); manifest in "
          f"{args.out_dir or parsed.out_dir}/manifest.json")
    return RUNTIME_ERROR if result.failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mfdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-graph", help="generate a directed influence network")
    p.add_argument("--model", required=True, choices=["powerlaw", "ba", "er", "chain", "tree"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--gamma", type=float, default=2.7)
    p.add_argument("--p", type=float, default=0.1)
    p.add_argument("--branching", type=int, default=2)
    p.add_argument("--clip", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_graph)

    p = sub.add_parser("simulate", help="run the agent-based simulator")
    p.add_argument("--graph", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--init", type=_parse_probs, required=True,
                   help="comma-separated state distribution, e.g. 0.35,0.35,0.30")
    p.add_argument("--placement", default="random", choices=abm.PLACEMENTS)
    p.add_argument("--mode", choices=["sequential", "parallel"], default=None,
                   help="inferred from --steps/--rounds when omitted")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--steps", type=int, default=None)
    group.add_argument("--rounds", type=int, default=None)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--u", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="also write the transition log (JSONL)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="estimate a transition kernel from a log")
    p.add_argument("--log", required=True)
    p.add_argument("--method", choices=["rum", "plugin"], default="rum")
    p.add_argument("--features", default="const,frac:T")
    p.add_argument("--context-dim", type=int, default=0)
    p.add_argument("--labels", nargs="+", default=None)
    p.add_argument("--reference", default=None)
    p.add_argument("--l2", type=float, default=1e-6)
    p.add_argument("--buckets", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("predict", help="integrate the mean-field ODE")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--graph")
    src.add_argument("--degree-dist")
    p.add_argument("--model", required=True)
    p.add_argument("--init", type=_parse_probs, required=True)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--h", type=float, default=0.01)
    p.add_argument("--u", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("fixed-point", help="two-state equilibrium analysis")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--graph")
    src.add_argument("--degree-dist")
    p.add_argument("--logits", type=_parse_probs, required=True,
                   help="c0H,cuH,cqH,c0T,cuT,cqT")
    p.add_argument("--u", type=float, default=0.0)
    p.add_argument("--check-contraction", action="store_true")
    p.add_argument("--comparative-statics", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_fixed_point)

    p = sub.add_parser("compare", help="score a predicted trajectory against an empirical one")
    p.add_argument("--empirical", required=True)
    p.add_argument("--predicted", required=True)
    p.add_argument("--state", default="T")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_compare)

    p = sub.add_parser("validate", help="fit-and-predict protocol on seeded simulations")
    p.add_argument("--graph", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--init", type=_parse_probs, required=True)
    p.add_argument("--placement", default="random", choices=abm.PLACEMENTS)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--window", type=int, default=150)
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--method", choices=["rum", "plugin"], default="rum")
    p.add_argument("--features", default=None)
    p.add_argument("--l2", type=float, default=1e-6)
    p.add_argument("--buckets", type=int, default=5)
    p.add_argument("--u", type=float, default=0.0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("run", help="execute an experiment recipe")
    p.add_argument("--recipe", required=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "logits", None) is not None and len(args.logits) != 6:
        print("error: --logits needs exactly 6 numbers", file=sys.stderr)
        return USAGE_ERROR
    try:
        return args.func(args)
    except recipe.RecipeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
