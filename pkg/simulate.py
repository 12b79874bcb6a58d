"""
Byzantine-Robust Optimization Lab

Simulates distributed stochastic optimization with Byzantine nodes:
- Robust aggregation rules and the attacks they face
- DSGD, DSGDm, Byrd-Nester, Byrd-reNester and the inexact proximal point method
- Executable lower-bound constructions
- Experiment grids with per-round metrics
"""

import sys
import json
import argparse
from typing import Optional, List

import numpy as np
from loguru import logger
from pydantic import ValidationError

import config
from schema import ByrdNesterParams, ExperimentConfig, GridConfig
from simulator import (
    run_experiment,
    run_grid,
    summarize_grid,
    robustness_suite,
    make_lemma1_gadget,
    lemma1_floor_check,
    lemma6_escape_threshold,
    lemma6_monte_carlo,
    make_chain_instance,
    chain_value_and_gradient,
)
from simulator.lowerbound_lab import (
    dsgd_runner,
    dsgdm_runner,
    byrd_nester_runner,
    lemma6_stuck_run,
)


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    """Route loguru to stderr at DEBUG (-v), WARNING (--quiet) or INFO."""
    level = "DEBUG" if verbose else "WARNING" if quiet else "INFO"
    logger.remove()
    logger.add(sys.stderr, level=level, format="<level>{level: <8}</level> {message}")


def _load(model, path: str):
    with open(path) as f:
        return model.model_validate(json.load(f))


def _seed(args) -> int:
    return config.DEFAULT_SEED if args.seed is None else args.seed


def cmd_run(args) -> int:
    try:
        cfg = _load(ExperimentConfig, args.config)
    except (OSError, ValueError, ValidationError) as e:
        print(f"✗ Invalid config {args.config}: {e}", file=sys.stderr)
        return 1
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    out_dir = args.out_dir or cfg.out_dir or f"runs/{cfg.name}"

    try:
        summary, metrics = run_experiment(cfg, out_dir, threads=args.threads)
    except Exception as e:
        print(f"✗ Run failed: {e}", file=sys.stderr)
        return 1

    print(f"✓ {cfg.name}: {len(metrics.rounds) - 1} rounds, {summary.total_queries} oracle queries")
    print(f"  final ||grad f||  {summary.final_grad_norm:.6g}")
    print(f"  floor estimate    {summary.floor_estimate:.6g}")
    if summary.max_accuracy is not None:
        print(f"  max accuracy      {summary.max_accuracy:.4f}")
    print(f"  written to        {out_dir}")
    return 0


def cmd_verify(args) -> int:
    reports = robustness_suite(trials=args.trials, dim=args.dim, seed=_seed(args), threads=args.threads)

    print("\n" + "=" * 60)
    print(f"ROBUSTNESS SUITE (n=10, |H|=8, delta=0.2, {args.trials} trials)")
    print("=" * 60)
    ok = True
    for r in reports:
        passed = r.rate >= 0.999
        ok = ok and passed
        mark = "✓" if passed else "✗"
        print(f"{mark} {r.rule:<18} rho*delta={r.rho_delta:<8.4g} holds {r.rate:.4%}  worst lhs/rhs {r.worst_ratio:.3g}")
        for attack, count in sorted(r.violations.items()):
            print(f"      {attack}: {count} violations")
        if r.precondition_failures:
            print(f"      clipping start outside the honest ball: {r.precondition_failures}")
    print("=" * 60)
    return 0 if ok else 1


def _lemma1(args) -> int:
    gadget = make_lemma1_gadget(args.delta, args.zeta, args.rho, args.alpha_min, args.nodes)
    runners = {
        "dsgd": dsgd_runner(T=args.rounds),
        "dsgdm": dsgdm_runner(T=args.rounds),
        "byrd_nester": byrd_nester_runner(
            ByrdNesterParams(eta=0.5, theta=0.5, beta=0.5, alpha=0.5, m=1, m0=1, T=args.rounds)
        ),
    }
    print(f"\nFloor bound (alpha_min/2) sqrt(rho delta) zeta = {gadget.floor_bound:.6g}")
    ok = True
    for name, runner in runners.items():
        try:
            check = lemma1_floor_check(gadget, runner, seed=_seed(args))
        except Exception as e:
            print(f"✗ {name}: {e}", file=sys.stderr)
            ok = False
            continue
        mark = "✓" if check.holds else "✗"
        ok = ok and check.holds
        print(f"{mark} {name:<12} identical trajectories, best max||grad f_j|| = {check.floor:.6g}")
    return 0 if ok else 1


def _lemma6(args) -> int:
    rho = args.rho
    m_star = lemma6_escape_threshold(args.L, args.eps, args.sigma_sq, args.nodes, args.delta, rho)
    print(f"\nEscape threshold m* = {m_star}")
    rho_delta = rho * args.delta
    seed = _seed(args)
    for m in sorted({max(m_star - 1, 1), m_star}):
        est = lemma6_monte_carlo(args.eps, args.sigma_sq, args.nodes, rho_delta, m, args.draws, seed)
        verdict = "zero admissible" if est.zero_admissible else "zero rejected"
        print(f"  m={m:<6} lhs={est.lhs:.4g} rhs={est.rhs:.4g}  {verdict}")

    if m_star > 1:
        trajectory = lemma6_stuck_run(args.L, args.eps, args.sigma_sq, args.nodes, m_star - 1, args.rounds, seed=seed)
        stuck = all(np.array_equal(x, trajectory[0]) for x in trajectory)
        mark = "✓" if stuck else "✗"
        print(f"{mark} {args.rounds} rounds with m={m_star - 1}: iterate {'stayed' if stuck else 'moved'} at x0")
        return 0 if stuck else 1
    return 0


def _chain(args) -> int:
    inst = make_chain_instance(args.L, args.eps, args.sigma_sq, d=args.dim)
    print(f"\nChain: d={inst.d}, nu={inst.nu:.4g}, p={inst.p:.4g}, Delta={inst.Delta:.4g}")
    rng = np.random.default_rng(_seed(args))
    worst = np.inf
    for _ in range(args.points):
        x = inst.nu * rng.uniform(-3.0, 3.0, size=inst.d)
        x[-1] = 0.0
        worst = min(worst, float(np.linalg.norm(chain_value_and_gradient(inst, x)[1])))
    ok = worst > inst.eps
    mark = "✓" if ok else "✗"
    print(f"{mark} min ||grad f|| with last coordinate zero: {worst:.4g} (eps={inst.eps:g})")
    return 0 if ok else 1


def cmd_lowerbound(args) -> int:
    return {"lemma1": _lemma1, "lemma6": _lemma6, "chain": _chain}[args.construction](args)


def cmd_sweep(args) -> int:
    try:
        grid = _load(GridConfig, args.grid)
    except (OSError, ValueError, ValidationError) as e:
        print(f"✗ Invalid grid config {args.grid}: {e}", file=sys.stderr)
        return 1
    if args.seed is not None:
        grid = grid.model_copy(update={"seeds": [args.seed]})
    out_dir = args.out_dir or grid.base.out_dir or "runs/grid"

    results = run_grid(grid, out_dir, threads=args.threads)
    failed = [r for r in results if r.status == "failed"]
    for r in results:
        mark = "✗" if r.status == "failed" else "✓"
        detail = r.error if r.status == "failed" else f"floor~{r.floor_estimate:.4g}"
        print(f"{mark} {r.name}: {detail}")
    summary = summarize_grid(results)
    if summary.worst_case_max_accuracy:
        print("\nWorst-case maximum accuracy:")
        for opt, rules in summary.worst_case_max_accuracy.items():
            row = "  ".join(f"{rule}={acc:.4f}" for rule, acc in rules.items())
            print(f"  {opt:<14} {row}")
    for opt, entry in summary.versus_dsgd.items():
        print(f"  {opt} >= dsgd in {entry['at_least']}/{entry['cells']} cells")
    print(f"\n{len(results) - len(failed)}/{len(results)} cells finished, summaries in {out_dir}")
    return 1 if failed else 0


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = argparse.ArgumentParser(
        description="Simulate Byzantine-robust distributed stochastic optimization",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Run one experiment from a JSON config
  python simulate.py --out-dir runs/exp1 run experiment.json

  # Check every robust aggregator against the attacks (label flip needs labeled data)
  python simulate.py verify-aggregators --trials 100000

  # Lower-bound constructions
  python simulate.py lowerbound lemma1 --zeta 2
  python simulate.py lowerbound lemma6 --sigma-sq 4
  python simulate.py lowerbound chain --dim 32

  # Optimizer x aggregator x attack grid on 4 threads
  python simulate.py --threads 4 sweep grid.json
        """
    )

    parser.add_argument("--seed", type=int, help="Override the configured seed")
    parser.add_argument("--out-dir", metavar="DIR", help="Output directory for metrics and summaries")
    parser.add_argument("--threads", type=int, default=1, help="Worker threads (default: 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Enable debug logging")
    parser.add_argument("--quiet", action="store_true", help="Only log warnings and errors")

    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="Run one experiment")
    p_run.add_argument("config", help="Experiment config (JSON, schema 1)")
    p_run.set_defaults(func=cmd_run)

    p_verify = sub.add_parser("verify-aggregators", help="Randomized robustness checks")
    p_verify.add_argument("--trials", type=int, default=config.SUITE_TRIALS, help="Trials per rule")
    p_verify.add_argument("--dim", type=int, default=config.SUITE_DIM, help="Input dimension")
    p_verify.set_defaults(func=cmd_verify)

    p_lb = sub.add_parser("lowerbound", help="Lower-bound constructions")
    p_lb.add_argument("construction", choices=["lemma1", "lemma6", "chain"])
    p_lb.add_argument("--delta", type=float, default=0.25, help="Byzantine fraction (default: 0.25)")
    p_lb.add_argument("--zeta", type=float, default=1.0, help="Heterogeneity (default: 1)")
    p_lb.add_argument("--rho", type=float, default=4.0, help="Robustness coefficient (default: 4)")
    p_lb.add_argument("--alpha-min", type=float, default=1.0, help="Smallest fresh-gradient weight")
    p_lb.add_argument("--nodes", type=int, default=8, help="Honest nodes (default: 8)")
    p_lb.add_argument("--rounds", type=int, default=200, help="Rounds per run (default: 200)")
    p_lb.add_argument("--L", type=float, default=1.0, help="Smoothness (default: 1)")
    p_lb.add_argument("--eps", type=float, default=0.05, help="Target accuracy (default: 0.05)")
    p_lb.add_argument("--sigma-sq", type=float, default=1.0, help="Oracle variance (default: 1)")
    p_lb.add_argument("--draws", type=int, default=config.SUITE_TRIALS, help="Monte-Carlo draws")
    p_lb.add_argument("--dim", type=int, default=32, help="Chain length (default: 32)")
    p_lb.add_argument("--points", type=int, default=1000, help="Sampled points for the chain check")
    p_lb.set_defaults(func=cmd_lowerbound)

    p_sweep = sub.add_parser("sweep", help="Run an optimizer x aggregator x attack grid")
    p_sweep.add_argument("grid", help="Grid config (JSON, schema 1)")
    p_sweep.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
