"""Command-line entry points.

    wvsched run     --scenario <file|preset> --solution proposed --slots 300 --seed 7 --out out/
    wvsched compare --scenario <file|preset> --solutions proposed,myopic --seeds 5 --out out/
    wvsched oracle  --scenario <file|preset> [--cap 200000]
    wvsched replay  --fixture illustration-2user --solution myopic --out out/
    wvsched learn   --scenario pds-toy --slots 30000 --out out/
    wvsched presets

Exit codes: 0 success, 2 validation failure, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from wvsched.harness import (
    ProposedSolution,
    build_solution,
    compute_metrics,
    emit_report,
    pds_learning_curve,
    run_episode,
    write_learning_curve,
    write_price_trace,
    write_replay_table,
)
from wvsched.model import ModelError
from wvsched.oracle import centralized_oracle
from wvsched.pricing import CoordinationError
from wvsched.scenario import ScenarioError, list_presets, load_scenario

REPLAY_CHANNELS = {"illustration-2user": [0, 1, 1, 1, 0]}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wvsched",
                                description="Multi-user wireless video scheduling")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate one solution on a scenario")
    run.add_argument("--scenario", required=True)
    run.add_argument("--solution", default=None,
                     help="defaults to the scenario's solver field")
    run.add_argument("--slots", type=int, default=300)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--clearing", action="store_true",
                     help="per-slot price clearing instead of proportional trims")
    run.add_argument("--max-slots", type=int, default=120_000,
                     help="price-iteration slot cap before non-convergence")
    run.add_argument("--out", default="out")

    cmp_ = sub.add_parser("compare", help="run several solutions side by side")
    cmp_.add_argument("--scenario", required=True)
    cmp_.add_argument("--solutions", default="proposed,mu-mdp,lyapunov,myopic")
    cmp_.add_argument("--slots", type=int, default=300)
    cmp_.add_argument("--seeds", type=int, default=5)
    cmp_.add_argument("--seed", type=int, default=None)
    cmp_.add_argument("--clearing", action="store_true")
    cmp_.add_argument("--out", default="out")

    orc = sub.add_parser("oracle", help="exact centralized value on a tiny scenario")
    orc.add_argument("--scenario", required=True)
    orc.add_argument("--cap", type=int, default=200_000)

    rep = sub.add_parser("replay", help="replay a pinned channel sequence")
    rep.add_argument("--fixture", default="illustration-2user")
    rep.add_argument("--solution", default="myopic")
    rep.add_argument("--out", default="out")

    lrn = sub.add_parser("learn", help="single-user post-decision learning curve")
    lrn.add_argument("--scenario", default="pds-toy")
    lrn.add_argument("--slots", type=int, default=30_000)
    lrn.add_argument("--seed", type=int, default=None)
    lrn.add_argument("--out", default="out")

    sub.add_parser("presets", help="list shipped scenario presets")
    return p


def _prepare(scenario, name: str, seed: int, clearing: bool,
             max_slots: int = 120_000):
    kwargs = {}
    if name.startswith("proposed") and "+" not in name:
        kwargs = {"clearing": clearing, "max_slots": max_slots}
    solution = build_solution(scenario, name, **kwargs)
    if not isinstance(solution, ProposedSolution) and hasattr(solution, "proposed"):
        shared = ProposedSolution(scenario, clearing=clearing)
        solution.proposed = shared
    solution.prepare(np.random.default_rng(seed))
    return solution


def _cmd_run(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    name = args.solution if args.solution is not None else scenario.solver
    solution = _prepare(scenario, name, seed, args.clearing,
                        max_slots=args.max_slots)
    trace = run_episode(scenario, solution, args.slots,
                        np.random.default_rng(seed + 1))
    paths = emit_report([trace], scenario, args.out)
    if isinstance(solution, ProposedSolution) and solution.report is not None:
        paths.append(write_price_trace(solution.report,
                                       Path(args.out) / "prices.csv"))
    m = compute_metrics(trace, scenario)
    print(f"{solution.name}: network payoff {m.network_payoff:.4f}, "
          f"distortion {m.total_distortion:.1f}, energy {m.total_energy:.4g}")
    for path in paths:
        print(f"wrote {path}")
    return 0


def _cmd_compare(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    names = [n.strip() for n in args.solutions.split(",") if n.strip()]
    shared = None
    solutions = []
    prep_rng = np.random.default_rng(seed)
    for name in names:
        kwargs = {"clearing": args.clearing} \
            if name.startswith("proposed") and "+" not in name else {}
        sol = build_solution(scenario, name, proposed=shared, **kwargs)
        sol.prepare(prep_rng)
        if isinstance(sol, ProposedSolution) and sol.mode == "planning" \
                and shared is None:
            shared = sol
        solutions.append(sol)
    traces = []
    for sol in solutions:
        first, total = None, 0.0
        for k in range(args.seeds):
            trace = run_episode(scenario, sol, args.slots,
                                np.random.default_rng(seed + 1000 + k))
            if first is None:
                first = trace
            total += compute_metrics(trace, scenario).network_payoff
        traces.append(first)
        print(f"{sol.name}: mean network payoff over {args.seeds} seeds: "
              f"{total / args.seeds:.4f}")
    emit_report(traces, scenario, args.out)
    return 0


def _cmd_oracle(args) -> int:
    scenario = load_scenario(args.scenario)
    result = centralized_oracle(scenario, state_cap=args.cap)
    print(f"joint states: {result.space.n_states}, sweeps: {result.sweeps}")
    print(f"oracle network utility (uniform initial): {result.mean_value:.6f}")
    return 0


def _cmd_replay(args) -> int:
    scenario = load_scenario(args.fixture)
    pinned = REPLAY_CHANNELS.get(args.fixture)
    if pinned is None:
        raise ScenarioError([f"no pinned channel sequence for fixture {args.fixture!r}"])
    solution = _prepare(scenario, args.solution, scenario.seed, clearing=True)
    trace = run_episode(scenario, solution, len(pinned),
                        np.random.default_rng(scenario.seed + 1),
                        pinned_channels=pinned)
    out = Path(args.out)
    path = write_replay_table(trace, scenario,
                              out / f"replay_{solution.name.replace('+', '_')}.csv")
    m = compute_metrics(trace, scenario)
    print(f"{solution.name}: I-frame packets lost after slot 1: "
          f"{m.i_loss_after_first_slot}")
    print(f"wrote {path}")
    return 0


def _cmd_learn(args) -> int:
    scenario = load_scenario(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    user = scenario.users[0]
    # a mid-range fixed price; learning tracks values under it
    price = np.full(len(user.channel), 0.4)
    rows, _ = pds_learning_curve(scenario, price, args.slots,
                                 np.random.default_rng(seed))
    path = write_learning_curve(rows, Path(args.out) / "learning.csv")
    if rows:
        print(f"final windowed payoff {rows[-1][2]:.4f}, "
              f"gap to planning {rows[-1][3]}")
    print(f"wrote {path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "compare":
            return _cmd_compare(args)
        if args.command == "oracle":
            return _cmd_oracle(args)
        if args.command == "replay":
            return _cmd_replay(args)
        if args.command == "learn":
            return _cmd_learn(args)
        if args.command == "presets":
            for name in list_presets():
                print(name)
            return 0
    except (ScenarioError, ModelError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except CoordinationError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
