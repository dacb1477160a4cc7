"""Command-line entry point: ``opdop {gen, solve-hindsight, run, report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cmdp import CmdpModel
from .envs import make_hazard_gridworld, make_tabular_random
from .exceptions import ConfigurationError, GenerationError, InfeasibleConstraint, NumericError
from .harness import report, run_experiment
from .hindsight import solve_hindsight

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_NUMERIC = 3

log = logging.getLogger("opdop")


def _cells(text: str | None):
    # "r,c;r,c" -> [(r, c), ...]
    if not text:
        return []
    return [tuple(int(v) for v in part.split(",")) for part in text.split(";") if part]


def cmd_gen(args) -> int:
    if args.kind == "tabular":
        model = make_tabular_random(args.states, args.actions, args.horizon, args.b, args.seed)
    else:
        hazards = int(args.hazards) if args.hazards and args.hazards.isdigit() else _cells(args.hazards)
        goal = _cells(args.goal)[0] if args.goal else None
        model = make_hazard_gridworld(args.width, args.height, args.horizon, hazards, args.b, args.seed,
                                      goal=goal, slip=args.slip)
    model.save(args.out)
    log.info("wrote %s", args.out)
    return EXIT_OK


def cmd_solve(args) -> int:
    model = CmdpModel.load(args.model)
    if args.b is not None:
        model = model.with_offset(args.b)
    print(json.dumps(solve_hindsight(model).to_dict(), indent=2))
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    flags = {k: getattr(args, k) for k in ("model", "backend", "episodes", "seeds", "b", "c1", "p",
                                            "alpha_rate", "workers")}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    manifest = run_experiment(cfg, args.out)
    agg = json.loads((Path(args.out) / "aggregate.json").read_text())
    print(json.dumps({k: agg[k] for k in ("episodes", "num_seeds", "final_regret", "final_violation",
                                          "regret_slope") if k in agg}))
    return EXIT_OK if manifest.status == "ok" else EXIT_ERROR


def cmd_report(args) -> int:
    agg = report(args.dir)
    print(json.dumps({k: v for k, v in agg.items() if not isinstance(v, dict)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opdop", description="Safe exploration in episodic constrained MDPs.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a generated environment to a JSON file")
    gen.add_argument("--kind", choices=("tabular", "gridworld"), default="tabular")
    gen.add_argument("--states", type=int, default=5)
    gen.add_argument("--actions", type=int, default=3)
    gen.add_argument("--horizon", type=int, default=5)
    gen.add_argument("--width", type=int, default=3)
    gen.add_argument("--height", type=int, default=3)
    gen.add_argument("--hazards", help="count, or cells as 'r,c;r,c'")
    gen.add_argument("--goal", help="goal cell as 'r,c'")
    gen.add_argument("--slip", type=float, default=0.1)
    gen.add_argument("--b", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    solve = sub.add_parser("solve-hindsight", help="print the hindsight LP solution as JSON")
    solve.add_argument("model")
    solve.add_argument("--b", type=float)
    solve.set_defaults(func=cmd_solve)

    run = sub.add_parser("run", help="run OPDOP over several seeds")
    run.add_argument("--config", help="JSON file with the same keys as the flags")
    run.add_argument("--model")
    run.add_argument("--backend", choices=("lstd", "tabular"))
    run.add_argument("--episodes", type=int)
    run.add_argument("--seeds", type=int)
    run.add_argument("--b", type=float)
    run.add_argument("--c1", type=float)
    run.add_argument("--p", type=float)
    run.add_argument("--alpha-rate", dest="alpha_rate", choices=("theorem", "lemma"))
    run.add_argument("--workers", type=int)
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="re-aggregate a run directory and redraw plots")
    rep.add_argument("dir")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InfeasibleConstraint as exc:
        print(f"infeasible constraint: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, GenerationError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
