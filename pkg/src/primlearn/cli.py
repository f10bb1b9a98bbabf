"""Command line driver: ``primlearn <subcommand> [options]``.

Exit codes: 0 ok, 2 usage, 3 abnormal execution detected, 4 planning
failed, 5 missing artifacts.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from . import io, pipeline
from .lattice import State
from .margins import KINDS
from .monitor import StreamMonitor
from .planner import InvalidGoal, InvalidStart, LatticePlanner, NoPlan, OccupancyWorld, PlanningProblem

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABNORMAL = 3
EXIT_NO_PLAN = 4
EXIT_MISSING = 5

log = logging.getLogger("primlearn")


def load_config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig()
    if args.config:
        cfg = pipeline.PipelineConfig.from_dict(io.read_json(args.config))
    over = {}
    if args.root is not None:
        over["root"] = args.root
    if args.seed is not None:
        over["seed"] = args.seed
    if args.jobs is not None:
        over["jobs"] = args.jobs
    if getattr(args, "primitives", None) is not None:
        over["primitive_ids"] = tuple(args.primitives)
    if getattr(args, "triplets", None) is not None:
        over["triplets_per_primitive"] = args.triplets
    if getattr(args, "n_train", None) is not None:
        over["n_train"] = args.n_train
    if getattr(args, "gp_starts", None) is not None:
        over["gp_starts"] = args.gp_starts
    return replace(cfg, **over) if over else cfg


def _state(values) -> State:
    if len(values) not in (3, 6):
        raise argparse.ArgumentTypeError("a state is 3 positions, optionally followed by 3 velocities")
    v = [float(x) for x in values]
    return State(tuple(v[:3]), tuple(v[3:]) if len(v) == 6 else (0.0, 0.0, 0.0))


def cmd_gen_primitives(cfg, args) -> int:
    prims = pipeline.gen_primitives(cfg)
    print(f"{len(prims)} primitives -> {cfg.primitives_path}")
    return EXIT_OK


def cmd_collect(cfg, args) -> int:
    m = pipeline.collect(cfg)
    c = m["counts"]
    print(f"{c['total']} traces ({c['train']} train, {c['test']} test) -> {cfg.dataset_dir}")
    return EXIT_OK


def cmd_train(cfg, args) -> int:
    models, _ = pipeline.train(cfg)
    print(f"{len(models)} models -> {cfg.models_dir}")
    return EXIT_OK


def _print_report(which, table):
    if which == "detection":
        for (method, split), c in sorted(table.items()):
            print(f"{method:5s} {split:5s} TN={c['normal_normal']} FN={c['normal_abnormal']} "
                  f"FP={c['abnormal_normal']} TP={c['abnormal_abnormal']}")
    elif which == "rmse":
        for row, (mu, sd) in table.items():
            print(f"{row:26s} {mu:.4f} +- {sd:.4f} m")
    else:
        for row, v in table.items():
            print(f"{row:20s} {v:.3f}")


def cmd_report(cfg, args) -> int:
    fn = {"rmse": pipeline.report_rmse, "area": pipeline.report_area,
          "detection": pipeline.report_detection}[args.which]
    _print_report(args.which, fn(cfg))
    if args.svg:
        paths = pipeline.report_svg(cfg)
        print(f"{len(paths)} envelope plots -> {cfg.reports_dir / 'svg'}")
    return EXIT_OK


def cmd_plan(cfg, args) -> int:
    prims = pipeline.load_primitives(cfg)
    world = OccupancyWorld.from_dict(io.read_json(args.world))
    kind = args.margin
    if kind == "auto":
        kind = "LearnedModel" if (cfg.models_dir / "baselines.json").exists() else "None"
    margin = pipeline.planning_margin(cfg, kind)
    problem = PlanningProblem(_state(args.start), _state(args.goal), world, args.t_start, margin,
                              args.robot_radius)
    try:
        result = LatticePlanner(prims, cfg.lattice).plan(problem, args.max_expansions)
    except (NoPlan, InvalidStart, InvalidGoal) as e:
        print(f"planning failed: {e}", file=sys.stderr)
        return EXIT_NO_PLAN
    doc = result.to_dict()
    if args.out:
        io.write_json(args.out, doc)
    else:
        print(io.dumps(doc))
    log.info("plan with %d primitives, cost %.3f, %d expansions",
             len(result.plan.primitive_ids), result.cost, result.expanded)
    return EXIT_OK


def _records(path):
    f = sys.stdin if path == "-" else open(path)
    try:
        for line in f:
            if line.strip():
                yield json.loads(line)
    finally:
        if f is not sys.stdin:
            f.close()


def cmd_monitor(cfg, args) -> int:
    models = pipeline.load_models(args.models or cfg.models_dir)
    mon = StreamMonitor(models, cfg.monitor)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        for verdict in mon.run(_records(args.stream)):
            out.write(io.dumps(verdict) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_ABNORMAL if mon.flagged else EXIT_OK


def cmd_all(cfg, args) -> int:
    res = pipeline.run_all(cfg)
    for which in ("rmse", "area", "detection"):
        _print_report(which, res[which])
    if args.svg:
        pipeline.report_svg(cfg)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--root", help="artifact directory (overrides config)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--primitives", type=int, nargs="+", help="primitive ids (default: all)")
    data.add_argument("--triplets", type=int, help="triplets per primitive")
    data.add_argument("--n-train", type=int, dest="n_train", help="training executions per primitive")
    data.add_argument("--gp-starts", type=int, dest="gp_starts", help="random restarts per GP fit")

    p = argparse.ArgumentParser(prog="primlearn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-primitives", parents=[common], help="generate the primitive set").set_defaults(
        func=cmd_gen_primitives)
    sub.add_parser("collect", parents=[common, data], help="execute triplets and record traces").set_defaults(
        func=cmd_collect)
    sub.add_parser("train", parents=[common, data], help="fit execution models").set_defaults(func=cmd_train)

    r = sub.add_parser("report", parents=[common, data], help="write a CSV report")
    r.add_argument("which", choices=("rmse", "area", "detection"))
    r.add_argument("--svg", action="store_true", help="also write envelope plots (needs matplotlib)")
    r.set_defaults(func=cmd_report)

    pl = sub.add_parser("plan", parents=[common], help="plan through a world file")
    pl.add_argument("--world", required=True)
    pl.add_argument("--start", nargs="+", required=True, metavar="X")
    pl.add_argument("--goal", nargs="+", required=True, metavar="X")
    pl.add_argument("--t-start", type=float, default=0.0, dest="t_start")
    pl.add_argument("--margin", choices=("auto", "None") + KINDS, default="auto")
    pl.add_argument("--robot-radius", type=float, default=0.0, dest="robot_radius")
    pl.add_argument("--max-expansions", type=int, dest="max_expansions")
    pl.add_argument("--out", help="plan JSON path (default: stdout)")
    pl.set_defaults(func=cmd_plan)

    m = sub.add_parser("monitor", parents=[common], help="monitor a JSON-lines observation stream")
    m.add_argument("--models", help="model directory (default: from config)")
    m.add_argument("--stream", default="-", help="observation records, '-' for stdin")
    m.add_argument("--out", help="verdict records path (default: stdout)")
    m.set_defaults(func=cmd_monitor)

    a = sub.add_parser("all", parents=[common, data], help="run every stage")
    a.add_argument("--svg", action="store_true")
    a.set_defaults(func=cmd_all)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return args.func(cfg, args)
    except pipeline.MissingArtifacts as e:
        print(f"missing artifacts: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, argparse.ArgumentTypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
