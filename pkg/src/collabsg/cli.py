"""Command-line entry point: simulate, run, eval, export."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .dataset import WORLD_PRESETS, DatasetError, SimulationConfig, load_dataset, simulate_dataset
from .evaluation import EvaluationError
from .pipeline import evaluate_run, load_run_config, run_pipeline, write_metrics, write_run
from .scenegraph import SceneGraphDocument
from .wire import WireError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="collabsg", description="Collaborative LiDAR SLAM and scene-graph toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a simulated multi-agent dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--agents", type=int, default=3)
    s.add_argument("--duration", type=float, default=90.0, help="seconds")
    s.add_argument("--world-preset", choices=sorted(WORLD_PRESETS), default="town")
    s.add_argument("--loop-blocks", type=int, default=2)
    s.add_argument("--out", required=True)

    r = sub.add_parser("run", help="run the multi-agent pipeline on a dataset")
    r.add_argument("--dataset", required=True)
    r.add_argument("--config", help="JSON file overriding the run configuration")
    r.add_argument("--out", required=True)
    r.add_argument("--deterministic", action="store_true",
                   help="single-threaded frontends (the server always consumes keyframes in timestamp order)")

    e = sub.add_parser("eval", help="compute metrics for a run")
    e.add_argument("--run", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--config", help="JSON run configuration used for the run")
    e.add_argument("--report", help="metrics file (default: RUN/metrics.json)")

    x = sub.add_parser("export", help="re-serialize a run's scene graph")
    x.add_argument("--run", required=True)
    x.add_argument("--format", choices=["json"], default="json")
    x.add_argument("--out", required=True)
    return p


def _simulate(args) -> None:
    cfg = SimulationConfig(seed=args.seed, agents=args.agents, duration=args.duration,
                           world_preset=args.world_preset, loop_blocks=args.loop_blocks)
    simulate_dataset(cfg, args.out)


def _run(args) -> None:
    cfg = load_run_config(args.config)
    ds = load_dataset(args.dataset, list(cfg.agents) if cfg.agents is not None else None)
    result = run_pipeline(ds, cfg, parallel=not args.deterministic)
    write_run(result, args.out)


def _eval(args) -> None:
    metrics = evaluate_run(args.run, args.dataset, load_run_config(args.config))
    write_metrics(metrics, args.report or Path(args.run) / "metrics.json")


def _export(args) -> None:
    src = Path(args.run) / "scenegraph.json"
    if not src.is_file():
        raise DatasetError(f"{src} not found")
    text = src.read_text()
    SceneGraphDocument.from_json(text)
    Path(args.out).write_text(json.dumps(json.loads(text), sort_keys=True, indent=1) + "\n")


COMMANDS = {"simulate": _simulate, "run": _run, "eval": _eval, "export": _export}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (DatasetError, EvaluationError, WireError, ValueError, OSError, KeyError) as exc:
        print(f"collabsg {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
