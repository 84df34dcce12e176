"""Command-line entry point.

Exit codes: 0 success, 1 pruning invariant violated, 2 invalid configuration,
3 output could not be written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace

from .config import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, ConfigError, load_config, parse_value
from .harness import (
    benchmark_speedup,
    dumps,
    flops_report,
    make_episode,
    render_episode,
    run_suite,
    sweep,
)
from .pipeline import STRATEGIES, PruneViolation
from .sim import save_episode

EXIT_IO = 3

log = logging.getLogger("vlaprune")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlaprune", description="Action-aware visual token pruning on simulated episodes.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, e.g. pruner.tau=0.9 (repeatable)")
    common.add_argument("-o", "--out", help="output directory (default: $VLAPRUNE_OUTPUT or config output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", parents=[common], help="one episode with one strategy")
    run.add_argument("--episode", type=int, default=0)
    run.add_argument("--strategy", default="full", choices=sorted(STRATEGIES))
    run.add_argument("--dump", action="store_true", help="also save the episode as .npz")

    suite = sub.add_parser("suite", parents=[common], help="all strategies over many seeds")
    suite.add_argument("--episodes", type=int)
    suite.add_argument("--benchmark", action="store_true", help="also time pruned vs unpruned forwards")

    sw = sub.add_parser("sweep", parents=[common], help="parameter grid")
    sw.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...", required=True)
    sw.add_argument("--strategy", action="append", choices=sorted(STRATEGIES))

    sub.add_parser("flops", parents=[common], help="analytical FLOPs report")

    rd = sub.add_parser("render", parents=[common], help="retention images (P6 PPM)")
    rd.add_argument("--episode", type=int, default=0)
    rd.add_argument("--strategy", default="full", choices=sorted(STRATEGIES))
    rd.add_argument("--final", action="store_true", help="draw tokens left after the last layer")
    return p


def _parse_grid(items) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"grid entry {item!r} is not KEY=V1,V2")
        key, values = item.split("=", 1)
        grid[key] = [parse_value(v) for v in values.split(",")]
    return grid


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        out = cfg.output_root(args.out)
        if args.verb == "run":
            cfg = replace(cfg, episodes=1, seed=cfg.seed + args.episode, strategies=(args.strategy,))
            result = run_suite(cfg, out)
            if args.dump:
                save_episode(make_episode(cfg, 0), out / "episode.npz")
            print(dumps(result["summary"]["strategies"]))
        elif args.verb == "suite":
            if args.episodes:
                cfg = replace(cfg, episodes=args.episodes)
            result = run_suite(cfg, out)
            if args.benchmark:
                (out / "benchmark.json").write_text(dumps(benchmark_speedup(cfg)) + "\n")
            print((out / "summary.md").read_text(), end="")
        elif args.verb == "sweep":
            results = sweep(cfg, _parse_grid(args.grid), out, tuple(args.strategy or ("full",)))
            for r in results:
                print(dumps(r["params"]), dumps({k: v["static_removed_fraction"] for k, v in r["summary"].items()}))
        elif args.verb == "flops":
            report = flops_report(cfg)
            out.mkdir(parents=True, exist_ok=True)
            (out / "flops.json").write_text(dumps(report) + "\n")
            print(json.dumps(report, indent=2, sort_keys=True))
        elif args.verb == "render":
            paths = render_episode(cfg, out, args.episode, args.strategy, args.final)
            print(f"wrote {len(paths)} images to {out}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PruneViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
