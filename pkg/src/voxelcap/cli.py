"""Command-line driver: ``voxelcap {synth,reconstruct,track,bench}``.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 tracking
lost beyond recovery.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .exceptions import ConfigError, FrameError, ParseError, TrackingLost, VoxelcapError
from .parallel import ParallelConfig
from .pipeline import load_config, run_bench, run_pipe, run_reconstruct, run_track
from .synth import generate_sequence, load_script

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_TRACKING_LOST = 3

logger = logging.getLogger("voxelcap")


def _worker_list(text: str) -> list:
    try:
        counts = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad worker list {text!r}") from None
    if not counts or any(c < 1 for c in counts):
        raise argparse.ArgumentTypeError("worker counts must be positive integers")
    return counts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxelcap", description="Multi-camera voxel reconstruction and pose tracking.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, pipe=False):
        p.add_argument("--seed", type=int, default=None, help="override the seed in the file")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--workers", type=int, default=None, help="worker threads (0 = all CPUs)")
        if pipe:
            p.add_argument("--pipe", action="store_true", help="reconstruct in memory, no intermediate files")

    p = sub.add_parser("synth", help="render a synthetic dataset from a JSON scene script")
    p.add_argument("script", type=Path)
    common(p)

    p = sub.add_parser("reconstruct", help="per-frame voxel clouds from a dataset")
    p.add_argument("config", type=Path)
    common(p)

    p = sub.add_parser("track", help="pose tracking against reconstructed clouds")
    p.add_argument("config", type=Path)
    common(p, pipe=True)

    p = sub.add_parser("bench", help="per-stage timings over several worker counts")
    p.add_argument("config", type=Path)
    p.add_argument("--workers", type=_worker_list, default=[1, 2, 4, 8], help="comma-separated list, e.g. 1,2,4,8")
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="report path (default <output>/bench.json)")
    return parser


def _cmd_synth(args) -> int:
    script = load_script(args.script)
    if args.seed is not None:
        script = replace(script, seed=args.seed)
    out = args.out if args.out is not None else args.script.with_suffix("")
    cfg = ParallelConfig() if args.workers is None else ParallelConfig(workers=args.workers)
    generate_sequence(script, out, cfg, base_dir=args.script.parent)
    print(out)
    return EXIT_OK


def _load(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(seed=args.seed, output=args.out, workers=getattr(args, "workers", None))


def _cmd_reconstruct(args) -> int:
    cfg = _load(args)
    results = run_reconstruct(cfg)
    print(f"{len(results)} frames -> {cfg.output}")
    return EXIT_OK


def _cmd_track(args) -> int:
    cfg = _load(args)
    result = run_pipe(cfg) if args.pipe else run_track(cfg)
    lost = [d["frame"] for d in result.diagnostics if d["lost"]]
    if lost:
        logger.warning("tracking was re-seeded at frames %s", lost)
    print(f"{len(result.poses)} poses -> {cfg.output / 'poses.csv'}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed)
    report = run_bench(cfg, args.workers, repeats=args.repeats)
    path = args.out if args.out is not None else cfg.output / "bench.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(format_bench_table(report))
    return EXIT_OK


def format_bench_table(report: dict) -> str:
    """Plain-text table: one row per worker count, per-stage mean ms and speedup."""
    stages = list(report["results"][0]["stages"])
    head = ["workers"] + stages
    rows = [head]
    for res in report["results"]:
        cells = [str(res["workers"])]
        for s in stages:
            st = res["stages"][s]
            sp = "-" if st["speedup"] is None else f"{st['speedup']:.2f}x"
            cells.append(f"{st['mean_ms']:.1f} ({sp})")
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows)


_COMMANDS = {
    "synth": _cmd_synth,
    "reconstruct": _cmd_reconstruct,
    "track": _cmd_track,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ParseError) as exc:
        print(f"voxelcap: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrackingLost as exc:
        print(f"voxelcap: tracking lost at frame {exc.frame}: {exc}", file=sys.stderr)
        return EXIT_TRACKING_LOST
    except FrameError as exc:
        print(f"voxelcap: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except VoxelcapError as exc:
        print(f"voxelcap: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
