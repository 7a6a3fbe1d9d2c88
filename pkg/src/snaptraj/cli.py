"""Batch command-line surface: gen | cluster | train | recover | eval |
speed | feedback | export-geojson.

Each run lives in one directory holding the config snapshot, manifest, and
artifacts.  A lock file rejects concurrent invocations on the same run
directory; failures exit nonzero with a machine-readable JSON error on
stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, default_config, load_config

LOCK_NAME = "run.lock"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snaptraj",
        description="camera-network trajectory recovery pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_method=False, config_optional=True):
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--config", default=None,
                       help="config JSON (defaults to the run-dir snapshot)")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--quiet", action="store_true")
        if needs_method:
            p.add_argument("--method", default="model",
                           choices=pipeline.RECOVER_METHODS)

    common(sub.add_parser("gen", help="generate the synthetic dataset"))
    common(sub.add_parser("cluster", help="cluster records and build labels"))
    common(sub.add_parser("train", help="co-train denoiser and generator"))
    common(sub.add_parser("recover", help="recover trajectories"), needs_method=True)
    p_eval = sub.add_parser("eval", help="metric grid across methods")
    common(p_eval)
    p_eval.add_argument("--methods", default=None,
                        help="comma-separated method list (default: all recovered)")
    p_eval.add_argument("--holdout", action="store_true",
                        help="restrict to held-out clusters")
    common(sub.add_parser("speed", help="link-speed map"), needs_method=True)
    common(sub.add_parser("feedback", help="clustering feedback report"),
           needs_method=True)
    common(sub.add_parser("export-geojson", help="trajectories as GeoJSON"),
           needs_method=True)
    return parser


def _resolve_config(args) -> RunConfig:
    run_dir = Path(args.out)
    if args.config is not None:
        cfg = load_config(args.config)
    elif (run_dir / "config.json").exists():
        cfg = pipeline.load_config_snapshot(run_dir)
    elif args.command == "gen":
        cfg = default_config()
    else:
        raise ConfigError(f"no config snapshot in {run_dir}; pass --config or run gen")
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


class RunLock:
    def __init__(self, run_dir: Path):
        self.path = run_dir / LOCK_NAME
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"run directory is locked by another invocation: {self.path}")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def _available_methods(run_dir: Path) -> list[str]:
    found = []
    for method in pipeline.RECOVER_METHODS:
        if (run_dir / f"recovered_{method.replace('+', '_')}.jsonl").exists():
            found.append(method)
    return found


def run_command(args) -> int:
    run_dir = Path(args.out)
    cfg = _resolve_config(args)
    say = (lambda *a: None) if args.quiet else print

    with RunLock(run_dir):
        if args.command == "gen":
            ds = pipeline.stage_gen(cfg, run_dir)
            say(f"generated {ds.net.n_nodes} nodes, {len(ds.cameras)} cameras, "
                f"{len(ds.records)} records, {len(ds.trajectories)} vehicles")
        elif args.command == "cluster":
            ds = pipeline.stage_cluster(cfg, run_dir)
            say(f"clusters: {len(ds.clusters)} (both thresholds), "
                f"labeled: {len(ds.labeled)}")
        elif args.command == "train":
            pipeline.stage_train(cfg, run_dir)
            say("checkpoint written")
        elif args.command == "recover":
            rows = pipeline.stage_recover(cfg, run_dir, args.method)
            say(f"recovered {len(rows)} clusters with {args.method}")
        elif args.command == "eval":
            methods = args.methods.split(",") if args.methods \
                else _available_methods(run_dir)
            if not methods:
                raise ValueError("nothing recovered yet; run the recover stage")
            rows = pipeline.stage_eval(cfg, run_dir, methods,
                                       holdout_only=args.holdout)
            say(pipeline.format_metrics_grid(rows))
        elif args.command == "speed":
            speeds = pipeline.stage_speed(cfg, run_dir, args.method)
            say(f"observed links: {len(speeds)}")
        elif args.command == "feedback":
            before, after = pipeline.stage_feedback(cfg, run_dir, args.method)
            say(f"pairwise F1 {before.f1:.3f} -> {after.f1:.3f}")
        elif args.command == "export-geojson":
            out = pipeline.stage_export_geojson(cfg, run_dir, args.method)
            say(f"wrote {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except RuntimeError as exc:
        print(json.dumps({"error": "locked", "message": str(exc)}), file=sys.stderr)
        return 3
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
