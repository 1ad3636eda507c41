"""``metassm`` command line.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .meta_simulator import SCOPES, SimulationError
from .network import PROFILES
from .persistence import DigestMismatch, FormatError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("metassm")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="run configuration file")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--preset", help="benchmark preset name or label")
    p.add_argument("--scope", choices=SCOPES)
    p.add_argument("--profile", choices=sorted(PROFILES))
    p.add_argument("--threads", type=int, help="cap on worker threads")
    p.add_argument("--deterministic", action="store_true", help="single-threaded bit-exact mode")
    p.add_argument("--out", type=Path, help="output directory (default: $MFSM_OUT or the config)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="metassm", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write simulated dataset containers")
    _common(p)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--n-trials", type=int, help="fix N instead of drawing it")
    p.add_argument("--verify", action="store_true",
                   help="re-derive the datasets in --out and check their digests")

    p = sub.add_parser("train", help="train a velocity network")
    _common(p)
    p.add_argument("--resume", action="store_true", help="continue from last.mfck in --out")

    p = sub.add_parser("sample", help="draw posterior samples for dataset files")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, nargs="+", required=True)
    p.add_argument("--draws", type=int)

    p = sub.add_parser("evaluate", help="metric tables for a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, nargs="*", help="test set files (default: simulate them)")

    p = sub.add_parser("benchmark", help="amortization-gap report across scopes")
    _common(p)
    p.add_argument("--scope-config", action="append", default=[], metavar="SCOPE=PATH",
                   help="config file for one scope (repeatable)")
    p.add_argument("--scopes", default="instance,family", help="comma-separated scopes to compare")
    p.add_argument("--allow-budget-mismatch", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the full loss")
    _common(p)
    p.add_argument("--entries", type=int, default=200, help="loss entries probed")
    return ap


def resolve_config(args, path: Optional[Path] = None) -> RunConfig:
    cfg = load_config(path if path is not None else args.config)
    over = {
        "run__seed": args.seed,
        "run__scope": args.scope,
        "run__profile": args.profile,
    }
    if args.preset is not None:
        over["run__preset"] = args.preset
    cfg = cfg.with_overrides(**over)
    out = args.out or (Path(os.environ["MFSM_OUT"]) if os.environ.get("MFSM_OUT") else None)
    if out is not None:
        cfg = cfg.with_overrides(run__out=str(out))
    return cfg


def _run(args) -> int:
    pipeline.configure_threads(args.threads, args.deterministic)
    if args.command == "benchmark":
        scopes = [s.strip() for s in args.scopes.split(",") if s.strip()]
        configs = {}
        for item in args.scope_config:
            if "=" not in item:
                raise ConfigError(f"--scope-config expects SCOPE=PATH, got {item!r}")
            scope, path = item.split("=", 1)
            cfg = resolve_config(args, Path(path))
            configs[scope] = cfg.with_overrides(run__scope=scope)
        out = resolve_config(args).out_dir
        gaps = pipeline.benchmark(configs, scopes, out, args.allow_budget_mismatch)
        for g in gaps:
            print(f"{g.family}\t{g.scope}\t{g.metric}\t{g.median:.4f}\t{g.sem:.4f}\t{g.gap:+.4f}")
        return EXIT_OK

    cfg = resolve_config(args)
    out = cfg.out_dir
    if args.command == "simulate":
        if args.verify:
            problems = pipeline.verify_files(cfg, out)
            for p in problems:
                print(f"FAIL {p}")
            if problems:
                return EXIT_DATA
            print("all digests verified")
            return EXIT_OK
        if args.count < 0:
            raise ConfigError("--count must be non-negative")
        paths = pipeline.simulate_files(cfg, args.count, out, args.n_trials)
        print(f"wrote {len(paths)} datasets to {out}")
    elif args.command == "train":
        res = pipeline.train_run(cfg, out, resume=args.resume)
        print(f"trained {res.step} steps; final epoch loss {res.epoch_losses[-1]:.4f}; "
              f"checkpoints in {out}")
        if res.skipped:
            print(f"warning: {res.skipped} non-finite updates skipped", file=sys.stderr)
    elif args.command == "sample":
        paths = pipeline.sample_files(cfg, args.checkpoint, args.data, out, args.draws)
        print(f"wrote {len(paths)} posterior files to {out}")
    elif args.command == "evaluate":
        rows, _ = pipeline.evaluate(cfg, args.checkpoint, out, args.data)
        print(f"evaluated {len(rows)} active cells; report in {out / 'metrics.tsv'}")
    elif args.command == "gradcheck":
        if cfg["run"]["profile"] != "desk":
            raise ConfigError("gradcheck runs on the desk profile only")
        results = pipeline.gradcheck(cfg, n_entries=args.entries)
        failed = [r for r in results if not r.passed]
        for r in results:
            status = "ok" if r.passed else "FAIL"
            print(f"{r.name:20s} max_rel_error={r.max_rel_error:.3e} checked={r.n_checked} {status}")
        if failed:
            print("failed ops: " + ", ".join(r.name for r in failed), file=sys.stderr)
            return EXIT_NUMERIC
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except (ConfigError, pipeline.BudgetMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DigestMismatch, pipeline.DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SimulationError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
