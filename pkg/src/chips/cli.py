"""Command-line surface: synth, score, select, verify, flops.

Progress and diagnostics go to standard error; data goes only to the
declared output paths (or standard output for verify/flops when no path
is given). Every pipeline error maps to its class exit code.
"""

from __future__ import annotations

import argparse
import glob as globmod
import sys
from pathlib import Path

from . import pipeline
from .datastore import RunConfig, load_config
from .errors import ChipsError, ConfigError
from .flopsmeter import cost_table, default_model


def _expand(patterns: list[str]) -> list[str]:
    out: list[str] = []
    for pat in patterns:
        hits = sorted(globmod.glob(pat))
        if not hits:
            raise ConfigError(f"no input matches {pat!r}")
        out.extend(hits)
    return out


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {
        key: getattr(args, key)
        for key in ("method", "ablation", "seed", "workers", "retention")
        if getattr(args, key, None) is not None
    }
    return config.replace(**overrides) if overrides else config


def _cmd_synth(args: argparse.Namespace) -> int:
    paths = pipeline.run_synth(
        args.out_dir,
        pool_count=args.pool_count,
        eval_count=args.eval_count,
        d_v=args.d_v,
        d_t=args.d_t,
        d=args.d,
        seed=args.seed if args.seed is not None else 0,
        shards=args.shards,
        clusters=args.clusters,
        target_fraction=args.target_fraction,
        noise_sigma=args.noise_sigma,
        train_steps=args.train_steps,
    )
    for kind in ("pool", "eval", "params", "clusters"):
        entry = paths[kind]
        for path in entry if isinstance(entry, list) else [entry]:
            print(f"{kind}: {path}", file=sys.stderr)
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    config = _load_config(args)
    run = pipeline.run_score(
        config,
        _expand(args.pool),
        _expand(args.eval),
        args.params,
        out_scores=args.out,
        out_surrogate=args.surrogate_out,
        out_scores_text=args.text_out,
    )
    drift = "" if run.drift is None else f" drift_kl={run.drift.kl:.4f}"
    print(
        f"scored {len(run.records)} samples with {config.method}"
        f"/{config.ablation}{drift} -> {args.out}",
        file=sys.stderr,
    )
    return 0


def _cmd_select(args: argparse.Namespace) -> int:
    config = _load_config(args)
    r = args.retention if args.retention is not None else config.retention
    if args.scores and args.pool:
        raise ConfigError("give either --scores or --pool, not both")
    if args.pool:
        manifest = pipeline.run_select_pool(
            config, _expand(args.pool), r, out_path=args.out
        )
    elif args.scores:
        if config.method in pipeline.SELECTOR_METHODS and args.method is not None:
            raise ConfigError(
                f"method {config.method!r} draws from the pool; give --pool"
            )
        manifest = pipeline.run_select(args.scores, r, out_path=args.out)
        if args.method is not None and manifest.method != args.method:
            raise ConfigError(
                f"score file was produced by {manifest.method!r}, "
                f"not {args.method!r}"
            )
    else:
        raise ConfigError("give --scores (scored methods) or --pool (selector-only)")
    print(
        f"retained {manifest.n} samples ({manifest.method}, r={r}) -> {args.out}",
        file=sys.stderr,
    )
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    if args.out:
        with open(args.out, "w") as sink:
            ok = pipeline.run_verify(sink, seed)
    else:
        ok = pipeline.run_verify(sys.stdout, seed)
    print("all checks passed" if ok else "CHECK FAILED", file=sys.stderr)
    return 0 if ok else 1


def _cmd_flops(args: argparse.Namespace) -> int:
    table = cost_table(default_model())
    if args.out:
        Path(args.out).write_text(table + "\n")
    else:
        print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chips",
        description="curvature-preconditioned scoring and selection for "
        "image-text training pools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a clustered synthetic pool")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pool-count", type=int, required=True)
    p.add_argument("--eval-count", type=int, required=True)
    p.add_argument("--d-v", type=int, default=32)
    p.add_argument("--d-t", type=int, default=24)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--shards", type=int, default=1)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--target-fraction", type=float, default=0.25)
    p.add_argument("--noise-sigma", type=float, default=0.8)
    p.add_argument("--train-steps", type=int, default=40)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("score", help="score every pool sample")
    p.add_argument("--config", default=None)
    p.add_argument("--pool", nargs="+", required=True)
    p.add_argument("--eval", nargs="+", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--surrogate-out", default=None)
    p.add_argument("--text-out", default=None)
    p.add_argument("--method", default=None)
    p.add_argument("--ablation", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("select", help="build a retention manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--scores", default=None)
    p.add_argument("--pool", nargs="*", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--method", default=None)
    p.add_argument("--retention", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("verify", help="run every theory check and emit records")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("flops", help="print the scoring cost model")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_flops)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ChipsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
