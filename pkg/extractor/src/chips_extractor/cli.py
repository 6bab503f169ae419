"""`chips-extract`: frozen-backbone features for the scoring pipeline.

Emits feature shards (.chfs) and an endpoint checkpoint (.chep) only;
progress goes to stderr so stdout stays clean for pipelines.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ExtractorError
from .extract import TAG_SOURCES, ExtractionJob, extract
from .models import builtin_models


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chips-extract",
        description="run a frozen dual-encoder over an image-caption dataset "
        "and write feature shards plus an endpoint checkpoint",
    )
    parser.add_argument(
        "--model",
        required=True,
        help="builtin model name or path to a .npz checkpoint",
    )
    parser.add_argument("--manifest", required=True, help="JSONL dataset manifest")
    parser.add_argument("--out-dir", required=True, help="output shard directory")
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--shard-size", type=int, default=4096)
    parser.add_argument("--prefix", default="shard", help="shard filename stem")
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--tag-source", choices=TAG_SOURCES, default="manifest")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument(
        "--expect-d-v",
        type=int,
        default=None,
        help="abort before writing if the model's image width differs",
    )
    parser.add_argument(
        "--expect-d-t",
        type=int,
        default=None,
        help="abort before writing if the model's text width differs",
    )
    parser.add_argument(
        "--list-models",
        action="store_true",
        help="print builtin model names and widths, then exit",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    if "--list-models" in argv:
        for name, (d_v, d_t, d) in sorted(builtin_models().items()):
            print(f"{name}  d_v={d_v} d_t={d_t} d={d}")
        return 0
    args = parser.parse_args(argv)
    job = None
    try:
        job = ExtractionJob(
            model_id=args.model,
            manifest=args.manifest,
            out_dir=args.out_dir,
            batch_size=args.batch_size,
            device=args.device,
            tag_source=args.tag_source,
            shard_size=args.shard_size,
            prefix=args.prefix,
            workers=args.workers,
            expect_d_v=args.expect_d_v,
            expect_d_t=args.expect_d_t,
        )
        result = extract(job)
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(
        f"extracted {result['samples']} samples into "
        f"{len(result['shards'])} shard(s) -> {job.out_dir}",
        file=sys.stderr,
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
