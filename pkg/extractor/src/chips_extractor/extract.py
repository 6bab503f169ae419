"""Extraction driver: manifest in, feature shards + endpoint checkpoint out.

Inference is batch-parallel (threads; image decode and numpy release the
GIL), but results are folded back in submission order and each shard has
exactly one writer, so output bytes are independent of batch size and worker
count.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

import numpy as np

from .dataset import Sample, load_pixels, read_manifest
from .errors import DatasetError, DimMismatch, ModelError
from .features import image_descriptor, text_descriptor
from .formats import write_endpoint_checkpoint, write_feature_shard
from .models import DualEncoderModel, load_model

_T = TypeVar("_T")
_R = TypeVar("_R")

TAG_SOURCES = ("manifest", "none")

Row = tuple[int, np.ndarray, np.ndarray, tuple[str, ...]]


@dataclass
class ExtractionJob:
    model_id: str
    manifest: Path
    out_dir: Path
    batch_size: int = 64
    device: str = "cpu"
    tag_source: str = "manifest"
    shard_size: int = 4096
    prefix: str = "shard"
    workers: int = 1
    expect_d_v: int | None = None
    expect_d_t: int | None = None

    def __post_init__(self):
        self.manifest = Path(self.manifest)
        self.out_dir = Path(self.out_dir)
        if self.batch_size < 1:
            raise ModelError(f"batch size must be >= 1, got {self.batch_size}")
        if self.shard_size < 1:
            raise ModelError(f"shard size must be >= 1, got {self.shard_size}")
        if self.workers < 1:
            raise ModelError(f"workers must be >= 1, got {self.workers}")
        if self.device != "cpu":
            raise ModelError(
                f"only cpu inference is available, got device {self.device!r}"
            )
        if self.tag_source not in TAG_SOURCES:
            raise ModelError(
                f"tag source must be one of {TAG_SOURCES}, got {self.tag_source!r}"
            )
        if not self.prefix or "/" in self.prefix:
            raise ModelError(f"shard prefix must be a bare name, got {self.prefix!r}")


def _ordered_map(
    fn: Callable[[_T], _R], items: Iterable[_T], workers: int
) -> Iterator[_R]:
    """Parallel map that yields in input order with bounded lookahead."""
    if workers <= 1:
        for item in items:
            yield fn(item)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        for item in items:
            pending.append(pool.submit(fn, item))
            if len(pending) >= 2 * workers:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()


def _featurize_batch(model: DualEncoderModel, batch: Sequence[Sample]) -> list[Row]:
    rows: list[Row] = []
    for sample in batch:
        h = model.image_features(image_descriptor(load_pixels(sample)))
        try:
            t = model.text_features(text_descriptor(sample.caption))
        except ValueError as exc:
            raise DatasetError(f"sample {sample.id}: {exc}") from None
        rows.append((sample.id, h, t, sample.tags))
    return rows


def extract(job: ExtractionJob) -> dict:
    """Run the job; returns {"shards": [paths], "params": path, "samples": n}.

    The declared-width check runs before any filesystem write, so a
    mismatched model leaves no partial output behind.
    """
    model = load_model(job.model_id)
    if job.expect_d_v is not None and job.expect_d_v != model.d_v:
        raise DimMismatch(
            f"model {model.name!r} emits d_v={model.d_v}, job declared "
            f"{job.expect_d_v}; aborting before any shard is written"
        )
    if job.expect_d_t is not None and job.expect_d_t != model.d_t:
        raise DimMismatch(
            f"model {model.name!r} emits d_t={model.d_t}, job declared "
            f"{job.expect_d_t}; aborting before any shard is written"
        )
    samples = read_manifest(job.manifest)
    tagged = job.tag_source == "manifest"

    batches = [
        samples[lo : lo + job.batch_size]
        for lo in range(0, len(samples), job.batch_size)
    ]
    job.out_dir.mkdir(parents=True, exist_ok=True)

    shard_paths: list[str] = []
    buffer: list[Row] = []

    def _flush():
        path = job.out_dir / f"{job.prefix}-{len(shard_paths):03d}.chfs"
        write_feature_shard(path, buffer, model.d_v, model.d_t, tagged)
        shard_paths.append(str(path))
        buffer.clear()

    for rows in _ordered_map(
        lambda batch: _featurize_batch(model, batch), batches, job.workers
    ):
        for row in rows:
            if not tagged:
                row = (row[0], row[1], row[2], ())
            buffer.append(row)
            if len(buffer) == job.shard_size:
                _flush()
    if buffer or not shard_paths:  # an empty dataset still yields a valid shard
        _flush()

    params_path = job.out_dir / "params.chep"
    write_endpoint_checkpoint(params_path, model.head_v, model.head_t, model.tau_log)
    return {
        "shards": shard_paths,
        "params": str(params_path),
        "samples": len(samples),
    }
