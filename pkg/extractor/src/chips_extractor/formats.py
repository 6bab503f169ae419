"""Writers for the scoring pipeline's on-disk contracts.

Implemented against the documented byte layout — deliberately not against the
consumer's code — so that interop is proven by the round-trip tests, not by
sharing a serializer.

CHFS feature shard (little-endian throughout):
    b"CHFS"  u32 version  u64 sample_count  u32 d_v  u32 d_t  u32 flags
    then per record:
        u64 id,  d_v * f32 image features,  d_t * f32 text features,
        if flags bit 0: u16 tag_count, then per tag (u16 byte_len, utf-8)

CHEP endpoint checkpoint:
    b"CHEP"  u32 version  u32 d_v  u32 d_t  u32 d
    d_v*d f32 image head (row-major),  d_t*d f32 text head,  f64 tau_log
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetError, ExtractorError

FORMAT_VERSION = 1


def _finite_f32(values: np.ndarray, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{what}: non-finite feature value")
    return arr


def _tag_bytes(tags: Sequence[str], what: str) -> bytes:
    if len(tags) > 0xFFFF:
        raise DatasetError(f"{what}: too many tags ({len(tags)})")
    out = [struct.pack("<H", len(tags))]
    for tag in tags:
        raw = tag.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DatasetError(f"{what}: tag longer than 65535 bytes")
        out.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(out)


def write_feature_shard(
    path: str | Path,
    rows: Iterable[tuple[int, np.ndarray, np.ndarray, Sequence[str]]],
    d_v: int,
    d_t: int,
    tagged: bool,
) -> int:
    """Write one shard; rows are (id, image_features, text_features, tags).

    Returns the record count.  The writer is the only process touching the
    file; rows are materialized first so a validation failure aborts before
    any bytes land on disk.
    """
    encoded = []
    count = 0
    for sample_id, h, t, tags in rows:
        what = f"sample {sample_id}"
        h32 = _finite_f32(h, what + " image features")
        t32 = _finite_f32(t, what + " text features")
        if h32.shape != (d_v,) or t32.shape != (d_t,):
            raise DatasetError(
                f"{what}: feature shapes {h32.shape}/{t32.shape} do not match "
                f"shard dims ({d_v},)/({d_t},)"
            )
        piece = struct.pack("<Q", int(sample_id)) + h32.tobytes() + t32.tobytes()
        if tagged:
            piece += _tag_bytes(tuple(tags), what)
        encoded.append(piece)
        count += 1
    flags = 1 if tagged else 0
    with open(path, "wb") as fh:
        fh.write(b"CHFS")
        fh.write(struct.pack("<IQIII", FORMAT_VERSION, count, d_v, d_t, flags))
        for piece in encoded:
            fh.write(piece)
    return count


def write_endpoint_checkpoint(
    path: str | Path,
    head_v: np.ndarray,
    head_t: np.ndarray,
    tau_log: float,
) -> None:
    """Export the projection heads + log-temperature the scorer differentiates."""
    hv = np.asarray(head_v, dtype="<f4")
    ht = np.asarray(head_t, dtype="<f4")
    if hv.ndim != 2 or ht.ndim != 2 or hv.shape[1] != ht.shape[1]:
        raise ExtractorError(
            f"projection heads must be 2-d with a shared end dim, "
            f"got {hv.shape} and {ht.shape}"
        )
    if not (np.all(np.isfinite(hv)) and np.all(np.isfinite(ht))):
        raise ExtractorError("projection heads contain non-finite values")
    d_v, d = hv.shape
    d_t = ht.shape[0]
    with open(path, "wb") as fh:
        fh.write(b"CHEP")
        fh.write(struct.pack("<IIII", FORMAT_VERSION, d_v, d_t, d))
        fh.write(hv.tobytes())
        fh.write(ht.tobytes())
        fh.write(struct.pack("<d", float(tau_log)))
