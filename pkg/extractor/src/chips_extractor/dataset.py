"""Image–caption dataset manifests.

A manifest is JSONL: one object per sample with required keys `id` (unique,
non-negative int), `image` (path, resolved relative to the manifest), and
`caption` (non-empty string); `tags` is an optional list of non-empty
strings.  Extra keys are passthrough metadata and ignored.  Every violation
names the offending line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DatasetError


@dataclass(frozen=True)
class Sample:
    id: int
    image_path: Path
    caption: str
    tags: tuple[str, ...]


def read_manifest(path: str | Path) -> list[Sample]:
    manifest = Path(path)
    if not manifest.exists():
        raise DatasetError(f"manifest {manifest} does not exist")
    base = manifest.parent
    samples: list[Sample] = []
    seen: set[int] = set()
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        where = f"{manifest}:{lineno}"
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{where}: not valid JSON ({exc})") from None
        if not isinstance(obj, dict):
            raise DatasetError(f"{where}: sample must be a JSON object")
        try:
            raw_id, image, caption = obj["id"], obj["image"], obj["caption"]
        except KeyError as exc:
            raise DatasetError(f"{where}: missing key {exc.args[0]!r}") from None
        if not isinstance(raw_id, int) or isinstance(raw_id, bool) or raw_id < 0:
            raise DatasetError(f"{where}: id must be a non-negative integer")
        if raw_id in seen:
            raise DatasetError(f"{where}: duplicate sample id {raw_id}")
        seen.add(raw_id)
        if not isinstance(image, str) or not image:
            raise DatasetError(f"{where}: image must be a non-empty path string")
        if not isinstance(caption, str) or not caption.strip():
            raise DatasetError(f"{where}: caption must be a non-empty string")
        tags_raw = obj.get("tags", [])
        if not isinstance(tags_raw, list) or any(
            not isinstance(t, str) or not t for t in tags_raw
        ):
            raise DatasetError(f"{where}: tags must be a list of non-empty strings")
        samples.append(
            Sample(
                id=raw_id,
                image_path=(base / image),
                caption=caption,
                tags=tuple(tags_raw),
            )
        )
    return samples


def load_pixels(sample: Sample) -> np.ndarray:
    """Decode to (H, W, 3) uint8; decoding is eval-mode only — no resizing,
    augmentation, or color management beyond RGB conversion."""
    try:
        with Image.open(sample.image_path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except FileNotFoundError:
        raise DatasetError(
            f"sample {sample.id}: image {sample.image_path} does not exist"
        ) from None
    except UnidentifiedImageError:
        raise DatasetError(
            f"sample {sample.id}: {sample.image_path} is not a decodable image"
        ) from None
    except OSError as exc:
        raise DatasetError(
            f"sample {sample.id}: cannot read {sample.image_path} ({exc})"
        ) from None
