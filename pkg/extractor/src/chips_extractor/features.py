"""Fixed-length descriptors the frozen backbones consume.

Both descriptors are deliberately seed-free and library-version-stable:
histogram/moment statistics for images, salted byte-n-gram hashing for text.
Every hash goes through blake2b — Python's builtin `hash` is process-salted
and must never touch persisted features.
"""

from __future__ import annotations

import hashlib

import numpy as np

IMAGE_DESCRIPTOR_DIM = 48
TEXT_DESCRIPTOR_DIM = 256

_GRAY_BINS = 32
_NGRAM_RANGE = (1, 2, 3)
_TEXT_PERSON = b"chx-text"


def image_descriptor(pixels: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (48,) float64 summary.

    Layout: 32-bin normalized grayscale histogram, per-channel means (3) and
    stds (3), log-scaled height/width (2), mean horizontal/vertical gradient
    magnitudes (2), three-band row profile (3), three-band column profile (3).
    """
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 pixels, got {arr.shape} {arr.dtype}")
    hgt, wid = arr.shape[:2]
    if hgt < 1 or wid < 1:
        raise ValueError("image has no pixels")
    f = arr.astype(np.float64)
    gray = 0.299 * f[:, :, 0] + 0.587 * f[:, :, 1] + 0.114 * f[:, :, 2]

    hist, _ = np.histogram(gray, bins=_GRAY_BINS, range=(0.0, 256.0))
    hist = hist.astype(np.float64) / (hgt * wid)

    means = f.reshape(-1, 3).mean(axis=0) / 255.0
    stds = f.reshape(-1, 3).std(axis=0) / 255.0
    size = np.array([np.log1p(hgt) / 10.0, np.log1p(wid) / 10.0])

    # 1-pixel extents have no interior differences; the energy is zero there
    dx = np.abs(np.diff(gray, axis=1)).mean() / 255.0 if wid > 1 else 0.0
    dy = np.abs(np.diff(gray, axis=0)).mean() / 255.0 if hgt > 1 else 0.0

    def _band_means(axis: int) -> np.ndarray:
        profile = gray.mean(axis=axis) / 255.0
        bands = np.array_split(profile, 3)
        return np.array([band.mean() if band.size else 0.0 for band in bands])

    desc = np.concatenate(
        [hist, means, stds, size, [dx, dy], _band_means(1), _band_means(0)]
    )
    assert desc.shape == (IMAGE_DESCRIPTOR_DIM,)
    return desc


def text_descriptor(caption: str) -> np.ndarray:
    """UTF-8 byte n-grams, sign-hashed into 256 buckets, l2-normalized.

    Empty captions hash to nothing and are rejected upstream; a zero vector
    here means accidental total cancellation and is refused rather than
    normalized into garbage.
    """
    raw = caption.encode("utf-8")
    counts = np.zeros(TEXT_DESCRIPTOR_DIM)
    for n in _NGRAM_RANGE:
        for i in range(len(raw) - n + 1):
            digest = hashlib.blake2b(
                raw[i : i + n], digest_size=8, person=_TEXT_PERSON
            ).digest()
            value = int.from_bytes(digest, "little")
            bucket = value % TEXT_DESCRIPTOR_DIM
            sign = 1.0 if (value >> 8) & 1 else -1.0
            counts[bucket] += sign
    norm = float(np.linalg.norm(counts))
    if norm == 0.0:
        raise ValueError("caption hashed to a zero descriptor")
    return counts / norm
