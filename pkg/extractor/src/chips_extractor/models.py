"""Frozen dual-encoder checkpoints: a builtin registry plus .npz files.

A model bundles two backbone matrices (applied to the fixed descriptors) and
the projection heads + log-temperature that the downstream scorer owns and
differentiates.  Builtin checkpoints are materialized from a name-derived
blake2b seed, so every installation reconstructs identical weights; real
exported checkpoints load from .npz by path.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import hashlib

import numpy as np

from .errors import ModelError
from .features import IMAGE_DESCRIPTOR_DIM, TEXT_DESCRIPTOR_DIM

_CHECKPOINT_KEYS = ("image_backbone", "text_backbone", "head_v", "head_t", "tau_log")

# name -> (d_v, d_t, d): backbone widths and the shared endpoint dim
_REGISTRY: dict[str, tuple[int, int, int]] = {
    "toy-16": (16, 12, 8),
    "toy-32": (32, 24, 16),
}

_DEFAULT_TAU_LOG = 0.3


@dataclass(frozen=True)
class DualEncoderModel:
    name: str
    image_backbone: np.ndarray  # (IMAGE_DESCRIPTOR_DIM, d_v) float32
    text_backbone: np.ndarray  # (TEXT_DESCRIPTOR_DIM, d_t) float32
    head_v: np.ndarray  # (d_v, d) float32
    head_t: np.ndarray  # (d_t, d) float32
    tau_log: float

    @property
    def d_v(self) -> int:
        return self.image_backbone.shape[1]

    @property
    def d_t(self) -> int:
        return self.text_backbone.shape[1]

    @property
    def d(self) -> int:
        return self.head_v.shape[1]

    def image_features(self, descriptor: np.ndarray) -> np.ndarray:
        """One sample's backbone output; per-sample application keeps the
        bytes independent of how samples were batched."""
        return np.tanh(descriptor @ self.image_backbone.astype(np.float64))

    def text_features(self, descriptor: np.ndarray) -> np.ndarray:
        return np.tanh(descriptor @ self.text_backbone.astype(np.float64))


def builtin_models() -> dict[str, tuple[int, int, int]]:
    return dict(_REGISTRY)


def _materialize(name: str, d_v: int, d_t: int, d: int) -> DualEncoderModel:
    digest = hashlib.blake2b(name.encode(), digest_size=8, person=b"chx-mdl").digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return DualEncoderModel(
        name=name,
        image_backbone=(
            rng.standard_normal((IMAGE_DESCRIPTOR_DIM, d_v))
            / np.sqrt(IMAGE_DESCRIPTOR_DIM)
        ).astype(np.float32),
        text_backbone=(
            rng.standard_normal((TEXT_DESCRIPTOR_DIM, d_t))
            / np.sqrt(TEXT_DESCRIPTOR_DIM)
        ).astype(np.float32),
        head_v=(rng.standard_normal((d_v, d)) / np.sqrt(d_v)).astype(np.float32),
        head_t=(rng.standard_normal((d_t, d)) / np.sqrt(d_t)).astype(np.float32),
        tau_log=_DEFAULT_TAU_LOG,
    )


def _load_npz(path: Path) -> DualEncoderModel:
    try:
        with np.load(path, allow_pickle=False) as bundle:
            missing = [k for k in _CHECKPOINT_KEYS if k not in bundle]
            if missing:
                raise ModelError(f"{path}: checkpoint is missing keys {missing}")
            arrays = {k: np.asarray(bundle[k]) for k in _CHECKPOINT_KEYS}
    except ModelError:
        raise
    except Exception as exc:
        raise ModelError(f"{path}: cannot load checkpoint ({exc})") from None
    ib, tb = arrays["image_backbone"], arrays["text_backbone"]
    hv, ht = arrays["head_v"], arrays["head_t"]
    if ib.ndim != 2 or ib.shape[0] != IMAGE_DESCRIPTOR_DIM:
        raise ModelError(
            f"{path}: image backbone must be ({IMAGE_DESCRIPTOR_DIM}, d_v), "
            f"got {ib.shape}"
        )
    if tb.ndim != 2 or tb.shape[0] != TEXT_DESCRIPTOR_DIM:
        raise ModelError(
            f"{path}: text backbone must be ({TEXT_DESCRIPTOR_DIM}, d_t), "
            f"got {tb.shape}"
        )
    if hv.shape[0] != ib.shape[1] or ht.shape[0] != tb.shape[1]:
        raise ModelError(
            f"{path}: projection heads {hv.shape}/{ht.shape} do not sit on "
            f"backbone widths {ib.shape[1]}/{tb.shape[1]}"
        )
    if hv.ndim != 2 or ht.ndim != 2 or hv.shape[1] != ht.shape[1]:
        raise ModelError(
            f"{path}: heads must share the end dim, got {hv.shape} and {ht.shape}"
        )
    for key, arr in arrays.items():
        if key != "tau_log" and not np.all(np.isfinite(arr)):
            raise ModelError(f"{path}: {key} contains non-finite values")
    tau = float(arrays["tau_log"])
    if not np.isfinite(tau):
        raise ModelError(f"{path}: tau_log is not finite")
    return DualEncoderModel(
        name=str(path),
        image_backbone=ib.astype(np.float32),
        text_backbone=tb.astype(np.float32),
        head_v=hv.astype(np.float32),
        head_t=ht.astype(np.float32),
        tau_log=tau,
    )


def load_model(model_id: str) -> DualEncoderModel:
    if model_id in _REGISTRY:
        return _materialize(model_id, *_REGISTRY[model_id])
    path = Path(model_id)
    if path.suffix == ".npz":
        if not path.exists():
            raise ModelError(f"checkpoint file {model_id!r} does not exist")
        return _load_npz(path)
    known = ", ".join(sorted(_REGISTRY))
    raise ModelError(
        f"unknown model {model_id!r}; expected one of [{known}] or a .npz path"
    )


def export_checkpoint(model: DualEncoderModel, path: str | Path) -> None:
    np.savez(
        path,
        image_backbone=model.image_backbone,
        text_backbone=model.text_backbone,
        head_v=model.head_v,
        head_t=model.head_t,
        tau_log=np.float64(model.tau_log),
    )
