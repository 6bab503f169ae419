"""Reference selectors scored in the same end-point subspace.

Gradient-based baselines (dot, tracin, trak) consume the same per-sample
gradient vectors — and the same sketch, when one is configured — as the
main scorer, so ranking differences come from the scoring rule alone.
Metadata baselines (random, concept-filter, concept-balance) operate on
ids and tag lists; clipscore reads single-pair cosines off a frozen
geometry.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .curvature import MomentAccumulator, build_surrogate, solve_direction
from .endpoint import BatchGeometry, EndpointParams, FeatureBatch, batch_gradients
from .errors import ConfigError, EmptyPool, ShapeError, SketchMismatch
from .numerics import substream
from .scoring import alignment_score
from .sketch import SketchSpec, SketchedVector, apply_many, inner

WHITELIST_CONCEPTS = (
    "Clinical Imaging",
    "Microscopy",
    "Immuno Assays",
    "Illustrative Diagrams",
    "Chemical Structures",
    "Maps",
    "Tools and Materials",
    "Hand Drawn and Screen Based Visuals",
)

OVERREPRESENTED_CONCEPTS = (
    "Plots and Charts",
    "Tables",
    "Scientific Formulae and Equations",
)

DEFAULT_DOWNSAMPLE_RATE = 0.25


# ------------------------------------------------------------------- dot

def score_dot(
    g: SketchedVector | np.ndarray, g_eval: SketchedVector | np.ndarray
) -> float:
    """First-order score: plain inner product with the eval direction."""
    return alignment_score(g, g_eval)


# ---------------------------------------------------------------- tracin

@dataclass(frozen=True)
class CheckpointTrajectory:
    """Ordered (params, learning rate) pairs from one training run."""

    steps: tuple[tuple[EndpointParams, float], ...]

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ConfigError("trajectory needs at least one checkpoint")
        d_ref = None
        for t, (params, eta) in enumerate(self.steps):
            if not isinstance(params, EndpointParams):
                raise ConfigError(f"checkpoint {t} is not endpoint params")
            if not eta > 0:
                raise ConfigError(f"learning rate at checkpoint {t} must be > 0, got {eta}")
            dims = (params.d_v, params.d_t, params.d)
            if d_ref is None:
                d_ref = dims
            elif dims != d_ref:
                raise ShapeError(
                    f"checkpoint {t} dims {dims} differ from checkpoint 0 dims {d_ref}"
                )

    def __len__(self) -> int:
        return len(self.steps)


def tracin_scores(
    traj: CheckpointTrajectory,
    batch: FeatureBatch,
    g_eval: SketchedVector | np.ndarray,
    spec: SketchSpec | None = None,
) -> np.ndarray:
    """Sum of eta_t-weighted dot scores over checkpoints, one per sample.

    The eval direction stays fixed across checkpoints; per-sample
    gradients are recomputed at each checkpoint's params.
    """
    sketched_eval = isinstance(g_eval, SketchedVector)
    if sketched_eval and spec is None:
        raise SketchMismatch("sketched eval direction but no sketch for pool gradients")
    if spec is not None and not sketched_eval:
        raise SketchMismatch("sketch configured but eval direction is an exact vector")
    if spec is not None and spec.fingerprint() != g_eval.spec_fingerprint:
        raise SketchMismatch(
            "trajectory sketch does not match the eval direction's sketch"
        )
    scores = np.zeros(batch.size)
    for params, eta in traj.steps:
        G = batch_gradients(params, batch)
        if spec is not None:
            G = apply_many(spec, G)
            scores += eta * (G @ g_eval.data)
        else:
            direction = np.asarray(g_eval, dtype=np.float64)
            if G.shape[1] != direction.shape[0]:
                raise ShapeError(
                    f"checkpoint gradient dim {G.shape[1]} != eval dim {direction.shape[0]}"
                )
            scores += eta * (G @ direction)
    return scores


def score_tracin(
    traj: CheckpointTrajectory,
    batch: FeatureBatch,
    index: int,
    g_eval: SketchedVector | np.ndarray,
    spec: SketchSpec | None = None,
) -> float:
    if not 0 <= index < batch.size:
        raise ShapeError(f"sample index {index} outside batch of {batch.size}")
    return float(tracin_scores(traj, batch, g_eval, spec)[index])


# ------------------------------------------------------------------ trak

class TrakScorer:
    """Second-moment-preconditioned dot scores with one shared solve.

    The moment is the plain average (1/N) sum of g g^T over the pool —
    no cross term — ridged by lambda_trak; the preconditioned eval
    direction is solved once and reused for every sample.
    """

    def __init__(
        self,
        moment: MomentAccumulator | np.ndarray,
        lambda_trak: float,
        g_eval: SketchedVector | np.ndarray,
        iters: int | None = None,
        tol: float = 1e-10,
    ):
        if not lambda_trak > 0:
            raise ConfigError(f"lambda_trak must be > 0, got {lambda_trak}")
        if isinstance(moment, MomentAccumulator):
            acc = moment
        else:
            phi = np.asarray(moment, dtype=np.float64)
            if phi.ndim != 2 or phi.shape[0] != phi.shape[1]:
                raise ShapeError(f"pool moment must be square, got {phi.shape}")
            acc = _accumulator_from_matrix(phi, g_eval)
        self.surrogate = build_surrogate(acc, alpha=0.0, lambda_ridge=lambda_trak)
        dim = self.surrogate.dim
        self.direction = solve_direction(
            self.surrogate,
            g_eval,
            iters=dim if iters is None else iters,
            tol=tol,
        )

    def score(self, g: SketchedVector | np.ndarray) -> float:
        return alignment_score(g, self.direction)

    def scores(self, G: np.ndarray) -> np.ndarray:
        direction = (
            self.direction.data
            if isinstance(self.direction, SketchedVector)
            else self.direction
        )
        return np.asarray(G, dtype=np.float64) @ direction


def _accumulator_from_matrix(
    phi: np.ndarray, g_eval: SketchedVector | np.ndarray
) -> MomentAccumulator:
    """Present a precomputed (1/N) sum gg^T as a filled accumulator."""
    sketched = isinstance(g_eval, SketchedVector)
    acc = MomentAccumulator(
        "sketched-k" if sketched else "exact-P", phi.shape[0], cross=False
    )
    acc.sum_self = phi.copy()
    acc.weight = 1.0  # matrix is already normalized per sample
    acc.count = 1
    if sketched:
        acc.fingerprint = g_eval.spec_fingerprint
    return acc


def score_trak(
    g: SketchedVector | np.ndarray,
    pool_moment: MomentAccumulator | np.ndarray,
    lambda_trak: float,
    g_eval: SketchedVector | np.ndarray,
    iters: int | None = None,
    tol: float = 1e-10,
) -> float:
    """One-shot form; build a TrakScorer to amortize the solve over a pool."""
    return TrakScorer(pool_moment, lambda_trak, g_eval, iters, tol).score(g)


# ------------------------------------------------------------- clipscore

def clipscore_all(geom: BatchGeometry) -> np.ndarray:
    """2.5 * max(cos, 0) per pair, cosines read off the scaled logits."""
    cos = np.diag(geom.S) / geom.tau
    return 2.5 * np.maximum(cos, 0.0)


def score_clipscore(geom: BatchGeometry, index: int) -> float:
    if not 0 <= index < geom.S.shape[0]:
        raise ShapeError(f"sample index {index} outside batch of {geom.S.shape[0]}")
    return float(clipscore_all(geom)[index])


# ------------------------------------------------- random / concept pools

def _draw(ids: np.ndarray, n: int, seed: int, label: str) -> np.ndarray:
    rng = substream(seed, "baseline", label)
    return rng.choice(ids, size=n, replace=False)


def select_random(ids: Sequence[int] | np.ndarray, seed: int, r: float) -> np.ndarray:
    """Uniform draw without replacement of floor(r * N) ids."""
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"retention ratio must lie in (0, 1], got {r}")
    arr = np.asarray(ids, dtype=np.uint64)
    if arr.size == 0:
        raise EmptyPool("cannot select from an empty pool")
    n = int(np.floor(r * arr.size))
    return _draw(arr, n, seed, "random")


def _check_tags(
    tags: Sequence[Sequence[str]], vocabulary: Sequence[str]
) -> list[frozenset]:
    vocab = frozenset(vocabulary)
    out = []
    for sample_tags in tags:
        for tag in sample_tags:
            if tag not in vocab:
                raise ConfigError(f"tag {tag!r} outside the run's concept vocabulary")
        out.append(frozenset(sample_tags))
    return out


def _default_vocabulary() -> tuple[str, ...]:
    return WHITELIST_CONCEPTS + OVERREPRESENTED_CONCEPTS


def filter_concepts(
    ids: Sequence[int] | np.ndarray,
    tags: Sequence[Sequence[str]],
    whitelist: Sequence[str] = WHITELIST_CONCEPTS,
    vocabulary: Sequence[str] | None = None,
) -> np.ndarray:
    """Ids whose tags intersect the whitelist, in pool order."""
    arr = np.asarray(ids, dtype=np.uint64)
    if len(tags) != arr.size:
        raise ShapeError(f"{arr.size} ids but {len(tags)} tag lists")
    tag_sets = _check_tags(tags, vocabulary or _default_vocabulary())
    keep = frozenset(whitelist)
    mask = np.array([bool(ts & keep) for ts in tag_sets], dtype=bool)
    survivors = arr[mask]
    if survivors.size == 0:
        raise EmptyPool("no samples carry any whitelist concept")
    return survivors


def balance_concepts(
    ids: Sequence[int] | np.ndarray,
    tags: Sequence[Sequence[str]],
    seed: int,
    downsample_rate: float = DEFAULT_DOWNSAMPLE_RATE,
    overrepresented: Sequence[str] = OVERREPRESENTED_CONCEPTS,
    vocabulary: Sequence[str] | None = None,
) -> np.ndarray:
    """Thin samples carrying overrepresented concepts to the given rate.

    Unlisted samples always survive; listed ones survive an independent
    seeded coin flip with probability downsample_rate, decided in pool
    order so the outcome is replayable.
    """
    if not 0.0 <= downsample_rate <= 1.0:
        raise ConfigError(f"downsample rate must lie in [0, 1], got {downsample_rate}")
    arr = np.asarray(ids, dtype=np.uint64)
    if len(tags) != arr.size:
        raise ShapeError(f"{arr.size} ids but {len(tags)} tag lists")
    tag_sets = _check_tags(tags, vocabulary or _default_vocabulary())
    listed = frozenset(overrepresented)
    rng = substream(seed, "baseline", "balance")
    draws = rng.uniform(size=arr.size)
    mask = np.array(
        [
            not (ts & listed) or draws[i] < downsample_rate
            for i, ts in enumerate(tag_sets)
        ],
        dtype=bool,
    )
    survivors = arr[mask]
    if survivors.size == 0:
        raise EmptyPool("concept balancing removed every sample")
    return survivors


def select_from_survivors(
    survivors: np.ndarray, pool_size: int, seed: int, r: float
) -> np.ndarray:
    """Uniform draw of floor(r * pool_size) ids from a filtered pool.

    The budget is set by the full pool, so a filter that leaves fewer
    samples than the budget cannot satisfy the retention ratio.
    """
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"retention ratio must lie in (0, 1], got {r}")
    n = int(np.floor(r * pool_size))
    if n > survivors.size:
        raise EmptyPool(
            f"filtered pool has {survivors.size} samples, "
            f"but retention {r} of {pool_size} needs {n}"
        )
    return _draw(survivors, n, seed, "survivors")
