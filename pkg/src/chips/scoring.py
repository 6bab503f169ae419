"""Utility scoring: curvature-aware alignment, learnability and relevance
weights, the multiplicative utility, top-n selection, and drift checks.

Sign semantics: alignment is signed and large positive is preferred; the
two weights are positive, so ranking by the product pushes strongly
negative-alignment samples to the bottom. Records persist all three
factors so rankings can be recomputed post hoc without rescoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    ConfigError,
    DegenerateDistribution,
    DuplicateSample,
    MarginUndefined,
    ShapeError,
    SketchMismatch,
)
from .endpoint import BatchGeometry
from .numerics import ensure_finite
from .sketch import SketchedVector, inner

SIGMA_LO = float(expit(-1.0))  # lower w_R endpoint, ~0.2689
SIGMA_HI = float(expit(1.0))  # upper w_R endpoint, ~0.7311


@dataclass
class ScoreRecord:
    id: int
    alignment: float
    learnability: float
    relevance: float
    utility: float
    batch_fingerprint: str


def make_record(
    id: int, alignment: float, learnability: float, relevance: float, batch_fingerprint: str
) -> ScoreRecord:
    return ScoreRecord(
        id=int(id),
        alignment=float(alignment),
        learnability=float(learnability),
        relevance=float(relevance),
        utility=float(alignment) * float(learnability) * float(relevance),
        batch_fingerprint=batch_fingerprint,
    )


def validate_record(rec: ScoreRecord, full_mode: bool = True) -> None:
    """Product invariant always; weight ranges only in full scoring mode
    (ablations pin weights to 1)."""
    prod = rec.alignment * rec.learnability * rec.relevance
    scale = max(abs(prod), abs(rec.utility), 1e-300)
    if abs(prod - rec.utility) > 1e-12 * scale:
        raise ShapeError(
            f"record {rec.id}: utility {rec.utility!r} is not the factor product {prod!r}"
        )
    if full_mode:
        if rec.learnability < 0.0:
            raise ShapeError(f"record {rec.id}: negative learnability {rec.learnability}")
        if not SIGMA_LO - 1e-9 <= rec.relevance <= SIGMA_HI + 1e-9:
            raise ShapeError(
                f"record {rec.id}: relevance {rec.relevance} outside [{SIGMA_LO}, {SIGMA_HI}]"
            )


@dataclass
class EvalPrototypes:
    mu_x: np.ndarray
    mu_y: np.ndarray
    beta: float

    def __post_init__(self):
        self.mu_x = np.asarray(self.mu_x, dtype=np.float64)
        self.mu_y = np.asarray(self.mu_y, dtype=np.float64)
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        # means of unit vectors cannot exceed unit norm
        for name, mu in (("mu_x", self.mu_x), ("mu_y", self.mu_y)):
            n = float(np.linalg.norm(mu))
            if n > 1.0 + 1e-9:
                raise ShapeError(f"{name} has norm {n} > 1; not a mean of unit vectors")


@dataclass
class SelectionManifest:
    retained: np.ndarray  # ids in rank order
    retention_ratio: float
    n: int
    config_fingerprint: str
    drift_kl_upper: float
    method: str = "chips"


@dataclass
class DriftReport:
    kl: float
    ratio_min: float
    ratio_max: float
    n_used: int
    n_excluded: int


def alignment_score(
    g: SketchedVector | np.ndarray, direction: SketchedVector | np.ndarray
) -> float:
    if isinstance(g, SketchedVector) != isinstance(direction, SketchedVector):
        raise SketchMismatch("gradient and direction live in different spaces")
    if isinstance(g, SketchedVector):
        return inner(g, direction)
    g = np.asarray(g, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    if g.shape != direction.shape:
        raise ShapeError(f"alignment shapes differ: {g.shape} vs {direction.shape}")
    return float(g @ direction)


def learnability_components(geom: BatchGeometry) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(p_corr, margin, w_L) for every sample of the batch.

    p_corr averages the two softmax diagonals; the margin is the positive
    logit minus the hardest competing logit in either direction.
    """
    B = geom.size
    if B < 2:
        raise MarginUndefined("learnability needs at least one in-batch negative")
    diag = np.diag(geom.S)
    masked = geom.S.copy()
    np.fill_diagonal(masked, -np.inf)
    hardest = np.maximum(masked.max(axis=1), masked.max(axis=0))
    margin = diag - hardest
    p_corr = 0.5 * (np.diag(geom.P_i2t) + np.diag(geom.P_t2i))
    w_l = (1.0 - p_corr) * (1.0 + expit(-margin))
    return p_corr, margin, w_l


def learnability(geom: BatchGeometry, i: int) -> float:
    if not 0 <= i < geom.size:
        raise ShapeError(f"sample index {i} out of range for batch of {geom.size}")
    return float(learnability_components(geom)[2][i])


def relevance_all(
    Xhat: np.ndarray, Yhat: np.ndarray, proto: EvalPrototypes
) -> np.ndarray:
    nx = float(np.linalg.norm(proto.mu_x))
    ny = float(np.linalg.norm(proto.mu_y))
    if nx == 0.0 or ny == 0.0:
        raise ConfigError(
            "evaluation prototype is the zero vector; eval set is empty or degenerate"
        )
    cos_x = (Xhat @ proto.mu_x) / nx
    cos_y = (Yhat @ proto.mu_y) / ny
    return expit((1.0 - proto.beta) * cos_x + proto.beta * cos_y)


def relevance(xhat: np.ndarray, yhat: np.ndarray, proto: EvalPrototypes) -> float:
    return float(relevance_all(xhat[None, :], yhat[None, :], proto)[0])


def utility_and_select(records, r: float, config_fingerprint: str = "") -> SelectionManifest:
    """Top-n by utility, ties broken by ascending id, n = floor(r * N).

    Implemented as a partial selection around the n-th utility; must (and
    is tested to) coincide with full sort-then-truncate.
    """
    if not 0.0 < r <= 1.0:
        raise ConfigError(f"retention ratio must lie in (0, 1], got {r}")
    recs = list(records)
    ids = np.array([rec.id for rec in recs], dtype=np.uint64)
    utils = np.array([rec.utility for rec in recs], dtype=np.float64)
    ensure_finite(utils, "selection utilities")
    uniq, counts = np.unique(ids, return_counts=True)
    if np.any(counts > 1):
        raise DuplicateSample(f"duplicate sample id {int(uniq[np.argmax(counts > 1)])}")
    n = int(np.floor(r * len(recs)))
    if n == 0:
        return SelectionManifest(
            np.empty(0, dtype=np.uint64), r, 0, config_fingerprint, 0.0
        )
    if n < len(recs):
        # partial selection: find the n-th utility, keep strictly-above,
        # fill the boundary tie by ascending id
        part = np.argpartition(-utils, n - 1)
        thresh = utils[part[n - 1]]
        above = np.flatnonzero(utils > thresh)
        tied = np.flatnonzero(utils == thresh)
        need = n - above.size
        tied_sorted = tied[np.argsort(ids[tied], kind="stable")]
        chosen = np.concatenate([above, tied_sorted[:need]])
    else:
        chosen = np.arange(len(recs))
    order = np.lexsort((ids[chosen], -utils[chosen]))
    return SelectionManifest(ids[chosen[order]], r, n, config_fingerprint, 0.0)


def drift_diagnostics(records) -> DriftReport:
    """Soft-distribution drift of relevance reweighting.

    q~ is the normalized base weight alignment*learnability; q multiplies
    in w_R. Records with non-positive base weight carry no distribution
    mass and are excluded (counted); the KL bound <= 1 nat is exact
    because the density ratio w_R / E[w_R] is confined to [1/e, e].
    """
    base = []
    wr = []
    excluded = 0
    for rec in records:
        b = rec.alignment * rec.learnability
        if b > 0.0 and np.isfinite(b):
            base.append(b)
            wr.append(rec.relevance)
        else:
            excluded += 1
    if not base:
        raise DegenerateDistribution(
            "no record has positive alignment*learnability mass"
        )
    base = np.array(base)
    wr = np.array(wr)
    q_tilde = base / base.sum()
    q = base * wr
    q = q / q.sum()
    kl = float(np.sum(q * np.log(q / q_tilde)))
    mean_wr = float(q_tilde @ wr)
    ratios = wr / mean_wr
    report = DriftReport(
        kl=kl,
        ratio_min=float(ratios.min()),
        ratio_max=float(ratios.max()),
        n_used=int(base.size),
        n_excluded=excluded,
    )
    assert report.kl <= 1.0 + 1e-9, "relevance drift exceeded the 1-nat bound"
    return report


def selection_overlap(records, r: float) -> float:
    """Hard-truncation counterpart of the soft drift report: fraction of
    the top-n by utility shared with the top-n by base weight alone."""
    recs = list(records)
    with_wr = utility_and_select(recs, r)
    stripped = [
        ScoreRecord(
            rec.id,
            rec.alignment,
            rec.learnability,
            1.0,
            rec.alignment * rec.learnability,
            rec.batch_fingerprint,
        )
        for rec in recs
    ]
    without_wr = utility_and_select(stripped, r)
    if with_wr.n == 0:
        return 1.0
    return len(set(with_wr.retained.tolist()) & set(without_wr.retained.tolist())) / with_wr.n
