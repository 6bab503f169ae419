"""Streaming second-moment estimation of the InfoNCE curvature surrogate.

Accumulates sufficient statistics (sum of g g^T, sum of g, weight) over
per-sample gradients — exact-P storage for small subspaces, sketched
k-space for realistic ones — and recovers

    Phi_pos = (1/N) sum_i g_i g_i^T
    Phi_neg = 1/(N(N-1)) sum_{i != j} g_i g_j^T

with the cross moment obtained from the rank-one identity
sum_{i!=j} g_i g_j^T = (sum g)(sum g)^T − sum g g^T, never an O(N^2)
pass. The pair set is the whole accumulated pool (cross-batch pairs
included), which is what makes accumulation exactly invariant to how the
stream was split into batches.

A decay in (0,1) discounts the sufficient statistics once per batch;
the default 0 is the plain pooled average. Partial accumulators merge
associatively only at decay 0 (with decay the result would depend on
merge order).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    ConfigError,
    IndefiniteSurrogate,
    InsufficientBatch,
    ShapeError,
    SketchMismatch,
)
from .numerics import CgReport, cg_solve, ensure_finite
from .sketch import SketchedVector

MODES = ("exact-P", "sketched-k")
RIDGE_MODES = ("identity", "gram")


@dataclass
class MomentAccumulator:
    mode: str
    dim: int
    ema_decay: float = 0.0
    cross: bool = True  # False: self moment only, single-sample batches allowed
    sum_self: np.ndarray = field(init=False)
    sum_vec: np.ndarray = field(init=False)
    weight: float = field(init=False, default=0.0)
    count: int = field(init=False, default=0)
    fingerprint: str | None = field(init=False, default=None)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown accumulator mode {self.mode!r}")
        if self.dim < 1:
            raise ConfigError(f"accumulator dim must be >= 1, got {self.dim}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        self.sum_self = np.zeros((self.dim, self.dim))
        self.sum_vec = np.zeros(self.dim)


def _coerce_batch(
    acc: MomentAccumulator,
    batch: Sequence[np.ndarray] | Sequence[SketchedVector] | np.ndarray,
) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        if acc.mode != "exact-P":
            raise SketchMismatch(
                "raw gradient arrays cannot enter a sketched accumulator"
            )
        G = np.asarray(batch, dtype=np.float64)
        if G.ndim != 2:
            raise ShapeError(f"gradient block must be 2-d, got ndim {G.ndim}")
        return G
    rows = []
    for g in batch:
        if isinstance(g, SketchedVector):
            if acc.mode != "sketched-k":
                raise SketchMismatch("sketched vector fed to an exact accumulator")
            if acc.fingerprint is None:
                acc.fingerprint = g.spec_fingerprint
            elif acc.fingerprint != g.spec_fingerprint:
                raise SketchMismatch(
                    f"accumulator is bound to sketch {acc.fingerprint}, "
                    f"got {g.spec_fingerprint}"
                )
            rows.append(g.data)
        else:
            if acc.mode != "exact-P":
                raise SketchMismatch(
                    "raw gradient arrays cannot enter a sketched accumulator"
                )
            rows.append(np.asarray(g, dtype=np.float64))
    if not rows:
        raise InsufficientBatch("empty gradient batch")
    return np.stack(rows)


def accumulate(
    acc: MomentAccumulator,
    batch: Sequence[np.ndarray] | Sequence[SketchedVector] | np.ndarray,
) -> MomentAccumulator:
    """Fold one batch of gradients into the sufficient statistics."""
    G = _coerce_batch(acc, batch)
    B = G.shape[0]
    if G.shape[1] != acc.dim:
        raise ShapeError(f"gradients are {G.shape[1]}-dim, accumulator is {acc.dim}-dim")
    if acc.cross and B < 2:
        raise InsufficientBatch(
            "cross-moment accumulation needs at least 2 gradients per batch"
        )
    ensure_finite(G, "gradient batch")
    keep = 1.0 - acc.ema_decay
    acc.sum_self = keep * acc.sum_self + G.T @ G
    acc.sum_vec = keep * acc.sum_vec + G.sum(axis=0)
    acc.weight = keep * acc.weight + B
    acc.count += B
    return acc


def merge(a: MomentAccumulator, b: MomentAccumulator) -> MomentAccumulator:
    """Combine partial accumulators from disjoint shards (decay 0 only)."""
    if a.ema_decay != 0.0 or b.ema_decay != 0.0:
        raise ConfigError("partial accumulators merge only at ema_decay 0")
    if a.mode != b.mode or a.dim != b.dim or a.cross != b.cross:
        raise ShapeError("cannot merge accumulators with different shapes or modes")
    if a.fingerprint is not None and b.fingerprint is not None:
        if a.fingerprint != b.fingerprint:
            raise SketchMismatch("cannot merge accumulators from different sketches")
    out = MomentAccumulator(a.mode, a.dim, 0.0, a.cross)
    out.sum_self = a.sum_self + b.sum_self
    out.sum_vec = a.sum_vec + b.sum_vec
    out.weight = a.weight + b.weight
    out.count = a.count + b.count
    out.fingerprint = a.fingerprint or b.fingerprint
    return out


def moments(acc: MomentAccumulator) -> tuple[np.ndarray, np.ndarray]:
    """(Phi_pos, Phi_neg) recovered from the sufficient statistics."""
    if acc.weight < 2.0 - 1e-12:
        raise InsufficientBatch(
            f"cross moment needs effective weight >= 2, have {acc.weight}"
        )
    W = acc.weight
    phi_pos = acc.sum_self / W
    outer = np.outer(acc.sum_vec, acc.sum_vec)
    phi_neg = (outer - acc.sum_self) / (W * (W - 1.0))
    return phi_pos, phi_neg


def self_moment(acc: MomentAccumulator) -> np.ndarray:
    """Phi_pos alone (usable by self-only accumulators)."""
    if acc.weight <= 0.0:
        raise InsufficientBatch("self moment needs at least one gradient")
    return acc.sum_self / acc.weight


@dataclass
class CurvatureSurrogate:
    alpha: float
    lambda_ridge: float
    M: np.ndarray
    ridge_mode: str = "identity"
    fingerprint: str | None = None
    precond_dir: np.ndarray | None = None
    cg_report: CgReport | None = None

    @property
    def dim(self) -> int:
        return self.M.shape[0]


def default_ridge(H: np.ndarray) -> float:
    """Trace-scaled ridge 1e-4 * tr(H)/dim, floored to stay positive."""
    dim = H.shape[0]
    lam = 1e-4 * float(np.trace(H)) / dim
    if lam <= 0.0:
        diag_mass = float(np.abs(np.diag(H)).sum()) / dim
        lam = 1e-4 * diag_mass if diag_mass > 0.0 else 1e-4
    return lam


def build_surrogate(
    acc: MomentAccumulator,
    alpha: float,
    lambda_ridge: float | None = None,
    ridge_mode: str = "identity",
    gram: np.ndarray | None = None,
    tol: float = 1e-10,
) -> CurvatureSurrogate:
    """M = (1-alpha) Phi_pos + alpha Phi_neg + lambda * ridge.

    An empty accumulator is allowed and yields the pure ridge M = lambda*I
    (the identity-preconditioner escape hatch). lambda_ridge None picks the
    trace-scaled default. ridge_mode 'gram' adds lambda * (Pi Pi^T) instead
    of lambda * I (exact sketched-ridge path; caller supplies the Gram).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if ridge_mode not in RIDGE_MODES:
        raise ConfigError(f"unknown ridge_mode {ridge_mode!r}")
    if ridge_mode == "gram" and gram is None:
        raise ConfigError("ridge_mode 'gram' needs the projection Gram matrix")

    cross_norm = 0.0
    if acc.count == 0:
        H = np.zeros((acc.dim, acc.dim))
    elif alpha == 0.0:
        H = self_moment(acc)  # self moment alone; works for cross=False too
    else:
        phi_pos, phi_neg = moments(acc)
        H = (1.0 - alpha) * phi_pos + alpha * phi_neg
        cross_norm = float(np.linalg.norm(alpha * phi_neg, 2))

    if lambda_ridge is None:
        lambda_ridge = default_ridge(H) if acc.count else 1e-4
    if not lambda_ridge > 0.0:
        raise ConfigError(f"lambda_ridge must be > 0, got {lambda_ridge}")

    if ridge_mode == "gram":
        if gram.shape != H.shape:
            raise ShapeError(f"gram shape {gram.shape} != surrogate shape {H.shape}")
        M = H + lambda_ridge * gram
    else:
        M = H + lambda_ridge * np.eye(acc.dim)
    M = 0.5 * (M + M.T)

    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        lam_min = float(np.linalg.eigvalsh(M)[0])
        if lam_min < -tol:
            suggested = lambda_ridge + abs(lam_min) * 1.1
            raise IndefiniteSurrogate(
                f"surrogate is indefinite: lambda_min = {lam_min:.6e} "
                f"(eigenvalues are bounded below by lambda - |alpha*Phi_neg| = "
                f"{lambda_ridge - cross_norm:.6e}); retry with lambda >= {suggested:.6e}"
            )
    return CurvatureSurrogate(
        alpha=alpha,
        lambda_ridge=lambda_ridge,
        M=M,
        ridge_mode=ridge_mode,
        fingerprint=acc.fingerprint,
    )


def solve_direction(
    surr: CurvatureSurrogate,
    u: np.ndarray | SketchedVector,
    iters: int,
    tol: float,
    jacobi: bool = False,
) -> np.ndarray | SketchedVector:
    """Solve M dir = u once; the direction is reused for every sample score."""
    if isinstance(u, SketchedVector):
        if surr.fingerprint is not None and surr.fingerprint != u.spec_fingerprint:
            raise SketchMismatch(
                f"surrogate is bound to sketch {surr.fingerprint}, "
                f"u carries {u.spec_fingerprint}"
            )
        rhs = u.data
    else:
        if surr.fingerprint is not None:
            raise SketchMismatch("sketched surrogate needs a sketched u")
        rhs = np.asarray(u, dtype=np.float64)
    diag = np.diag(surr.M).copy() if jacobi else None
    direction, report = cg_solve(surr.M, rhs, iters=iters, tol=tol, jacobi_diag=diag)
    surr.precond_dir = direction
    surr.cg_report = report
    if isinstance(u, SketchedVector):
        return SketchedVector(direction, u.spec_fingerprint)
    return direction
