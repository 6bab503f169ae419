"""Dual-encoder end-point geometry and analytic per-sample gradients.

The trainable subspace is (W_v, W_t, tau_log): two projection heads over
frozen backbone features plus a log-parameterized temperature
tau = exp(tau_log), so tau stays positive by construction. Per-sample
gradients are flattened into one float64 vector with layout

    [ vec(dW_v) row-major | vec(dW_t) row-major | d tau_log ]

of dimension P = d_v*d + d_t*d + 1.

Gradient semantics: the gradient of sample i differentiates sample i's
symmetric cross-entropy terms only, with the whole batch held as the
negative set — so every score depends on a fixed, seeded batching policy
(the pipeline owns that policy).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DegenerateEmbedding, ShapeError
from .numerics import ensure_finite

# below this, a projected vector has no direction to normalize
_NORM_FLOOR = np.finfo(np.float64).tiny

# chunk size bounding the B*B*d intermediate in batch_gradients
_GRAD_CHUNK = 64


@dataclass
class EndpointParams:
    W_v: np.ndarray  # (d_v, d)
    W_t: np.ndarray  # (d_t, d)
    tau_log: float

    def __post_init__(self):
        self.W_v = np.asarray(self.W_v, dtype=np.float64)
        self.W_t = np.asarray(self.W_t, dtype=np.float64)
        self.tau_log = float(self.tau_log)
        if self.W_v.ndim != 2 or self.W_t.ndim != 2:
            raise ShapeError("projection heads must be 2-d matrices")
        if self.W_v.shape[1] != self.W_t.shape[1]:
            raise ShapeError(
                f"heads disagree on embedding dim: {self.W_v.shape} vs {self.W_t.shape}"
            )
        ensure_finite(self.W_v, "W_v")
        ensure_finite(self.W_t, "W_t")
        if not np.isfinite(self.tau_log):
            raise ShapeError(f"tau_log must be finite, got {self.tau_log}")

    @property
    def d_v(self) -> int:
        return self.W_v.shape[0]

    @property
    def d_t(self) -> int:
        return self.W_t.shape[0]

    @property
    def d(self) -> int:
        return self.W_v.shape[1]

    @property
    def tau(self) -> float:
        return float(np.exp(self.tau_log))


def param_count(params: EndpointParams) -> int:
    return params.d_v * params.d + params.d_t * params.d + 1


def params_to_vector(params: EndpointParams) -> np.ndarray:
    return np.concatenate(
        [params.W_v.ravel(), params.W_t.ravel(), [params.tau_log]]
    )


def vector_to_params(vec: np.ndarray, d_v: int, d_t: int, d: int) -> EndpointParams:
    vec = np.asarray(vec, dtype=np.float64)
    expect = d_v * d + d_t * d + 1
    if vec.shape != (expect,):
        raise ShapeError(f"param vector has shape {vec.shape}, expected ({expect},)")
    W_v = vec[: d_v * d].reshape(d_v, d)
    W_t = vec[d_v * d : d_v * d + d_t * d].reshape(d_t, d)
    return EndpointParams(W_v, W_t, float(vec[-1]))


@dataclass
class FeatureBatch:
    ids: np.ndarray  # (B,) uint64
    H: np.ndarray  # (B, d_v)
    T: np.ndarray  # (B, d_t)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.uint64)
        self.H = np.asarray(self.H, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        if self.H.ndim != 2 or self.T.ndim != 2 or self.ids.ndim != 1:
            raise ShapeError("feature batch needs 1-d ids and 2-d feature blocks")
        if not (len(self.ids) == len(self.H) == len(self.T)):
            raise ShapeError(
                f"row counts differ: ids={len(self.ids)} H={len(self.H)} T={len(self.T)}"
            )
        if len(self.ids) < 1:
            raise ShapeError("feature batch must hold at least one sample")
        ensure_finite(self.H, "image features")
        ensure_finite(self.T, "text features")

    @property
    def size(self) -> int:
        return len(self.ids)


@dataclass
class BatchGeometry:
    ids: np.ndarray
    Xhat: np.ndarray  # (B, d) unit rows
    Yhat: np.ndarray  # (B, d) unit rows
    S: np.ndarray  # (B, B) logits tau * Xhat Yhat^T
    P_i2t: np.ndarray  # row softmax of S
    P_t2i: np.ndarray  # column softmax of S
    norms_v: np.ndarray  # (B,) pre-normalization magnitudes
    norms_t: np.ndarray
    tau: float

    @property
    def size(self) -> int:
        return len(self.ids)


def _project_normalize(
    W: np.ndarray, feats: np.ndarray, ids: np.ndarray, side: str
) -> tuple[np.ndarray, np.ndarray]:
    raw = feats @ W
    norms = np.linalg.norm(raw, axis=1)
    bad = np.flatnonzero(norms < _NORM_FLOOR)
    if bad.size:
        raise DegenerateEmbedding(
            f"sample id {int(ids[bad[0]])} projects to the zero vector on the {side} side"
        )
    return raw / norms[:, None], norms


def forward(params: EndpointParams, batch: FeatureBatch) -> BatchGeometry:
    if batch.H.shape[1] != params.d_v:
        raise ShapeError(
            f"image features are {batch.H.shape[1]}-dim, W_v expects {params.d_v}"
        )
    if batch.T.shape[1] != params.d_t:
        raise ShapeError(
            f"text features are {batch.T.shape[1]}-dim, W_t expects {params.d_t}"
        )
    Xhat, norms_v = _project_normalize(params.W_v, batch.H, batch.ids, "image")
    Yhat, norms_t = _project_normalize(params.W_t, batch.T, batch.ids, "text")
    tau = params.tau
    S = tau * (Xhat @ Yhat.T)
    P_i2t = np.exp(S - logsumexp(S, axis=1, keepdims=True))
    P_t2i = np.exp(S - logsumexp(S, axis=0, keepdims=True))
    return BatchGeometry(batch.ids, Xhat, Yhat, S, P_i2t, P_t2i, norms_v, norms_t, tau)


def symmetric_infonce(geom: BatchGeometry) -> np.ndarray:
    """Per-sample losses l_i = 0.5*(CE(S[i,:], i) + CE(S[:,i], i))."""
    diag = np.diag(geom.S)
    lse_rows = logsumexp(geom.S, axis=1)
    lse_cols = logsumexp(geom.S, axis=0)
    return 0.5 * ((lse_rows - diag) + (lse_cols - diag))


def batch_gradients(params: EndpointParams, batch: FeatureBatch) -> np.ndarray:
    """(B, P) matrix of per-sample subspace gradients, rows aligned with ids."""
    geom = forward(params, batch)
    return gradients_from_geometry(params, batch, geom)


def _projection_gradients(
    geom: BatchGeometry, lo: int, hi: int
) -> tuple[np.ndarray, np.ndarray]:
    """d l_i / d x_a and d l_i / d y_b for samples i in [lo, hi).

    x_a, y_b are the pre-normalization head outputs; both slabs have shape
    (hi - lo, B, d).
    """
    tau = geom.tau
    eye = np.eye(geom.size)
    R = geom.P_i2t - eye  # R[i, b] = d(row-CE_i)/d s_ib * 2
    C = (geom.P_t2i - eye).T  # C[i, a] = d(col-CE_i)/d s_ai * 2
    A_rows = R @ geom.Yhat  # (B, d): sum_b R[i,b] yhat_b
    B_rows = C @ geom.Xhat  # (B, d): sum_a C[i,a] xhat_a

    n = hi - lo
    idx = np.arange(n)
    # d l_i / d xhat_a = (tau/2) * (delta_ia * A_rows[i] + C[i,a] * yhat_i)
    GXhat = 0.5 * tau * (C[lo:hi, :, None] * geom.Yhat[lo:hi, None, :])
    GXhat[idx, idx + lo] += 0.5 * tau * A_rows[lo:hi]
    # d l_i / d yhat_b = (tau/2) * (R[i,b] * xhat_i + delta_ib * B_rows[i])
    GYhat = 0.5 * tau * (R[lo:hi, :, None] * geom.Xhat[lo:hi, None, :])
    GYhat[idx, idx + lo] += 0.5 * tau * B_rows[lo:hi]

    # chain through x = |x| xhat: J = (I - xhat xhat^T)/|x|
    dots = np.einsum("iad,ad->ia", GXhat, geom.Xhat)
    GX = (GXhat - dots[:, :, None] * geom.Xhat[None, :, :]) / geom.norms_v[None, :, None]
    dots = np.einsum("ibd,bd->ib", GYhat, geom.Yhat)
    GY = (GYhat - dots[:, :, None] * geom.Yhat[None, :, :]) / geom.norms_t[None, :, None]
    return GX, GY


def _temperature_gradients(geom: BatchGeometry) -> np.ndarray:
    eye = np.eye(geom.size)
    R = geom.P_i2t - eye
    C = (geom.P_t2i - eye).T
    return 0.5 * (np.sum(R * geom.S, axis=1) + np.sum(C * geom.S.T, axis=1))


def gradients_from_geometry(
    params: EndpointParams, batch: FeatureBatch, geom: BatchGeometry
) -> np.ndarray:
    B = geom.size
    d = params.d
    P = param_count(params)
    out = np.empty((B, P))
    nv = d * params.d_v

    for lo in range(0, B, _GRAD_CHUNK):
        hi = min(lo + _GRAD_CHUNK, B)
        n = hi - lo
        GX, GY = _projection_gradients(geom, lo, hi)
        # x_a = W_v^T h_a: dW_v accumulates h_a (dl/dx_a)^T over the batch
        Wv_g = np.einsum("av,iad->ivd", batch.H, GX)
        Wt_g = np.einsum("bt,ibd->itd", batch.T, GY)

        out[lo:hi, :nv] = Wv_g.reshape(n, -1)
        out[lo:hi, nv : nv + d * params.d_t] = Wt_g.reshape(n, -1)
    out[:, -1] = _temperature_gradients(geom)
    ensure_finite(out, "per-sample gradients")
    return out


def head_input_gradients(
    params: EndpointParams, batch: FeatureBatch
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradients w.r.t. the head inputs: d l_i / d h_a, d l_i / d t_b.

    Returns (B, B, d_v) and (B, B, d_t) arrays; entry [i, a] is sample i's
    loss gradient w.r.t. row a of the feature block. Materializes the full
    B*B*max(d_v, d_t) tensors — meant for small diagnostic batches, not the
    scoring path.
    """
    geom = forward(params, batch)
    GX, GY = _projection_gradients(geom, 0, geom.size)
    GH = GX @ params.W_v.T  # d x_a / d h_a = W_v^T
    GT = GY @ params.W_t.T
    ensure_finite(GH, "head-input gradients (image)")
    ensure_finite(GT, "head-input gradients (text)")
    return GH, GT


def per_sample_gradient(params: EndpointParams, batch: FeatureBatch, i: int) -> np.ndarray:
    """Gradient of sample i's loss with the batch as negative context."""
    if not 0 <= i < batch.size:
        raise ShapeError(f"sample index {i} out of range for batch of {batch.size}")
    return batch_gradients(params, batch)[i]


def total_gradient(params: EndpointParams, batch: FeatureBatch) -> np.ndarray:
    """Gradient of the summed batch loss (= sum of per-sample gradients)."""
    return batch_gradients(params, batch).sum(axis=0)


def eval_mean_gradient(
    params: EndpointParams,
    eval_batches: Iterable[FeatureBatch],
    ema_decay: float,
) -> np.ndarray:
    """Evaluation mean gradient u via a normalized, batch-size-weighted EMA.

    Batch t (size B_t, mean gradient m_t) enters with weight B_t while all
    prior weight is discounted by (1 - decay); at decay 0 this is exactly
    the plain mean over every evaluation sample regardless of batching.
    """
    if not 0.0 <= ema_decay < 1.0:
        raise ConfigError(f"ema_decay must lie in [0, 1), got {ema_decay}")
    u = None
    weight = 0.0
    for batch in eval_batches:
        m = batch_gradients(params, batch).mean(axis=0)
        if u is None:
            u, weight = m, float(batch.size)
            continue
        kept = (1.0 - ema_decay) * weight
        weight = kept + batch.size
        u = (kept * u + batch.size * m) / weight
    if u is None:
        raise ConfigError("eval stream is empty; u requires at least one batch")
    return u
