"""Johnson-Lindenstrauss transforms compressing P-dim subspace gradients
to k dims: CountSketch, sparse signed projection, and SRHT.

An operator is fully determined by its SketchSpec; vectors sketched under
different specs carry different fingerprints and refuse to combine. The
projection is never materialized on the apply path — CountSketch and the
sparse map live as sparse matrices (P nonzeros resp. s·P), SRHT as a
fast Walsh-Hadamard recursion over a zero-padded power-of-two length.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse as sp

from .errors import ConfigError, ShapeError, SketchMismatch
from .numerics import substream

KINDS = ("countsketch", "sparse-signed", "srht")

# sketch_matrix materializes a P×k slab; keep it to test-path sizes
_MATERIALIZE_LIMIT = 1 << 24


@dataclass(frozen=True)
class SketchSpec:
    kind: str
    k: int
    input_dim: int
    seed: int
    sparsity_s: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown sketch kind {self.kind!r}, expected one of {KINDS}")
        if self.input_dim < 1:
            raise ConfigError(f"sketch input_dim must be >= 1, got {self.input_dim}")
        if not 0 < self.k <= self.input_dim:
            raise ConfigError(
                f"sketch k must satisfy 0 < k <= input_dim={self.input_dim}, got {self.k}"
            )
        if self.sparsity_s < 1:
            raise ConfigError(f"sparsity_s must be >= 1, got {self.sparsity_s}")
        if self.kind == "sparse-signed" and self.sparsity_s > self.k:
            raise ConfigError(
                f"sparse-signed needs sparsity_s <= k, got s={self.sparsity_s} k={self.k}"
            )

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(
            f"{self.kind}|{self.k}|{self.input_dim}|{self.seed}|{self.sparsity_s}".encode()
        )
        return h.hexdigest()


@dataclass
class SketchedVector:
    data: np.ndarray
    spec_fingerprint: str

    @property
    def k(self) -> int:
        return int(self.data.shape[0])


def inner(a: SketchedVector, b: SketchedVector) -> float:
    """Fingerprint-checked inner product of two sketched vectors."""
    if a.spec_fingerprint != b.spec_fingerprint:
        raise SketchMismatch(
            f"sketched vectors come from different operators "
            f"({a.spec_fingerprint} vs {b.spec_fingerprint})"
        )
    return float(a.data @ b.data)


def _next_pow2(n: int) -> int:
    m = 1
    while m < n:
        m <<= 1
    return m


def _rng_for(spec: SketchSpec) -> np.random.Generator:
    return substream(spec.seed, "sketch", spec.kind, spec.k, spec.input_dim, spec.sparsity_s)


def _distinct_rows(rng: np.random.Generator, P: int, s: int, k: int) -> np.ndarray:
    """s distinct bucket rows per input coordinate, vectorized."""
    if s * 4 >= k:
        # dense-ish regime: take prefixes of per-column permutations
        grid = np.broadcast_to(np.arange(k), (P, k)).copy()
        return rng.permuted(grid, axis=1)[:, :s]
    rows = rng.integers(0, k, size=(P, s))
    while True:
        srt = np.sort(rows, axis=1)
        dup = np.any(srt[:, 1:] == srt[:, :-1], axis=1)
        if not dup.any():
            return rows
        rows[dup] = rng.integers(0, k, size=(int(dup.sum()), s))


class _Operator:
    """Realized projection for one spec; cached, immutable once built."""

    def __init__(self, spec: SketchSpec):
        self.spec = spec
        P, k = spec.input_dim, spec.k
        rng = _rng_for(spec)
        if spec.kind == "countsketch":
            buckets = rng.integers(0, k, size=P)
            signs = rng.integers(0, 2, size=P) * 2.0 - 1.0
            self.mat = sp.csr_matrix((signs, (buckets, np.arange(P))), shape=(k, P))
            self.mat_t = sp.csr_matrix(self.mat.T)
        elif spec.kind == "sparse-signed":
            s = spec.sparsity_s
            rows = _distinct_rows(rng, P, s, k)
            signs = (rng.integers(0, 2, size=(P, s)) * 2.0 - 1.0) / np.sqrt(s)
            cols = np.repeat(np.arange(P), s)
            self.mat = sp.csr_matrix(
                (signs.ravel(), (rows.ravel(), cols)), shape=(k, P)
            )
            self.mat_t = sp.csr_matrix(self.mat.T)
        else:  # srht
            m = _next_pow2(P)
            self.m = m
            self.dsigns = rng.integers(0, 2, size=m) * 2.0 - 1.0
            self.rows = np.sort(rng.permutation(m)[:k])
            self.mat = None

    def apply_many(self, V: np.ndarray) -> np.ndarray:
        """Project rows of V: (n, P) -> (n, k)."""
        if self.mat is not None:
            return np.asarray((self.mat @ V.T).T)
        P, k = self.spec.input_dim, self.spec.k
        padded = np.zeros((V.shape[0], self.m))
        padded[:, :P] = V
        padded *= self.dsigns
        return fwht(padded)[:, self.rows] / np.sqrt(k)

    def apply_t_many(self, W: np.ndarray) -> np.ndarray:
        """Adjoint on rows of W: (n, k) -> (n, P)."""
        if self.mat is not None:
            return np.asarray((self.mat_t @ W.T).T)
        P, k = self.spec.input_dim, self.spec.k
        padded = np.zeros((W.shape[0], self.m))
        padded[:, self.rows] = W
        back = fwht(padded) * self.dsigns
        return back[:, :P] / np.sqrt(k)


def fwht(x: np.ndarray) -> np.ndarray:
    """Unnormalized fast Walsh-Hadamard transform over the last axis
    (length must be a power of two)."""
    m = x.shape[-1]
    if m & (m - 1):
        raise ShapeError(f"fwht length must be a power of two, got {m}")
    lead = x.shape[:-1]
    y = x.astype(np.float64, copy=True)
    h = 1
    while h < m:
        y = y.reshape(*lead, m // (2 * h), 2, h)
        a = y[..., 0, :] + y[..., 1, :]
        b = y[..., 0, :] - y[..., 1, :]
        y = np.stack([a, b], axis=-2)
        h *= 2
    return y.reshape(*lead, m)


@lru_cache(maxsize=32)
def _operator(spec: SketchSpec) -> _Operator:
    return _Operator(spec)


def apply(spec: SketchSpec, v: np.ndarray) -> SketchedVector:
    """Sketch one vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != spec.input_dim:
        raise ShapeError(
            f"sketch input has shape {v.shape}, spec expects ({spec.input_dim},)"
        )
    out = _operator(spec).apply_many(v[None, :])[0]
    return SketchedVector(out, spec.fingerprint())


def apply_many(spec: SketchSpec, V: np.ndarray) -> np.ndarray:
    """Sketch rows of a matrix: (n, P) -> (n, k) raw array (one fingerprint)."""
    V = np.asarray(V, dtype=np.float64)
    if V.ndim != 2 or V.shape[1] != spec.input_dim:
        raise ShapeError(
            f"sketch batch has shape {V.shape}, spec expects (n, {spec.input_dim})"
        )
    return _operator(spec).apply_many(V)


def materialize(spec: SketchSpec) -> np.ndarray:
    """Dense k×P projection matrix (oracle/test path only)."""
    P, k = spec.input_dim, spec.k
    if P * k > _MATERIALIZE_LIMIT:
        raise ConfigError(
            f"refusing to materialize a {k}x{P} projection (limit {_MATERIALIZE_LIMIT} entries)"
        )
    op = _operator(spec)
    if op.mat is not None:
        return op.mat.toarray()
    return op.apply_many(np.eye(P)).T.copy()


def sketch_matrix(spec: SketchSpec, M_apply) -> np.ndarray:
    """k×k compression Π M Πᵀ of a symmetric P×P operator.

    M_apply is a square ndarray or a matrix-free apply; the P×k adjoint
    slab is materialized, so this is a test/oracle path, not for
    production P.
    """
    P, k = spec.input_dim, spec.k
    if P * k > _MATERIALIZE_LIMIT:
        raise ConfigError(
            f"sketch_matrix materializes a {P}x{k} slab (limit {_MATERIALIZE_LIMIT} entries)"
        )
    op = _operator(spec)
    Rt = op.apply_t_many(np.eye(k))  # rows: Πᵀ e_i, shape (k, P)
    if callable(M_apply):
        MRt = np.stack([np.asarray(M_apply(row), dtype=np.float64) for row in Rt])
    else:
        M = np.asarray(M_apply, dtype=np.float64)
        if M.shape != (P, P):
            raise ShapeError(f"operator matrix is {M.shape}, spec expects ({P}, {P})")
        MRt = Rt @ M.T
    if MRt.shape != (k, P):
        raise ShapeError(f"matrix apply returned wrong shape {MRt.shape}")
    out = op.apply_many(MRt).T  # (k, k): Π (M Πᵀ)
    asym = float(np.max(np.abs(out - out.T))) if k else 0.0
    scale = float(np.max(np.abs(out))) if k else 0.0
    if asym > 1e-12 * max(scale, 1.0):
        raise ShapeError(f"sketched matrix asymmetry {asym:.3e} exceeds tolerance")
    return 0.5 * (out + out.T)


def gram(spec: SketchSpec) -> np.ndarray:
    """Π Πᵀ, the k×k Gram of the projection (exact ridge path)."""
    op = _operator(spec)
    if op.mat is not None:
        return np.asarray((op.mat @ op.mat.T).toarray())
    # SRHT rows stay mutually orthogonal: Π Πᵀ = (m/k)·S (H Hᵀ/m) Sᵀ = (m/k) I
    return (op.m / spec.k) * np.eye(spec.k)
