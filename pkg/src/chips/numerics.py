"""Dense float64 kernels: conjugate gradient, symmetrized eigen bounds,
and deterministic counter-based random substreams.

Everything here is stateless and safe to call from worker processes. All
math is float64 regardless of what the on-disk formats store; the
1e-8-class tolerances used by the verification harness are unreachable in
float32.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalBreakdown, ShapeError

Apply = Callable[[np.ndarray], np.ndarray]


def ensure_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericalBreakdown(f"non-finite values in {what}")
    return arr


@dataclass
class CgReport:
    """Convergence record for one cg_solve call."""

    iterations: int
    residual: float
    converged: bool
    residual_history: list[float] = field(default_factory=list)


def _as_apply(A: np.ndarray | Apply, dim: int) -> Apply:
    if callable(A):
        return A
    mat = np.asarray(A, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"system matrix must be square, got {mat.shape}")
    if mat.shape[0] != dim:
        raise ShapeError(f"system is {mat.shape[0]}-dim but rhs is {dim}-dim")
    return lambda v: mat @ v


def cg_solve(
    A: np.ndarray | Apply,
    b: np.ndarray,
    iters: int,
    tol: float,
    jacobi_diag: np.ndarray | None = None,
) -> tuple[np.ndarray, CgReport]:
    """Solve A x = b for symmetric positive definite A.

    Stops at ``iters`` iterations or residual norm <= ``tol``, whichever
    first. ``A`` is either a square ndarray or a matrix-free apply.
    ``jacobi_diag``, when given, preconditions with 1/diag.

    Returns the best iterate seen as measured by residual norm — plain CG
    residuals are not monotone, the A-norm error is — so the reported
    residual_history is non-increasing by construction.
    """
    if iters < 1:
        raise ShapeError(f"iters must be >= 1, got {iters}")
    if not tol > 0:
        raise ShapeError(f"tol must be > 0, got {tol}")
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 1:
        raise ShapeError(f"rhs must be a vector, got ndim {b.ndim}")
    n = b.shape[0]
    apply_A = _as_apply(A, n)

    if jacobi_diag is not None:
        dg = np.asarray(jacobi_diag, dtype=np.float64)
        if dg.shape != (n,):
            raise ShapeError(f"jacobi diagonal shape {dg.shape} != ({n},)")
        if np.any(dg <= 0):
            raise NumericalBreakdown("jacobi diagonal has non-positive entries")
        precond = lambda r: r / dg
    else:
        precond = lambda r: r

    x = np.zeros(n)
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = float(r @ z)

    best_x = x
    best_rn = float(np.linalg.norm(r))
    history = [best_rn]
    used = 0
    for _ in range(iters):
        if best_rn <= tol:
            break
        Ap = np.asarray(apply_A(p), dtype=np.float64)
        if Ap.shape != (n,):
            raise ShapeError(f"operator returned shape {Ap.shape}, expected ({n},)")
        ensure_finite(Ap, "cg operator output")
        pAp = float(p @ Ap)
        if pAp == 0.0:
            break  # p in the null space only if r = 0 already
        alpha = rz / pAp
        if not np.isfinite(alpha):
            raise NumericalBreakdown("cg step size is non-finite")
        x = x + alpha * p
        r = r - alpha * Ap
        ensure_finite(r, "cg residual")
        used += 1
        rn = float(np.linalg.norm(r))
        if rn < best_rn:
            best_rn = rn
            best_x = x
        history.append(best_rn)
        assert history[-1] <= history[-2], "residual trajectory must not increase"
        if best_rn <= tol:
            break
        z = precond(r)
        rz_new = float(r @ z)
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p

    return best_x, CgReport(used, best_rn, best_rn <= tol, history)


def rayleigh_min_sym(B: np.ndarray) -> float:
    """Smallest eigenvalue of (B + B^T)/2."""
    B = np.asarray(B, dtype=np.float64)
    if B.ndim != 2 or B.shape[0] != B.shape[1]:
        raise ShapeError(f"rayleigh_min_sym needs a square matrix, got {B.shape}")
    sym = 0.5 * (B + B.T)
    return float(np.linalg.eigvalsh(sym)[0])


def spectral_norm(B: np.ndarray) -> float:
    """Largest singular value (2-norm)."""
    B = np.asarray(B, dtype=np.float64)
    return float(np.linalg.norm(B, 2))


def substream(seed: int, *labels: str | int) -> np.random.Generator:
    """Deterministic, platform-independent substream of a master seed.

    Counter-based (Philox) so any worker can derive its own stream from
    (seed, label...) without coordination; identical arguments give
    bit-identical streams.
    """
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for lab in labels:
        h.update(b"\x1f")
        h.update(str(lab).encode("utf-8"))
    key = int.from_bytes(h.digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


def sym_eig_sqrt(S: np.ndarray, floor: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """(S^{1/2}, S^{-1/2}) of a symmetric PSD matrix, eigenvalues floored."""
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"matrix square root needs a square matrix, got {S.shape}")
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    w = np.maximum(w, floor)
    root = V @ np.diag(np.sqrt(w)) @ V.T
    inv_root = V @ np.diag(1.0 / np.sqrt(w)) @ V.T
    return root, inv_root
