"""Dense real matrix kernels: Jacobi SVD, polar retraction, sign alignment.

Matrices are plain float64 numpy arrays. Every function here is pure.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_SWEEPS = 100
JACOBI_TOL = 1e-12
POLAR_RANK_TOL = 1e-12


class NumericalFailure(RuntimeError):
    """Raised when an iterative kernel does not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


class DegeneratePolarError(ValueError):
    """The nearest orthogonal matrix is not unique for a rank-deficient input."""


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _jacobi_tall(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-sided (Hestenes) Jacobi on a tall matrix.

    Returns (g, v) with a @ v = g, v orthogonal and the columns of g
    mutually orthogonal to within JACOBI_TOL in cosine.
    """
    g = a.copy()
    n = g.shape[1]
    v = np.eye(n)
    scale = float(np.sum(g * g))
    # columns this small carry no direction worth rotating
    floor = (np.finfo(np.float64).eps ** 2) * scale

    off = 0.0
    for _ in range(MAX_SWEEPS):
        off = 0.0
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                gp = g[:, p]
                gq = g[:, q]
                alpha = gp @ gp
                beta = gq @ gq
                gamma = gp @ gq
                if alpha <= floor or beta <= floor or gamma == 0.0:
                    continue
                cosine = abs(gamma) / (np.sqrt(alpha) * np.sqrt(beta))
                off = max(off, cosine)
                if cosine <= JACOBI_TOL:
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                new_p = c * gp - s * gq
                new_q = s * gp + c * gq
                g[:, p] = new_p
                g[:, q] = new_q
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
                rotated = True
        if not rotated:
            return g, v
    raise NumericalFailure(f"Jacobi SVD did not converge in {MAX_SWEEPS} sweeps", off)


def _complete_orthonormal(q: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of q not flagged in `keep` by an orthonormal completion."""
    m, r = q.shape
    good = q[:, keep]
    out = q.copy()
    missing = np.flatnonzero(~keep)
    if missing.size == 0:
        return out
    basis = [good[:, j] for j in range(good.shape[1])]
    filled = []
    # Gram-Schmidt (twice) over the standard basis, in index order for determinism
    for e in range(m):
        if len(filled) == missing.size:
            break
        x = np.zeros(m)
        x[e] = 1.0
        for _ in range(2):
            for b in basis:
                x -= (b @ x) * b
        nx = np.linalg.norm(x)
        if nx > 1e-8:
            x /= nx
            basis.append(x)
            filled.append(x)
    for col, vec in zip(missing, filled):
        out[:, col] = vec
    return out


def _normalize_columns(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sigma = np.sqrt(np.sum(g * g, axis=0))
    smax = sigma.max() if sigma.size else 0.0
    keep = sigma > max(smax, 1.0) * 1e3 * np.finfo(np.float64).eps * max(g.shape)
    q = np.zeros_like(g)
    q[:, keep] = g[:, keep] / sigma[keep]
    return _complete_orthonormal(q, keep), sigma


def svd(m) -> SvdResult:
    """Thin SVD with r = min(rows, cols) via one-sided Jacobi.

    Singular values are sorted descending. Each column of u has its entry of
    largest magnitude made positive (first such row on ties), with the
    matching row of vt flipped, so the output is reproducible bit for bit.
    Columns of u belonging to numerically zero singular values are filled
    with an orthonormal completion.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    # work at unit scale so squared column norms neither underflow nor overflow
    amax = float(np.max(np.abs(a)))
    if amax > 0:
        a = a / amax
    if rows >= cols:
        g, v = _jacobi_tall(a)
        u, sigma = _normalize_columns(g)
        vt = v.T
    else:
        # a.T = q diag(s) w.T  =>  a = w diag(s) q.T
        g, w = _jacobi_tall(a.T)
        q, sigma = _normalize_columns(g)
        u = w
        vt = q.T

    order = np.argsort(-sigma, kind="stable")
    u = u[:, order]
    sigma = sigma[order] * amax if amax > 0 else sigma[order]
    vt = vt[order, :]

    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = u * signs
    vt = vt * signs[:, None]
    return SvdResult(np.ascontiguousarray(u), sigma, np.ascontiguousarray(vt))


def polar_orth(m) -> np.ndarray:
    """Orthogonal factor P Q^T of m = P diag(lam) Q^T.

    This is the orthogonal (or, for tall m, Stiefel) matrix closest to m in
    Frobenius norm, i.e. the maximizer of trace(m^T X) over X^T X = I.
    """
    a = as_matrix(m)
    if a.shape[0] < a.shape[1]:
        raise ValueError(f"polar_orth needs rows >= cols, got shape {a.shape}")
    res = svd(a)
    smallest = float(res.sigma[-1])
    if smallest <= POLAR_RANK_TOL:
        raise DegeneratePolarError(
            f"rank-deficient input to polar_orth (smallest singular value {smallest:.3e})"
        )
    return res.u @ res.vt


def align_signs(u_new, u_ref) -> np.ndarray:
    """Flip each column of u_new whose inner product with u_ref's column is negative."""
    a = np.asarray(u_new, dtype=np.float64)
    b = np.asarray(u_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    dots = np.einsum("ij,ij->j", a, b)
    return a * np.where(dots < 0, -1.0, 1.0)


def cos_dissimilarity(u_new, u_ref) -> float:
    """Mean over columns of 1 - cosine(u_new[:, i], u_ref[:, i]), clamped to [0, 1]."""
    a = np.asarray(u_new, dtype=np.float64)
    b = np.asarray(u_ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cos_dissimilarity is undefined for zero-norm columns")
    cos = np.einsum("ij,ij->j", a, b) / (na * nb)
    return float(np.clip(np.mean(1.0 - cos), 0.0, 1.0))


def orthogonality_defect(u) -> float:
    """Frobenius norm of u^T u - I."""
    a = np.asarray(u, dtype=np.float64)
    return float(np.linalg.norm(a.T @ a - np.eye(a.shape[1])))


def random_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed orthogonal matrix via QR of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))
