"""Symmetric positive-definite square roots via cyclic Jacobi rotations."""

from __future__ import annotations

import numpy as np

__all__ = ["SPDError", "jacobi_eigh", "matrix_sqrt", "batch_sqrt"]

SYM_TOL = 1e-12


class SPDError(ValueError):
    """Matrix is not symmetric positive definite."""


def jacobi_eigh(M: np.ndarray, *, tol: float = 1e-15, max_sweeps: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a small symmetric matrix.

    Rotations are applied in fixed cyclic order (p < q, row-major), so the
    result is bit-reproducible.
    """
    a = np.array(M, dtype=float, copy=True)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.triu(a, 1) ** 2))
        if off <= tol * max(1.0, np.abs(np.diag(a)).max()):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau)) if tau != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                a[p, q] = a[q, p] = 0.0
                v = v @ rot
    return np.diag(a).copy(), v


def _check(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise SPDError(f"expected a square matrix, got shape {M.shape}")
    scale = max(1.0, float(np.abs(M).max()))
    asym = float(np.abs(M - M.T).max()) / scale
    if asym > SYM_TOL:
        raise SPDError(f"matrix not symmetric (relative asymmetry {asym:.3g})")
    return 0.5 * (M + M.T)


def matrix_sqrt(M) -> np.ndarray:
    """Unique symmetric positive-definite S with S @ S = M."""
    M = _check(M)
    w, v = jacobi_eigh(M)
    if w.min() <= 0:
        raise SPDError(f"matrix not positive definite (eigenvalue {w.min():.6g})")
    S = (v * np.sqrt(w)) @ v.T
    return 0.5 * (S + S.T)


def batch_sqrt(M: np.ndarray, *, allow_singular: bool = False) -> np.ndarray:
    """Square roots of a stack of 1x1 or 2x2 symmetric matrices, shape (..., n, n).

    Uses the closed form S = (M + sqrt(det M) I) / sqrt(tr M + 2 sqrt(det M)).
    ``allow_singular`` permits zero eigenvalues (degenerate test diffusions).
    """
    M = np.asarray(M, dtype=float)
    n = M.shape[-1]
    if n == 1:
        m = M[..., 0, 0]
        if np.any(m < 0) or (not allow_singular and np.any(m == 0)):
            raise SPDError(f"matrix not positive definite (eigenvalue {float(m.min()):.6g})")
        return np.sqrt(m)[..., None, None]
    if n != 2:
        out = np.empty_like(M)
        for idx in np.ndindex(M.shape[:-2]):
            out[idx] = matrix_sqrt(M[idx])
        return out
    a, b, c = M[..., 0, 0], 0.5 * (M[..., 0, 1] + M[..., 1, 0]), M[..., 1, 1]
    det = a * c - b * b
    tr = a + c
    lam_min = 0.5 * (tr - np.sqrt((a - c) ** 2 + 4 * b * b))
    floor = -1e-14 * np.maximum(1.0, np.abs(tr))
    if np.any(lam_min < floor) or (not allow_singular and np.any(lam_min <= 0)):
        raise SPDError(f"matrix not positive definite (eigenvalue {float(lam_min.min()):.6g})")
    sd = np.sqrt(np.maximum(det, 0.0))
    denom = np.sqrt(np.maximum(tr + 2 * sd, 0.0))
    safe = np.where(denom > 0, denom, 1.0)
    out = np.empty_like(M)
    out[..., 0, 0] = (a + sd) / safe
    out[..., 1, 1] = (c + sd) / safe
    out[..., 0, 1] = out[..., 1, 0] = b / safe
    out[denom == 0] = 0.0
    return out
