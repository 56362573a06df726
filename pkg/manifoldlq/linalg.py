from __future__ import annotations

import numpy as np
from scipy import linalg

PSEUDO_INVERSE_CUTOFF = 1e-12


def symmetrize(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x + np.swapaxes(x, -1, -2))


def asymmetry(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(x - np.swapaxes(x, -1, -2))))


def min_eig(x: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix (0 for an empty matrix)."""
    if x.size == 0:
        return 0.0
    return float(linalg.eigvalsh(symmetrize(x))[0])


def psd_sqrt(x: np.ndarray) -> np.ndarray:
    w, v = linalg.eigh(symmetrize(x))
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def pd_inv_sqrt(x: np.ndarray) -> np.ndarray:
    w, v = linalg.eigh(symmetrize(x))
    if w.size and w[0] <= 0.0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return (v / np.sqrt(w)) @ v.T


def clip_psd(x: np.ndarray) -> np.ndarray:
    w, v = linalg.eigh(symmetrize(x))
    return symmetrize((v * np.clip(w, 0.0, None)) @ v.T)


def sym_pinv_solve(s: np.ndarray, rhs: np.ndarray, *, cutoff: float = PSEUDO_INVERSE_CUTOFF) -> np.ndarray:
    """Minimal-norm least-squares solution of S x = rhs for symmetric PSD S.

    Eigenvalues at or below cutoff * lambda_max are treated as zero.
    """
    w, v = linalg.eigh(symmetrize(s))
    top = float(np.max(np.abs(w))) if w.size else 0.0
    if top == 0.0:
        return np.zeros(s.shape[1])
    keep = w > cutoff * top
    coef = v.T @ rhs
    coef = np.where(keep, coef / np.where(keep, w, 1.0), 0.0)
    return v @ coef


def lstsq_min_norm(a: np.ndarray, rhs: np.ndarray, *, cutoff: float = PSEUDO_INVERSE_CUTOFF) -> np.ndarray:
    if a.size == 0 or not np.any(a):
        return np.zeros(a.shape[1])
    x, _, _, _ = linalg.lstsq(a, rhs, cond=cutoff)
    return x


def relative_residual(a: np.ndarray, x: np.ndarray, rhs: np.ndarray) -> tuple[float, float]:
    """Return (absolute residual, 1 + |rhs|) for the system a x = rhs."""
    res = float(np.linalg.norm(a @ x - rhs))
    return res, 1.0 + float(np.linalg.norm(rhs))
