"""Dense linear-algebra kernels for sketch-sized matrices.

Everything here operates on small matrices (at most a few hundred rows or
columns): the orthonormalization, small SVD and triangular solves that the
sketch estimators and the regularizer construction need. Large, matrix-free
work lives in :mod:`tsvdlm.operators` and :mod:`tsvdlm.model`.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.linalg.lapack import dpotrf


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky failure; carries the offending pivot index (0-based)."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (pivot {pivot})")
        self.pivot = pivot


class SingularTriangularError(np.linalg.LinAlgError):
    """Triangular solve rejected because of a (near-)zero diagonal entry."""

    def __init__(self, index: int, value: float):
        super().__init__(f"triangular matrix is singular at diagonal {index} (|t_ii| = {value:.3e})")
        self.index = index


class QrThin(NamedTuple):
    q: np.ndarray
    r: np.ndarray
    rank_deficient: bool


def _require_finite(a: np.ndarray, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def qr_thin(a: np.ndarray) -> QrThin:
    """Thin Householder QR of a tall matrix.

    Q always has orthonormal columns; if A is (numerically) rank deficient
    the missing directions are completed by the Householder reflectors and
    the result is flagged via ``rank_deficient``.
    """
    a = _require_finite(a, "a")
    if a.shape[0] < a.shape[1]:
        raise ValueError(f"qr_thin needs rows >= cols, got {a.shape}")
    q, r = np.linalg.qr(a, mode="reduced")
    flip = np.sign(np.diag(r))
    flip[flip == 0.0] = 1.0
    q = q * flip
    r = r * flip[:, None]
    diag = np.abs(np.diag(r))
    scale = np.max(np.abs(r)) if r.size else 0.0
    deficient = bool(r.size) and bool(np.any(diag <= 1e-12 * scale))
    return QrThin(q, r, deficient)


def svd_full(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Full (thin) SVD ``A = U diag(s) V^T`` with a fixed sign convention.

    Singular values come back nonincreasing; each column of U has its first
    nonzero entry positive (V flipped to match) so repeated factorizations
    are bit-reproducible in regression tests.
    """
    a = _require_finite(a, "a")
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    v = vt.T
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0.0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    return u, s, v


def cholesky_lower(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor L with ``L L^T = A`` for a symmetric SPD matrix."""
    a = _require_finite(a, "a")
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"matrix must be square, got {a.shape}")
    sym_err = np.max(np.abs(a - a.T))
    if sym_err > 1e-12 * max(np.max(np.abs(a)), 1e-300):
        raise ValueError(f"matrix is not symmetric (max asymmetry {sym_err:.3e})")
    c, info = dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"illegal value in argument {-info} of dpotrf")
    return c


def solve_triangular(
    t: np.ndarray,
    b: np.ndarray,
    lower: bool = False,
    trans: bool = False,
) -> np.ndarray:
    """Solve ``T x = b`` (or ``T^T x = b`` with ``trans=True``) for triangular T."""
    t = _require_finite(t, "t")
    if t.shape[0] != t.shape[1]:
        raise ValueError(f"triangular matrix must be square, got {t.shape}")
    diag = np.abs(np.diag(t))
    scale = np.max(np.abs(t)) if t.size else 0.0
    bad = np.nonzero(diag < 1e-14 * scale)[0]
    if t.size and (bad.size or scale == 0.0):
        idx = int(bad[0]) if bad.size else 0
        raise SingularTriangularError(idx, float(diag[idx]))
    return scipy.linalg.solve_triangular(t, b, lower=lower, trans="T" if trans else "N", check_finite=False)
