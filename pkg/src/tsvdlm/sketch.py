"""Truncated-SVD estimators over matrix-free operators.

Five interchangeable ways of computing a rank-p factorization of a LinearOp:
Golub-Kahan-Lanczos bidiagonalization, the randomized 2-view and 1-view
sketches, classical subspace iteration, and a 2-view variant that extracts
the right factor from a second QR. Plus the truncation schedules and the
sample-matrix construction used to re-use singular vectors between outer
inversion iterations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .dense import qr_thin, solve_triangular, svd_full
from .operators import LinearOp, TransposeOp


class IllConditionedSketchError(RuntimeError):
    """1-view core solve rejected; the co-range sketch needs more oversampling (larger l2)."""

    def __init__(self, cond: float):
        super().__init__(
            f"1-view core matrix is ill-conditioned (cond ~ {cond:.2e}); increase l2"
        )
        self.cond = cond


@dataclass(frozen=True)
class TruncatedSvd:
    """Rank-p factor triple (U_p, lambda, V_p) with nonincreasing lambda >= 0."""

    u: np.ndarray
    lam: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float)
        if lam.ndim != 1:
            raise ValueError("lam must be a vector")
        if np.any(lam < 0.0) or np.any(np.diff(lam) > 0.0):
            raise ValueError("singular values must be nonnegative and nonincreasing")
        if self.u.shape[1] != lam.size or self.v.shape[1] != lam.size:
            raise ValueError("factor widths disagree with the number of singular values")
        object.__setattr__(self, "lam", lam)

    @property
    def p(self) -> int:
        return self.lam.size

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.lam) @ self.v.T

    def flipped(self) -> "TruncatedSvd":
        """The same factorization seen from the transposed operator."""
        return TruncatedSvd(u=self.v, lam=self.lam, v=self.u)


@dataclass(frozen=True)
class SketchConfig:
    """Knobs shared by all estimators.

    l oversamples the 2-view sketch, (l1, l2) the 1-view one; eps_sv is the
    relative singular-value convergence tolerance of the iterative methods.
    l1 == l2 makes the 1-view core square and fragile, so it is rejected
    unless allow_equal_oversampling is set (then only warned about).
    """

    p: int = 1
    l: int = 10
    l1: int = 10
    l2: int = 20
    eps_sv: float = 1e-5
    seed: int = 0
    orthogonalize_samples: bool = True
    allow_equal_oversampling: bool = False

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.l < 0 or self.l1 < 0:
            raise ValueError("oversampling parameters must be >= 0")
        if self.l2 < self.l1:
            raise ValueError("l2 must be >= l1")
        if self.l2 == self.l1:
            if not self.allow_equal_oversampling:
                raise ValueError("l1 == l2 makes the 1-view method fragile; "
                                 "set allow_equal_oversampling to override")
            warnings.warn("l1 == l2: the 1-view method is fragile for this choice")


@dataclass(frozen=True)
class TruncationSchedule:
    """Per-iteration truncation rule: linear growth or a singular-value cut ratio."""

    kind: Literal["linear", "sv_cut"] = "linear"
    p_init: int = 1
    p_step: int = 2
    p_max: int = 50
    sv_cut_init: float = 0.5
    sv_cut_factor: float = 0.5

    def threshold(self, iteration: int) -> float:
        if iteration < 1:
            raise ValueError("iteration counts from 1")
        return self.sv_cut_init * self.sv_cut_factor ** (iteration - 1)


def schedule_rank(
    schedule: TruncationSchedule,
    iteration: int,
    spectrum: Sequence[float] | None = None,
) -> int:
    """Truncation rank for a given (1-based) outer iteration.

    The sv_cut rule keeps singular values down to a ratio of the largest:
    the smallest p with lam_p / lam_1 <= threshold(iteration), capped at
    p_max (also the fallback when no value crosses the threshold).
    """
    if iteration < 1:
        raise ValueError("iteration counts from 1")
    if schedule.kind == "linear":
        return min(schedule.p_init + schedule.p_step * (iteration - 1), schedule.p_max)
    if schedule.kind != "sv_cut":
        raise ValueError(f"unknown schedule kind {schedule.kind!r}")
    if spectrum is None or len(spectrum) == 0:
        raise ValueError("sv_cut schedule needs a spectrum")
    lam = np.asarray(spectrum, dtype=float)
    if lam[0] <= 0.0:
        return 1
    cut = schedule.threshold(iteration)
    hits = np.nonzero(lam / lam[0] <= cut)[0]
    p = int(hits[0]) + 1 if hits.size else schedule.p_max
    return min(p, schedule.p_max)


def gaussian_sample(n_rows: int, n_cols: int, seed) -> np.ndarray:
    """Seeded standard-normal matrix, filled column by column.

    Column-major fill means the first k columns of a width-w draw equal the
    whole width-k draw from the same seed, so re-use prefixes compose
    deterministically with fresh tails.
    """
    rng = np.random.default_rng(seed)
    return rng.standard_normal(n_rows * n_cols).reshape((n_rows, n_cols), order="F")


def _sample_with_prefix(n_rows: int, width: int, seed, prefix: np.ndarray | None) -> np.ndarray:
    if prefix is None:
        return gaussian_sample(n_rows, width, seed)
    prefix = np.asarray(prefix, dtype=float)
    if prefix.ndim != 2 or prefix.shape[0] != n_rows:
        raise ValueError(f"sample prefix must have {n_rows} rows, got {prefix.shape}")
    if prefix.shape[1] > width:
        raise ValueError("sample prefix is wider than the requested sample matrix")
    if prefix.shape[1] == width:
        return prefix.copy()
    tail = gaussian_sample(n_rows, width - prefix.shape[1], seed)
    return np.hstack([prefix, tail])


def build_reuse_samples(
    prev: TruncatedSvd,
    target_width: int,
    orientation: Literal["right", "left"],
    seed,
) -> np.ndarray:
    """Sample matrix whose leading columns are the previous singular vectors.

    orientation picks which factor seeds the sample: "right" uses V_p (for
    sketching the operator itself), "left" uses U_p (for sketching its
    transpose). Remaining columns are fresh Gaussian draws, so prev.p = 0
    reduces to plain Gaussian sampling with the same seed.
    """
    if prev.p > target_width:
        raise ValueError("previous rank exceeds the requested sample width")
    block = prev.v if orientation == "right" else prev.u
    return _sample_with_prefix(block.shape[0], target_width, seed, block)


def orient_for_sketch(a: LinearOp) -> tuple[LinearOp, bool]:
    """Transpose the operator if needed so n_rows >= n_cols (sketch convention)."""
    if a.n_rows >= a.n_cols:
        return a, False
    return TransposeOp(a), True


def _split_seed(seed, n: int):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(n)


# ---------------------------------------------------------------------------
# Lanczos bidiagonalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LanczosResult:
    tsvd: TruncatedSvd
    iterations: int
    exhausted: bool = False


def _relative_change_ok(lam_new: np.ndarray, lam_old: np.ndarray, p: int, eps_sv: float) -> bool:
    for i in range(p):
        new = lam_new[i] if i < lam_new.size else 0.0
        old = lam_old[i] if i < lam_old.size else 0.0
        if new == 0.0:
            if old != 0.0:
                return False
            continue
        if abs(new - old) / new > eps_sv:
            return False
    return True


def _svcut_rank(lam: np.ndarray, cut: float, cap: int) -> int:
    if lam.size == 0 or lam[0] <= 0.0:
        return 1
    hits = np.nonzero(lam / lam[0] <= cut)[0]
    p = int(hits[0]) + 1 if hits.size else cap
    return max(1, min(p, cap))


def tsvd_lanczos(
    a: LinearOp,
    p: int,
    eps_sv: float = 1e-5,
    sv_cut: float | None = None,
    seed=0,
) -> LanczosResult:
    """Rank-p TSVD by Golub-Kahan-Lanczos bidiagonalization.

    Runs one forward product to start, then one adjoint and one forward
    product per iteration, with full reorthogonalization of both bases.
    Convergence requires j >= p iterations and relative singular-value
    stagnation below eps_sv for the first p values. When sv_cut is given,
    the retained rank is first reduced to the smallest rank whose ratio to
    the largest singular value drops below the cut (p then acts as a cap),
    checked at every iteration.

    On breakdown (an exactly captured invariant subspace) the converged
    triplets found so far come back with ``exhausted=True``.
    """
    n_r, n_c = a.shape
    if not 1 <= p <= min(n_r, n_c):
        raise ValueError(f"need 1 <= p <= min(n_rows, n_cols) = {min(n_r, n_c)}, got {p}")

    q1 = gaussian_sample(n_c, 1, seed)[:, 0]
    q1 /= np.linalg.norm(q1)
    y = a.apply(q1[:, None])[:, 0]
    alpha = np.linalg.norm(y)
    if alpha == 0.0:
        empty = TruncatedSvd(np.zeros((n_r, 0)), np.zeros(0), np.zeros((n_c, 0)))
        return LanczosResult(empty, iterations=0, exhausted=True)
    qs = [q1]
    ps = [y / alpha]
    alphas = [alpha]
    betas: list[float] = []

    prev_lam = np.zeros(p)
    lam_scale = alpha
    exhausted = False
    j = 0
    max_j = min(n_r, n_c)
    while True:
        j += 1
        q_mat = np.column_stack(qs)
        p_mat = np.column_stack(ps)

        w = a.apply_t(p_mat[:, -1][:, None])[:, 0] - alphas[-1] * qs[-1]
        w -= q_mat @ (q_mat.T @ w)
        beta = np.linalg.norm(w)
        if beta <= 1e-14 * lam_scale:
            j -= 1
            exhausted = True
            break
        betas.append(beta)
        lam_scale = max(lam_scale, beta)
        qs.append(w / beta)

        y = a.apply(qs[-1][:, None])[:, 0] - beta * ps[-1]
        y -= p_mat @ (p_mat.T @ y)
        alpha = np.linalg.norm(y)
        if alpha <= 1e-14 * lam_scale:
            exhausted = True
            break
        alphas.append(alpha)
        lam_scale = max(lam_scale, alpha)
        ps.append(y / alpha)

        check_now = sv_cut is not None or j >= p
        if check_now:
            lam_all = _bidiagonal_spectrum(alphas, betas)
            p_eff = p
            if sv_cut is not None:
                p_eff = min(p, _svcut_rank(lam_all, sv_cut, p))
            if j >= p_eff and _relative_change_ok(lam_all, prev_lam, p_eff, eps_sv):
                break
            prev_lam = lam_all
        if j >= max_j:
            exhausted = True
            break

    t_mat = _bidiagonal_matrix(alphas, betas, n_left=len(ps), n_right=len(qs))
    tu, lam_all, tv = svd_full(t_mat)
    p_eff = p
    if sv_cut is not None:
        p_eff = min(p, _svcut_rank(lam_all, sv_cut, p))
    keep = min(p_eff, lam_all.size)
    u = np.column_stack(ps) @ tu[:, :keep]
    v = np.column_stack(qs) @ tv[:, :keep]
    return LanczosResult(TruncatedSvd(u, lam_all[:keep], v), iterations=j, exhausted=exhausted)


def _bidiagonal_matrix(alphas, betas, n_left: int, n_right: int) -> np.ndarray:
    t = np.zeros((n_left, n_right))
    for i, al in enumerate(alphas[:n_left]):
        t[i, i] = al
    for i, be in enumerate(betas):
        if i + 1 < n_right and i < n_left:
            t[i, i + 1] = be
    return t


def _bidiagonal_spectrum(alphas, betas) -> np.ndarray:
    n = len(alphas)
    t = _bidiagonal_matrix(alphas, betas, n_left=n, n_right=n)
    return np.linalg.svd(t, compute_uv=False)


# ---------------------------------------------------------------------------
# Randomized sketches
# ---------------------------------------------------------------------------


def tsvd_2view(
    a: LinearOp,
    p: int,
    l: int = 10,
    seed=0,
    sample_override: np.ndarray | None = None,
) -> TruncatedSvd:
    """Randomized 2-view TSVD: range sketch, QR, one transposed pass, small SVD.

    Exactly one forward product of width p+l and one adjoint product of the
    same width. The operator is transposed internally when it is wide, and
    the factors swapped back on return.
    """
    a_or, swapped = orient_for_sketch(a)
    n_r, n_c = a_or.shape
    width = p + l
    if width > min(n_r, n_c):
        raise ValueError(f"p + l = {width} exceeds min(n_rows, n_cols) = {min(n_r, n_c)}")
    omega = _sample_with_prefix(n_c, width, seed, sample_override)
    y = a_or.apply(omega)
    q = qr_thin(y).q
    bt = a_or.apply_t(q)
    w, lam, x = svd_full(bt)
    out = TruncatedSvd(u=q @ x[:, :p], lam=lam[:p], v=w[:, :p])
    return out.flipped() if swapped else out


def tsvd_2view_voronin(
    a: LinearOp,
    p: int,
    l: int = 10,
    seed=0,
    sample_override: np.ndarray | None = None,
) -> TruncatedSvd:
    """2-view variant that QR-factors the transposed pass before the small SVD.

    Identical operator access pattern to tsvd_2view; both factors come out
    of orthonormal bases (V_p = Q_hat V_hat_p).
    """
    a_or, swapped = orient_for_sketch(a)
    n_r, n_c = a_or.shape
    width = p + l
    if width > min(n_r, n_c):
        raise ValueError(f"p + l = {width} exceeds min(n_rows, n_cols) = {min(n_r, n_c)}")
    omega = _sample_with_prefix(n_c, width, seed, sample_override)
    y = a_or.apply(omega)
    q = qr_thin(y).q
    bt = a_or.apply_t(q)
    qhat, rhat, _ = qr_thin(bt)
    vhat, lam, uhat = svd_full(rhat)
    out = TruncatedSvd(u=q @ uhat[:, :p], lam=lam[:p], v=qhat @ vhat[:, :p])
    return out.flipped() if swapped else out


def tsvd_1view(
    a: LinearOp,
    p: int,
    l1: int = 10,
    l2: int = 20,
    seed=0,
    sample_overrides: tuple[np.ndarray | None, np.ndarray | None] | None = None,
    orthogonalize_samples: bool = True,
) -> TruncatedSvd:
    """Randomized 1-view TSVD from independent range and co-range sketches.

    The two sketches Y = A @ Omega (width p+l1) and Z^T = A^T @ Psi^T (width
    p+l2) do not depend on each other, so a driver may evaluate them
    concurrently; everything after is small dense algebra. sample_overrides
    supplies prefix columns for (Omega, Psi^T) in the oriented frame.
    """
    a_or, swapped = orient_for_sketch(a)
    n_r, n_c = a_or.shape
    if l2 < l1:
        raise ValueError("l2 must be >= l1")
    w1, w2 = p + l1, p + l2
    if w1 > n_c or w2 > n_r:
        raise ValueError(f"sketch widths ({w1}, {w2}) exceed operator dims ({n_r}, {n_c})")
    seed_omega, seed_psi = _split_seed(seed, 2)
    omega_prefix, psi_prefix = sample_overrides if sample_overrides is not None else (None, None)
    omega = _sample_with_prefix(n_c, w1, seed_omega, omega_prefix)
    psi_t = _sample_with_prefix(n_r, w2, seed_psi, psi_prefix)
    if orthogonalize_samples:
        omega = qr_thin(omega).q
        psi_t = qr_thin(psi_t).q

    y = a_or.apply(omega)
    zt = a_or.apply_t(psi_t)

    q = qr_thin(y).q
    qhat, rhat, _ = qr_thin(psi_t.T @ q)
    diag = np.abs(np.diag(rhat))
    cond = float(diag.max() / diag.min()) if diag.min() > 0.0 else np.inf
    if cond > 1e12:
        raise IllConditionedSketchError(cond)
    x = solve_triangular(rhat, qhat.T @ zt.T)
    uhat, lam, v = svd_full(x)
    out = TruncatedSvd(u=q @ uhat[:, :p], lam=lam[:p], v=v[:, :p])
    return out.flipped() if swapped else out


# ---------------------------------------------------------------------------
# Subspace iteration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubspaceResult:
    tsvd: TruncatedSvd
    iterations: int
    converged: bool


def subspace_iteration(
    a: LinearOp,
    p: int,
    eps_sv: float = 1e-5,
    v0: np.ndarray | None = None,
    seed=0,
    max_iterations: int = 100,
) -> SubspaceResult:
    """Block subspace iteration for the leading p singular triplets.

    Each pass is one adjoint and one forward product of width p. The small
    factor spectrum estimates the squared singular values, so the reported
    values are its square roots; the left factor is recovered as the left
    singular vectors of the final forward image. Initial value estimates
    are the column norms of A @ V0, so starting from an exactly invariant
    subspace converges at the first check. Non-convergence within
    max_iterations returns the best iterate flagged ``converged=False``.
    """
    n_r, n_c = a.shape
    if not 1 <= p <= min(n_r, n_c):
        raise ValueError(f"need 1 <= p <= min(n_rows, n_cols) = {min(n_r, n_c)}, got {p}")
    if v0 is None:
        v0 = qr_thin(gaussian_sample(n_c, p, seed)).q
    else:
        v0 = np.asarray(v0, dtype=float)
        if v0.shape != (n_c, p):
            raise ValueError(f"v0 must be ({n_c}, {p}), got {v0.shape}")
        ortho_err = np.max(np.abs(v0.T @ v0 - np.eye(p)))
        if ortho_err > 1e-8:
            raise ValueError(f"v0 columns are not orthonormal (defect {ortho_err:.3e})")

    u_img = a.apply(v0)
    prev_lam = np.linalg.norm(u_img, axis=0)
    v = v0
    lam = prev_lam
    converged = False
    j = 0
    while j < max_iterations:
        j += 1
        c = a.apply_t(u_img)
        qhat, rhat, _ = qr_thin(c)
        phat, lam_sq, _ = svd_full(rhat)
        v = qhat @ phat
        u_img = a.apply(v)
        lam = np.sqrt(np.maximum(lam_sq, 0.0))
        if _relative_change_ok(lam, prev_lam, p, eps_sv):
            converged = True
            break
        prev_lam = lam

    uu, _, vt = np.linalg.svd(u_img, full_matrices=False)
    flip = np.sign(np.diag(vt))
    flip[flip == 0.0] = 1.0
    u = uu * flip
    return SubspaceResult(TruncatedSvd(u, lam[:p], v), iterations=j, converged=converged)
