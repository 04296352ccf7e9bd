"""Objective assembly, regularization, whitened TSVD updates and the LM driver.

The driver alternates candidate updates built from a truncated SVD of the
dimensionless sensitivity operator with a multiplicative damping schedule:
gamma shrinks tenfold on every accepted step and jumps to max(10*gamma, 100)
on rejection, and the TSVD is recomputed only after accepted steps, so
re-trying a candidate at a different damping costs no operator work.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .dense import cholesky_lower, qr_thin
from .model import SimulationError
from .operators import CountingOp, DimensionlessSensitivityOp, OpCounter, Whitener
from .sketch import (
    SketchConfig,
    TruncatedSvd,
    TruncationSchedule,
    build_reuse_samples,
    schedule_rank,
    subspace_iteration,
    tsvd_1view,
    tsvd_2view,
    tsvd_2view_voronin,
    tsvd_lanczos,
)

ESTIMATORS = (
    "lanczos",
    "two_view",
    "two_view_reuse",
    "one_view",
    "one_view_reuse",
    "subspace_iter",
    "two_view_voronin",
)


@dataclass(frozen=True)
class InverseProblem:
    """Observations, noise, prior, regularization factors and bounds."""

    d_obs: np.ndarray
    gamma_d_diag: np.ndarray
    m_pr: np.ndarray
    l_inv: np.ndarray
    mu: float
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        if np.any(self.gamma_d_diag <= 0.0):
            raise ValueError("observation noise variances must be strictly positive")
        if self.mu <= 0.0:
            raise ValueError("mu must be positive")
        if np.any(self.lo >= self.hi):
            raise ValueError("bounds must satisfy lo < hi elementwise")

    @property
    def n_obs(self) -> int:
        return self.d_obs.size

    @property
    def n_params(self) -> int:
        return self.m_pr.size

    @property
    def noise_scale(self) -> np.ndarray:
        return np.sqrt(self.gamma_d_diag)

    @property
    def whitener(self) -> Whitener:
        return Whitener(self.l_inv)


def build_regularizer(
    connections: Sequence[tuple[int, int]],
    n_params: int,
    identity_shift: float = 1e-3,
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Smoothing regularizer for two parameter families on one grid.

    W stacks a first-difference block per family over the given cell
    connections, a cross-family coupling block tying the two exponents of
    each cell together, and a small identity shift that keeps R = W^T W
    positive definite. Returns (W, L_inv) where L_inv is lower triangular
    with L_inv^T L_inv = R, so the whitening map L never has to be formed.
    """
    if n_params % 2 != 0:
        raise ValueError("n_params must be even (two equal-size families)")
    n_fam = n_params // 2
    n_con = len(connections)
    rows, cols, vals = [], [], []

    def add_block(row0: int, col0: int):
        for c, (i, j) in enumerate(connections):
            rows.extend([row0 + c, row0 + c])
            cols.extend([col0 + i, col0 + j])
            vals.extend([1.0, -1.0])

    add_block(0, 0)
    add_block(n_con, n_fam)
    row0 = 2 * n_con
    for i in range(n_fam):
        rows.extend([row0 + i, row0 + i])
        cols.extend([i, i + n_fam])
        vals.extend([1.0, -1.0])
    row0 += n_fam
    for i in range(n_params):
        rows.append(row0 + i)
        cols.append(i)
        vals.append(identity_shift)
    w = sp.csr_matrix((vals, (rows, cols)), shape=(row0 + n_params, n_params))

    r = (w.T @ w).toarray()
    # Reversed-order Cholesky yields a genuinely lower-triangular factor of
    # the form R = L_inv^T L_inv (plain Cholesky would put the triangle on
    # the other side).
    c_rev = cholesky_lower(r[::-1, ::-1])
    l_inv = c_rev[::-1, ::-1].T
    return w, l_inv


class ObjectiveValue(NamedTuple):
    phi: float
    phi_d: float
    phi_m: float
    phi_n: float


def objective(problem: InverseProblem, m: np.ndarray, r: np.ndarray) -> ObjectiveValue:
    """(Phi, Phi_d, Phi_m, Phi_N) from a residual consistent with m."""
    w_res = r / problem.noise_scale
    phi_d = float(w_res @ w_res)
    m_tilde = problem.l_inv @ (m - problem.m_pr)
    phi_m = float(m_tilde @ m_tilde)
    phi = phi_d + problem.mu * phi_m
    return ObjectiveValue(phi, phi_d, phi_m, phi_d / problem.n_obs)


def lm_update(
    tsvd: TruncatedSvd,
    problem: InverseProblem,
    m_tilde: np.ndarray,
    gamma: float,
    r: np.ndarray,
) -> np.ndarray:
    """Whitened parameter update from the retained singular triplets.

    delta m_tilde = sum_i alpha_i v_i with
    alpha_i = -(mu v_i^T m_tilde + lam_i u_i^T r_w) / (mu + gamma + lam_i^2)
    where r_w is the noise-whitened residual. The update therefore lives in
    span(V_p) and is damped per-direction by gamma without touching the
    operator again.
    """
    r_w = r / problem.noise_scale
    proj_m = tsvd.v.T @ m_tilde
    proj_r = tsvd.u.T @ r_w
    alpha = -(problem.mu * proj_m + tsvd.lam * proj_r) / (problem.mu + gamma + tsvd.lam**2)
    return tsvd.v @ alpha


class MismatchBounds(NamedTuple):
    lo: float
    hi: float
    lo_n: float
    hi_n: float


def mismatch_bounds(n_obs: int) -> MismatchBounds:
    """Expected observation-mismatch window N_d +- 5*sqrt(2*N_d), clamped at 0."""
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    half = 5.0 * np.sqrt(2.0 * n_obs)
    return MismatchBounds(
        lo=max(0.0, n_obs - half),
        hi=n_obs + half,
        lo_n=max(0.0, 1.0 - 5.0 * np.sqrt(2.0 / n_obs)),
        hi_n=1.0 + 5.0 * np.sqrt(2.0 / n_obs),
    )


def gamma_on_success(gamma: float, floor: float = 0.0) -> float:
    return max(gamma / 10.0, floor)


def gamma_on_failure(gamma: float) -> float:
    return max(10.0 * gamma, 100.0)


@dataclass
class IterationRecord:
    """One candidate evaluation; counters are cumulative run totals."""

    iteration: int
    phi: float
    phi_d: float
    phi_n: float
    phi_m: float
    p: int
    gamma: float
    accepted: bool
    n_direct_cols: int
    n_adjoint_cols: int
    n_simulations: int
    t_simulate: float = 0.0
    t_sketch: float = 0.0
    t_update: float = 0.0

    CSV_FIELDS = ("iter", "Phi", "Phi_d", "Phi_N", "Phi_m", "p", "gamma", "accepted",
                  "n_direct_cols", "n_adjoint_cols", "n_simulations")

    def csv_row(self) -> list:
        return [self.iteration, self.phi, self.phi_d, self.phi_n, self.phi_m, self.p,
                self.gamma, int(self.accepted), self.n_direct_cols, self.n_adjoint_cols,
                self.n_simulations]


@dataclass
class LmState:
    """Mutable driver state; m_tilde is always recomputed from the clamped m."""

    m: np.ndarray
    m_tilde: np.ndarray
    gamma: float
    iteration: int
    p: int
    history: list[IterationRecord] = field(default_factory=list)


@dataclass
class LmResult:
    m: np.ndarray
    state: LmState
    converged: bool
    objective: ObjectiveValue
    counter: OpCounter
    n_simulations: int
    tsvd: TruncatedSvd | None

    @property
    def history(self) -> list[IterationRecord]:
        return self.state.history


def _estimate_tsvd(
    name: str,
    sd_op,
    p: int,
    cfg: SketchConfig,
    seed_seq,
    prev: TruncatedSvd | None,
    sv_cut: float | None,
) -> TruncatedSvd:
    n_r, n_c = sd_op.shape
    min_dim = min(n_r, n_c)
    swapped = n_r < n_c
    if name == "lanczos":
        p_use = min(p, min_dim)
        return tsvd_lanczos(sd_op, p_use, eps_sv=cfg.eps_sv, sv_cut=sv_cut, seed=seed_seq).tsvd
    if name in ("two_view", "two_view_reuse", "two_view_voronin"):
        p_use = max(1, min(p, min_dim - cfg.l))
        override = None
        if name == "two_view_reuse" and prev is not None:
            prev_or = prev.flipped() if swapped else prev
            trim = _trim_tsvd(prev_or, min(prev_or.p, p_use + cfg.l))
            override = build_reuse_samples(trim, p_use + cfg.l, "right", seed_seq)
        fn = tsvd_2view_voronin if name == "two_view_voronin" else tsvd_2view
        return fn(sd_op, p_use, l=cfg.l, seed=seed_seq, sample_override=override)
    if name in ("one_view", "one_view_reuse"):
        p_use = max(1, min(p, min_dim - cfg.l1, max(n_r, n_c) - cfg.l2))
        overrides = None
        if name == "one_view_reuse" and prev is not None:
            prev_or = prev.flipped() if swapped else prev
            w1, w2 = p_use + cfg.l1, p_use + cfg.l2
            trim_v = _trim_tsvd(prev_or, min(prev_or.p, w1))
            trim_u = _trim_tsvd(prev_or, min(prev_or.p, w2))
            overrides = (trim_v.v, trim_u.u)
        return tsvd_1view(sd_op, p_use, l1=cfg.l1, l2=cfg.l2, seed=seed_seq,
                          sample_overrides=overrides,
                          orthogonalize_samples=cfg.orthogonalize_samples)
    if name == "subspace_iter":
        p_use = min(p, min_dim)
        if prev is not None:
            sample = build_reuse_samples(_trim_tsvd(prev, min(prev.p, p_use)), p_use,
                                         "right", seed_seq)
            v0 = qr_thin(sample).q
        else:
            v0 = None
        return subspace_iteration(sd_op, p_use, eps_sv=cfg.eps_sv, v0=v0, seed=seed_seq).tsvd
    raise ValueError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")


def _trim_tsvd(ts: TruncatedSvd, p: int) -> TruncatedSvd:
    if p >= ts.p:
        return ts
    return TruncatedSvd(ts.u[:, :p], ts.lam[:p], ts.v[:, :p])


def run_tsvd_lm(
    problem: InverseProblem,
    model,
    estimator: str = "lanczos",
    sketch: SketchConfig | None = None,
    schedule: TruncationSchedule | None = None,
    iter_max: int = 30,
    eps_m: float = 1e-4,
    gamma0: float = 1e6,
    gamma_floor: float = 0.0,
    seed: int = 0,
    counter: OpCounter | None = None,
) -> LmResult:
    """Truncated-SVD Levenberg-Marquardt driver.

    model must provide ``simulate(m) -> (trajectory, residual)`` and
    ``sensitivity_op(trajectory, m) -> LinearOp``; candidates whose
    simulation fails are rejected exactly like objective increases. The
    accepted-iteration counter, not the candidate count, is what iter_max
    limits and what advances the truncation schedule.
    """
    if estimator not in ESTIMATORS:
        raise ValueError(f"unknown estimator {estimator!r}; choose from {ESTIMATORS}")
    sketch = sketch if sketch is not None else SketchConfig()
    schedule = schedule if schedule is not None else TruncationSchedule()
    if schedule.kind == "sv_cut" and estimator != "lanczos":
        raise ValueError("the sv_cut schedule is only supported with the lanczos estimator")
    counter = counter if counter is not None else OpCounter()
    whitener = problem.whitener
    noise_scale = problem.noise_scale
    n_sims = 0

    def sd_operator(traj, m):
        s_op = CountingOp(model.sensitivity_op(traj, m), counter)
        return DimensionlessSensitivityOp(s_op, noise_scale, whitener)

    def sketch_rank(iteration: int) -> tuple[int, float | None]:
        if schedule.kind == "sv_cut":
            return schedule.p_max, schedule.threshold(iteration)
        return schedule_rank(schedule, iteration), None

    m = problem.m_pr.copy()
    t0 = time.perf_counter()
    traj, r = model.simulate(m)
    n_sims += 1
    t_sim = time.perf_counter() - t0
    obj = objective(problem, m, r)

    iteration = 1
    p_want, sv_cut = sketch_rank(iteration)
    t0 = time.perf_counter()
    tsvd = _estimate_tsvd(estimator, sd_operator(traj, m), p_want, sketch,
                          np.random.SeedSequence(entropy=seed, spawn_key=(iteration,)),
                          prev=None, sv_cut=sv_cut)
    t_sketch = time.perf_counter() - t0

    state = LmState(m=m, m_tilde=whitener.whiten(m - problem.m_pr), gamma=gamma0,
                    iteration=iteration, p=tsvd.p)
    state.history.append(IterationRecord(
        iteration=0, phi=obj.phi, phi_d=obj.phi_d, phi_n=obj.phi_n, phi_m=obj.phi_m,
        p=tsvd.p, gamma=state.gamma, accepted=True,
        n_direct_cols=counter.forward_cols, n_adjoint_cols=counter.adjoint_cols,
        n_simulations=n_sims, t_simulate=t_sim, t_sketch=t_sketch))

    converged = False
    while not converged and state.iteration <= iter_max:
        t0 = time.perf_counter()
        delta_tilde = lm_update(tsvd, problem, state.m_tilde, state.gamma, r)
        m_temp = np.clip(state.m + whitener.apply(delta_tilde), problem.lo, problem.hi)
        t_upd = time.perf_counter() - t0
        if np.linalg.norm(m_temp - state.m) <= eps_m * (np.linalg.norm(state.m) + eps_m):
            converged = True
            break

        gamma_used = state.gamma
        t0 = time.perf_counter()
        try:
            traj_temp, r_temp = model.simulate(m_temp)
            n_sims += 1
            failed = False
        except SimulationError:
            n_sims += 1
            failed = True
        t_sim = time.perf_counter() - t0

        if failed:
            state.gamma = gamma_on_failure(state.gamma)
            state.history.append(IterationRecord(
                iteration=state.iteration, phi=np.nan, phi_d=np.nan, phi_n=np.nan,
                phi_m=np.nan, p=tsvd.p, gamma=gamma_used, accepted=False,
                n_direct_cols=counter.forward_cols, n_adjoint_cols=counter.adjoint_cols,
                n_simulations=n_sims, t_simulate=t_sim, t_update=t_upd))
            continue

        obj_temp = objective(problem, m_temp, r_temp)
        if obj_temp.phi < obj.phi:
            iter_label = state.iteration
            p_used = tsvd.p
            state.iteration += 1
            state.m = m_temp
            state.m_tilde = whitener.whiten(m_temp - problem.m_pr)
            state.gamma = gamma_on_success(state.gamma, gamma_floor)
            traj, r, obj = traj_temp, r_temp, obj_temp
            t_sketch = 0.0
            if state.iteration <= iter_max:
                p_want, sv_cut = sketch_rank(state.iteration)
                t0 = time.perf_counter()
                tsvd = _estimate_tsvd(
                    estimator, sd_operator(traj, state.m), p_want, sketch,
                    np.random.SeedSequence(entropy=seed, spawn_key=(state.iteration,)),
                    prev=tsvd, sv_cut=sv_cut)
                t_sketch = time.perf_counter() - t0
            state.p = tsvd.p
            state.history.append(IterationRecord(
                iteration=iter_label, phi=obj.phi, phi_d=obj.phi_d,
                phi_n=obj.phi_n, phi_m=obj.phi_m, p=p_used, gamma=gamma_used,
                accepted=True, n_direct_cols=counter.forward_cols,
                n_adjoint_cols=counter.adjoint_cols, n_simulations=n_sims,
                t_simulate=t_sim, t_sketch=t_sketch, t_update=t_upd))
        else:
            state.gamma = gamma_on_failure(state.gamma)
            state.history.append(IterationRecord(
                iteration=state.iteration, phi=obj_temp.phi, phi_d=obj_temp.phi_d,
                phi_n=obj_temp.phi_n, phi_m=obj_temp.phi_m, p=tsvd.p, gamma=gamma_used,
                accepted=False, n_direct_cols=counter.forward_cols,
                n_adjoint_cols=counter.adjoint_cols, n_simulations=n_sims,
                t_simulate=t_sim, t_update=t_upd))

    return LmResult(m=state.m, state=state, converged=converged, objective=obj,
                    counter=counter, n_simulations=n_sims, tsvd=tsvd)
