"""Independent dense ground truth for small problem instances.

Assembles the full sensitivity matrix either by batched adjoint columns or
by central finite differences of the nonlinear simulation, forms the
dimensionless variant and its dense SVD, and solves the undamped update
system directly. None of this shares code paths with the estimators it
checks (the finite-difference route does not even touch the Jacobian
blocks), which is the point.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dense import solve_triangular, svd_full
from .inversion import InverseProblem
from .model import SimulationError, TimeSteppingModel


@dataclass(frozen=True)
class DenseReference:
    """Dense S, its whitened variant and the reference SVD, plus assembly metadata."""

    s_dense: np.ndarray
    sd_dense: np.ndarray
    u: np.ndarray
    lam: np.ndarray
    v: np.ndarray
    mode: str
    epsilon: np.ndarray | None


def _fd_column(model: TimeSteppingModel, m: np.ndarray, i: int, eps: float) -> np.ndarray:
    m_plus = m.copy()
    m_plus[i] += eps
    m_minus = m.copy()
    m_minus[i] -= eps
    _, r_plus = model.simulate(m_plus)
    _, r_minus = model.simulate(m_minus)
    return (r_plus - r_minus) / (2.0 * eps)


def assemble_dense_sensitivity(
    model: TimeSteppingModel,
    problem: InverseProblem,
    m: np.ndarray,
    mode: str = "adjoint",
    epsilon_scale: float = 1e-6,
    cache_dir: str | Path | None = None,
) -> DenseReference:
    """Dense sensitivity reference at m, by adjoint columns or finite differences.

    Finite differences use per-parameter steps eps_i = epsilon_scale *
    max(1, |m_i|); a simulation failure at a perturbed point is retried at
    eps/10 before giving up. Results can be cached on disk keyed by the
    model configuration, the parameter vector and the step sizes; cached
    arrays round-trip bit-exact.
    """
    m = np.asarray(m, dtype=float)
    if mode not in ("adjoint", "finite-diff"):
        raise ValueError(f"mode must be 'adjoint' or 'finite-diff', got {mode!r}")

    eps = epsilon_scale * np.maximum(1.0, np.abs(m)) if mode == "finite-diff" else None
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"{_cache_key(model, m, mode, eps)}.npz"

    if cache_path is not None and cache_path.exists():
        s = np.load(cache_path)["s_dense"]
    else:
        if mode == "adjoint":
            traj, _ = model.simulate(m)
            s = model.adjoint_product(traj, m, np.eye(model.n_obs)).T
        else:
            cols = []
            for i in range(model.n_params):
                try:
                    cols.append(_fd_column(model, m, i, eps[i]))
                except SimulationError:
                    cols.append(_fd_column(model, m, i, eps[i] / 10.0))
            s = np.column_stack(cols)
        if cache_path is not None:
            cache_path.parent.mkdir(parents=True, exist_ok=True)
            tmp = cache_path.with_suffix(".tmp.npz")
            np.savez(tmp, s_dense=s)
            tmp.replace(cache_path)

    sd = whiten_sensitivity(s, problem)
    u, lam, v = svd_full(sd)
    return DenseReference(s_dense=s, sd_dense=sd, u=u, lam=lam, v=v, mode=mode, epsilon=eps)


def whiten_sensitivity(s: np.ndarray, problem: InverseProblem) -> np.ndarray:
    """Gamma_d^{-1/2} S L from a dense S (L applied through its stored inverse)."""
    scaled = s / problem.noise_scale[:, None]
    return solve_triangular(problem.l_inv, scaled.T, lower=True, trans=True).T


def _cache_key(model: TimeSteppingModel, m: np.ndarray, mode: str, eps) -> str:
    cfg = model.config
    payload = json.dumps({
        "config": {f: getattr(cfg, f) for f in cfg.__dataclass_fields__},
        "mode": mode,
    }, sort_keys=True, default=str).encode()
    digest = hashlib.sha256()
    digest.update(payload)
    digest.update(np.ascontiguousarray(m).tobytes())
    if eps is not None:
        digest.update(np.ascontiguousarray(eps).tobytes())
    return digest.hexdigest()[:24]


def solve_full_lm(
    sd_dense: np.ndarray,
    problem: InverseProblem,
    m_tilde: np.ndarray,
    gamma: float,
    r: np.ndarray,
) -> np.ndarray:
    """Direct dense solve of the damped whitened normal equations.

    [S_D^T S_D + (mu + gamma) I] dm = -S_D^T Gamma_d^{-1/2} r - mu m_tilde
    The system matrix is SPD for mu + gamma > 0, so this is the exact update
    the truncated estimators approximate.
    """
    n = sd_dense.shape[1]
    lhs = sd_dense.T @ sd_dense + (problem.mu + gamma) * np.eye(n)
    rhs = -(sd_dense.T @ (r / problem.noise_scale)) - problem.mu * m_tilde
    return np.linalg.solve(lhs, rhs)
