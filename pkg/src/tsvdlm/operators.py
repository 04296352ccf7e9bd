"""Matrix-free linear operators and the dimensionless sensitivity wrapper.

Operators expose batched products ``apply`` (A @ H) and ``apply_t`` (A^T @ H)
on blocks of columns, so a single call maps onto one multi right-hand-side
pass through whatever backs the operator (a dense matrix, a sparse matrix,
or a full direct/adjoint propagation through the time-stepping model).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dense import solve_triangular


def _as_block(h: np.ndarray, n_rows: int, name: str) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    if h.ndim != 2 or h.shape[0] != n_rows:
        raise ValueError(f"{name} must have {n_rows} rows, got shape {h.shape}")
    return h


class LinearOp:
    """Base for matrix-free operators with batched apply / apply_t."""

    shape: tuple[int, int]

    @property
    def n_rows(self) -> int:
        return self.shape[0]

    @property
    def n_cols(self) -> int:
        return self.shape[1]

    def apply(self, h: np.ndarray) -> np.ndarray:
        """A @ H for an (n_cols, s) block H, any s >= 1."""
        raise NotImplementedError

    def apply_t(self, h: np.ndarray) -> np.ndarray:
        """A^T @ H for an (n_rows, s) block H."""
        raise NotImplementedError

    def transpose(self) -> "LinearOp":
        return TransposeOp(self)


class MatrixOp(LinearOp):
    """LinearOp view of an in-memory (dense or scipy-sparse) matrix."""

    def __init__(self, a):
        self.a = a
        self.shape = a.shape

    def apply(self, h):
        return self.a @ _as_block(h, self.n_cols, "h")

    def apply_t(self, h):
        return self.a.T @ _as_block(h, self.n_rows, "h")


class TransposeOp(LinearOp):
    def __init__(self, inner: LinearOp):
        self.inner = inner
        self.shape = (inner.shape[1], inner.shape[0])

    def apply(self, h):
        return self.inner.apply_t(h)

    def apply_t(self, h):
        return self.inner.apply(h)


@dataclass
class OpCounter:
    """Mutable tally of operator work in column-equivalents.

    "forward" counts columns pushed through A (direct propagations for a
    sensitivity operator), "adjoint" counts columns through A^T. Shared by
    every CountingOp wrapping operators of one inversion run, so the tally
    survives rebuilding the operator on a new trajectory.
    """

    forward_cols: int = 0
    adjoint_cols: int = 0
    forward_calls: int = 0
    adjoint_calls: int = 0

    def reset(self) -> None:
        self.forward_cols = self.adjoint_cols = 0
        self.forward_calls = self.adjoint_calls = 0


class CountingOp(LinearOp):
    """Wrapper that counts batched applications on a shared OpCounter."""

    def __init__(self, inner: LinearOp, counter: OpCounter | None = None):
        self.inner = inner
        self.counter = counter if counter is not None else OpCounter()
        self.shape = inner.shape

    def apply(self, h):
        h = _as_block(h, self.n_cols, "h")
        self.counter.forward_cols += h.shape[1]
        self.counter.forward_calls += 1
        return self.inner.apply(h)

    def apply_t(self, h):
        h = _as_block(h, self.n_rows, "h")
        self.counter.adjoint_cols += h.shape[1]
        self.counter.adjoint_calls += 1
        return self.inner.apply_t(h)


@dataclass(frozen=True)
class Whitener:
    """Parameter whitening map L stored through its lower-triangular inverse.

    Only L^-1 is ever formed (the regularizer's triangular factor); applying
    L or L^T is a triangular solve against it.
    """

    l_inv: np.ndarray

    def __post_init__(self):
        l_inv = np.asarray(self.l_inv, dtype=float)
        if l_inv.ndim != 2 or l_inv.shape[0] != l_inv.shape[1]:
            raise ValueError(f"l_inv must be square, got {l_inv.shape}")
        object.__setattr__(self, "l_inv", l_inv)

    @property
    def n(self) -> int:
        return self.l_inv.shape[0]

    def apply(self, h: np.ndarray) -> np.ndarray:
        """L @ h, i.e. solve L^-1 x = h."""
        return solve_triangular(self.l_inv, h, lower=True)

    def apply_t(self, h: np.ndarray) -> np.ndarray:
        """L^T @ h, i.e. solve (L^-1)^T x = h."""
        return solve_triangular(self.l_inv, h, lower=True, trans=True)

    def whiten(self, dm: np.ndarray) -> np.ndarray:
        """L^-1 @ dm (plain product; the inverse factor is explicit)."""
        return self.l_inv @ dm


class DimensionlessSensitivityOp(LinearOp):
    """Noise- and parameter-whitened sensitivity: Gamma_d^{-1/2} S L.

    The inner S operator sees exactly one batched call per application, so
    each multi-column product costs one multi right-hand-side propagation.
    """

    def __init__(self, inner: LinearOp, noise_scale: np.ndarray, whitener: Whitener):
        noise_scale = np.asarray(noise_scale, dtype=float)
        if noise_scale.ndim != 1 or noise_scale.shape[0] != inner.shape[0]:
            raise ValueError("noise_scale must be a vector of length n_rows")
        if np.any(noise_scale <= 0.0):
            raise ValueError("noise_scale entries must be strictly positive")
        if whitener.n != inner.shape[1]:
            raise ValueError("whitener size does not match operator columns")
        self.inner = inner
        self.noise_scale = noise_scale
        self.whitener = whitener
        self.shape = inner.shape

    def apply(self, h):
        h = _as_block(h, self.n_cols, "h")
        return self.inner.apply(self.whitener.apply(h)) / self.noise_scale[:, None]

    def apply_t(self, h):
        h = _as_block(h, self.n_rows, "h")
        return self.whitener.apply_t(self.inner.apply_t(h / self.noise_scale[:, None]))


def frobenius_inner(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(a * b))


def duality_gap(op: LinearOp, h1: np.ndarray, h2: np.ndarray) -> float:
    """Relative adjoint-identity defect |<A h1, h2> - <h1, A^T h2>| (normalized)."""
    ah1 = op.apply(h1)
    ath2 = op.apply_t(h2)
    lhs = frobenius_inner(ah1, h2)
    rhs = frobenius_inner(h1, ath2)
    denom = np.linalg.norm(ah1) * np.linalg.norm(h2)
    if denom == 0.0:
        return abs(lhs - rhs)
    return abs(lhs - rhs) / denom
