"""Desk-scale nonlinear time-stepping forward model and its sensitivity products.

A 2-D single-phase diffusion analog on an n_x-by-n_z cell grid. One scalar
state per cell; per-cell transmissibilities 10^m with two parameter families
(horizontal and vertical exponents), face values by harmonic means, and a
state-dependent conductivity factor kappa(u) = 1 + beta*u providing the
nonlinearity. The top boundary is Dirichlet, the bottom boundary carries a
prescribed influx, and production wells switch on as sinks for the transient
period, which starts from the solved steady ("natural") state.

Transmissibilities are expressed in units of 10^log_t_ref so residual
entries stay O(1) and absolute Newton tolerances are meaningful.

simulate() runs Newton at every level; direct_product / adjoint_product
propagate sensitivity blocks forward / backward in time with one sparse LU
factorization per level shared across all right-hand sides (and, via
transposed solves, across both propagation directions).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .operators import LinearOp, _as_block

LN10 = math.log(10.0)


class SimulationError(RuntimeError):
    """Newton failed to converge at some time level."""

    def __init__(self, level: int | str, residual_norm: float, iterations: int):
        super().__init__(
            f"Newton did not converge at level {level!r} "
            f"(|f|_inf = {residual_norm:.3e} after {iterations} iterations)"
        )
        self.level = level
        self.residual_norm = residual_norm
        self.iterations = iterations


@dataclass(frozen=True)
class GridConfig:
    """Forward-model configuration; every size and probe is adjustable."""

    n_x: int = 16
    n_z: int = 16
    dx: float = 1.0
    dz: float = 1.0
    top_value: float = 10.0
    bottom_influx: float = 3.0
    beta: float = 0.1
    log_t_ref: float = -14.0
    timesteps: tuple[float, ...] = (0.1,) * 12
    wells: tuple[tuple[int, int], ...] = ((3, 12), (8, 13), (12, 11))
    well_rate: float = -15.0
    steady_probes: tuple[tuple[int, int], ...] = tuple(
        (ix, iz) for ix in (2, 5, 8, 11, 14) for iz in (1, 3, 5, 7, 9, 11, 13, 15)
    )
    transient_probes: tuple[tuple[int, int], ...] = ((3, 12), (8, 13), (12, 11))
    noise_sigma: float = 0.5
    newton_tol: float = 1e-10
    newton_max_iter: int = 50

    @property
    def n_cells(self) -> int:
        return self.n_x * self.n_z

    @property
    def n_params(self) -> int:
        return self.n_cells * 2

    @property
    def n_steps(self) -> int:
        return len(self.timesteps)

    def cell_index(self, ix: int, iz: int) -> int:
        if not (0 <= ix < self.n_x and 0 <= iz < self.n_z):
            raise ValueError(f"cell ({ix}, {iz}) outside {self.n_x}x{self.n_z} grid")
        return iz * self.n_x + ix


@dataclass
class Trajectory:
    """Converged states for one simulation: steady state then per-step states."""

    u_steady: np.ndarray
    u_steps: list[np.ndarray]
    newton_iterations: list[int]
    residual_norms: list[float]
    _factors: dict = field(default_factory=dict, repr=False)


class TimeSteppingModel:
    """Grid residuals, Jacobian blocks and observation map for the analog model."""

    def __init__(self, config: GridConfig, d_obs: np.ndarray | None = None):
        self.config = config
        c = config
        n = c.n_cells

        # Internal faces, horizontal (x-family parameters) then vertical
        # (z-family); a face couples cells i < j and carries the global
        # parameter indices of the two transmissibility exponents it mixes.
        fi, fj, pi, pj, inv_d = [], [], [], [], []
        for iz in range(c.n_z):
            for ix in range(c.n_x - 1):
                i = c.cell_index(ix, iz)
                j = c.cell_index(ix + 1, iz)
                fi.append(i), fj.append(j), pi.append(i), pj.append(j)
                inv_d.append(1.0 / c.dx)
        self.n_horizontal_faces = len(fi)
        for iz in range(c.n_z - 1):
            for ix in range(c.n_x):
                i = c.cell_index(ix, iz)
                j = c.cell_index(ix, iz + 1)
                fi.append(i), fj.append(j), pi.append(n + i), pj.append(n + j)
                inv_d.append(1.0 / c.dz)
        self.face_i = np.array(fi, dtype=np.intp)
        self.face_j = np.array(fj, dtype=np.intp)
        self.face_par_i = np.array(pi, dtype=np.intp)
        self.face_par_j = np.array(pj, dtype=np.intp)
        self.face_inv_d = np.array(inv_d, dtype=float)

        # Dirichlet faces on the top row use the cell's own vertical
        # transmissibility over a half-cell distance.
        self.top_cells = np.array([c.cell_index(ix, 0) for ix in range(c.n_x)], dtype=np.intp)
        self.top_pars = self.top_cells + n
        self.top_inv_d = 2.0 / c.dz

        self.volume = c.dx * c.dz
        self.q_steady = np.zeros(n)
        bottom = [c.cell_index(ix, c.n_z - 1) for ix in range(c.n_x)]
        self.q_steady[bottom] = c.bottom_influx
        self.q_transient = self.q_steady.copy()
        for ix, iz in c.wells:
            self.q_transient[c.cell_index(ix, iz)] += c.well_rate

        self.steady_cells = np.array([c.cell_index(ix, iz) for ix, iz in c.steady_probes], dtype=np.intp)
        self.transient_cells = np.array([c.cell_index(ix, iz) for ix, iz in c.transient_probes], dtype=np.intp)
        self.n_obs = self.steady_cells.size + self.transient_cells.size * c.n_steps
        if d_obs is not None:
            d_obs = np.asarray(d_obs, dtype=float)
            if d_obs.shape != (self.n_obs,):
                raise ValueError(f"d_obs must have length {self.n_obs}, got {d_obs.shape}")
        self.d_obs = d_obs

        rows = np.concatenate([self.face_i, self.face_i, self.face_j, self.face_j, self.top_cells,
                               np.arange(n)])
        cols = np.concatenate([self.face_i, self.face_j, self.face_i, self.face_j, self.top_cells,
                               np.arange(n)])
        self._jac_rows = rows
        self._jac_cols = cols

    # -- residual and Jacobian blocks ------------------------------------

    @property
    def n_cells(self) -> int:
        return self.config.n_cells

    @property
    def n_params(self) -> int:
        return self.config.n_params

    def connections(self) -> list[tuple[int, int]]:
        """Cell-index pairs of all internal faces (regularizer connectivity)."""
        return list(zip(self.face_i.tolist(), self.face_j.tolist()))

    def _face_quantities(self, u: np.ndarray, m: np.ndarray):
        c = self.config
        t = np.power(10.0, m - c.log_t_ref)
        ti = t[self.face_par_i]
        tj = t[self.face_par_j]
        t_face = 2.0 * ti * tj / (ti + tj)
        kappa = 1.0 + c.beta * 0.5 * (u[self.face_i] + u[self.face_j])
        du = u[self.face_j] - u[self.face_i]
        t_top = t[self.top_pars]
        kappa_top = 1.0 + c.beta * 0.5 * (u[self.top_cells] + c.top_value)
        du_top = c.top_value - u[self.top_cells]
        return t, ti, tj, t_face, kappa, du, t_top, kappa_top, du_top

    def residual(self, u: np.ndarray, m: np.ndarray, u_prev: np.ndarray | None = None,
                 dt: float | None = None) -> np.ndarray:
        """Steady residual when u_prev is None, else the time-step residual."""
        _, _, _, t_face, kappa, du, t_top, kappa_top, du_top = self._face_quantities(u, m)
        g = t_face * kappa * du * self.face_inv_d
        f = np.zeros(self.n_cells)
        np.subtract.at(f, self.face_i, g)
        np.add.at(f, self.face_j, g)
        f[self.top_cells] -= t_top * kappa_top * du_top * self.top_inv_d
        if u_prev is None:
            f -= self.q_steady
        else:
            f -= self.q_transient
            f += self.volume * (u - u_prev) / dt
        return f

    def jacobian_u(self, u: np.ndarray, m: np.ndarray, dt: float | None = None) -> sp.csc_matrix:
        """A = df/du at (u, m); add the storage diagonal when dt is given."""
        c = self.config
        _, _, _, t_face, kappa, du, t_top, kappa_top, du_top = self._face_quantities(u, m)
        half_beta = 0.5 * c.beta
        dg_di = t_face * self.face_inv_d * (half_beta * du - kappa)
        dg_dj = t_face * self.face_inv_d * (half_beta * du + kappa)
        dgb = t_top * self.top_inv_d * (half_beta * du_top - kappa_top)
        storage = np.zeros(self.n_cells)
        if dt is not None:
            storage[:] = self.volume / dt
        data = np.concatenate([-dg_di, -dg_dj, dg_di, dg_dj, -dgb, storage])
        n = self.n_cells
        return sp.coo_matrix((data, (self._jac_rows, self._jac_cols)), shape=(n, n)).tocsc()

    def jacobian_m(self, u: np.ndarray, m: np.ndarray) -> sp.csc_matrix:
        """G = df/dm at (u, m); identical for steady and transient residuals."""
        _, ti, tj, _, kappa, du, t_top, kappa_top, du_top = self._face_quantities(u, m)
        base = kappa * du * self.face_inv_d
        denom = (ti + tj) ** 2
        dT_dmi = LN10 * 2.0 * ti * tj**2 / denom
        dT_dmj = LN10 * 2.0 * tj * ti**2 / denom
        g_i = base * dT_dmi
        g_j = base * dT_dmj
        gb = LN10 * t_top * kappa_top * du_top * self.top_inv_d
        rows = np.concatenate([self.face_i, self.face_j, self.face_i, self.face_j, self.top_cells])
        cols = np.concatenate([self.face_par_i, self.face_par_i, self.face_par_j, self.face_par_j,
                               self.top_pars])
        data = np.concatenate([-g_i, g_i, -g_j, g_j, -gb])
        return sp.coo_matrix((data, (rows, cols)), shape=(self.n_cells, self.n_params)).tocsc()

    # -- nonlinear solves --------------------------------------------------

    def _newton(self, u0: np.ndarray, m: np.ndarray, level: int | str,
                u_prev: np.ndarray | None = None, dt: float | None = None):
        c = self.config
        u = u0.copy()
        norm = np.inf
        for it in range(c.newton_max_iter + 1):
            f = self.residual(u, m, u_prev, dt)
            norm = float(np.max(np.abs(f)))
            if not np.isfinite(norm):
                raise SimulationError(level, norm, it)
            if norm <= c.newton_tol:
                return u, it, norm
            if it == c.newton_max_iter:
                break
            a = self.jacobian_u(u, m, dt)
            u += splu(a).solve(-f)
        raise SimulationError(level, norm, c.newton_max_iter)

    def simulate(self, m: np.ndarray) -> tuple[Trajectory, np.ndarray]:
        """Solve steady state then all time steps; return (trajectory, residual).

        The returned residual is d(m) - d_obs using the model's observation
        vector, or plain d(m) when no observations are attached.
        """
        c = self.config
        m = np.asarray(m, dtype=float)
        if m.shape != (self.n_params,):
            raise ValueError(f"m must have length {self.n_params}, got {m.shape}")
        u0 = np.full(self.n_cells, c.top_value)
        u_steady, its, nrm = self._newton(u0, m, level="steady")
        traj = Trajectory(u_steady=u_steady, u_steps=[], newton_iterations=[its], residual_norms=[nrm])
        u_prev = u_steady
        for k, dt in enumerate(c.timesteps, start=1):
            u_k, its, nrm = self._newton(u_prev, m, level=k, u_prev=u_prev, dt=dt)
            traj.u_steps.append(u_k)
            traj.newton_iterations.append(its)
            traj.residual_norms.append(nrm)
            u_prev = u_k
        d = self.observe(traj)
        r = d if self.d_obs is None else d - self.d_obs
        return traj, r

    def observe(self, traj: Trajectory) -> np.ndarray:
        """Observation vector: steady probes first, then per-step transient probes."""
        parts = [traj.u_steady[self.steady_cells]]
        for u_k in traj.u_steps:
            parts.append(u_k[self.transient_cells])
        return np.concatenate(parts)

    def observation_table(self) -> list[tuple[str, int, int]]:
        """(kind, cell, time_index) per observation row; -1 marks steady rows."""
        rows = [("steady", int(cell), -1) for cell in self.steady_cells]
        for k in range(1, self.config.n_steps + 1):
            rows.extend(("transient", int(cell), k) for cell in self.transient_cells)
        return rows

    # -- sensitivity propagation -------------------------------------------

    def _level_factors(self, traj: Trajectory, m: np.ndarray):
        key = "lu"
        if key not in traj._factors:
            factors = [splu(self.jacobian_u(traj.u_steady, m))]
            for u_k, dt in zip(traj.u_steps, self.config.timesteps):
                factors.append(splu(self.jacobian_u(u_k, m, dt)))
            g_blocks = [self.jacobian_m(traj.u_steady, m)]
            g_blocks.extend(self.jacobian_m(u_k, m) for u_k in traj.u_steps)
            traj._factors[key] = (factors, g_blocks)
        return traj._factors[key]

    def direct_product(self, traj: Trajectory, m: np.ndarray, h: np.ndarray) -> np.ndarray:
        """S @ H by forward-in-time propagation, one multi-RHS solve per level."""
        h = _as_block(h, self.n_params, "h")
        factors, g_blocks = self._level_factors(traj, m)
        x = factors[0].solve(-(g_blocks[0] @ h))
        out = np.zeros((self.n_obs, h.shape[1]))
        n_st = self.steady_cells.size
        out[:n_st] = x[self.steady_cells]
        n_tr = self.transient_cells.size
        for k, dt in enumerate(self.config.timesteps, start=1):
            rhs = -(g_blocks[k] @ h) + (self.volume / dt) * x
            x = factors[k].solve(rhs)
            lo = n_st + (k - 1) * n_tr
            out[lo:lo + n_tr] = x[self.transient_cells]
        return out

    def adjoint_product(self, traj: Trajectory, m: np.ndarray, h: np.ndarray) -> np.ndarray:
        """S^T @ H by backward-in-time propagation with transposed level solves."""
        h = _as_block(h, self.n_obs, "h")
        factors, g_blocks = self._level_factors(traj, m)
        s = h.shape[1]
        n_st = self.steady_cells.size
        n_tr = self.transient_cells.size
        n_steps = self.config.n_steps
        out = np.zeros((self.n_params, s))
        z_next = None
        for k in range(n_steps, 0, -1):
            rhs = np.zeros((self.n_cells, s))
            lo = n_st + (k - 1) * n_tr
            rhs[self.transient_cells] -= h[lo:lo + n_tr]
            if z_next is not None:
                rhs += (self.volume / self.config.timesteps[k]) * z_next
            z = factors[k].solve(rhs, trans="T")
            out += g_blocks[k].T @ z
            z_next = z
        rhs = np.zeros((self.n_cells, s))
        rhs[self.steady_cells] -= h[:n_st]
        if z_next is not None:
            rhs += (self.volume / self.config.timesteps[0]) * z_next
        z = factors[0].solve(rhs, trans="T")
        out += g_blocks[0].T @ z
        return out

    def sensitivity_op(self, traj: Trajectory, m: np.ndarray) -> "SensitivityOp":
        return SensitivityOp(self, traj, m)


class SensitivityOp(LinearOp):
    """Matrix-free S bound to one converged trajectory."""

    def __init__(self, model: TimeSteppingModel, traj: Trajectory, m: np.ndarray):
        self.model = model
        self.traj = traj
        self.m = np.asarray(m, dtype=float)
        self.shape = (model.n_obs, model.n_params)

    def apply(self, h):
        return self.model.direct_product(self.traj, self.m, h)

    def apply_t(self, h):
        return self.model.adjoint_product(self.traj, self.m, h)


def smooth_random_field(config: GridConfig, seed, amplitude: float = 0.8,
                        smoothing_passes: int = 6) -> np.ndarray:
    """Correlated random exponent field around the center of the usual bounds.

    Used to generate twin-experiment truth parameters: one smoothed Gaussian
    field per family, clipped well inside [-16, -13].
    """
    rng = np.random.default_rng(seed)
    c = config
    fields = []
    for _ in range(2):
        grid = rng.standard_normal((c.n_z, c.n_x))
        for _ in range(smoothing_passes):
            padded = np.pad(grid, 1, mode="edge")
            grid = (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2]
                    + padded[1:-1, 2:] + padded[1:-1, 1:-1]) / 5.0
        grid -= grid.mean()
        peak = np.max(np.abs(grid))
        if peak > 0.0:
            grid *= amplitude / peak
        fields.append(grid.reshape(-1))
    truth = np.concatenate([(-14.0 + f) for f in fields])
    return np.clip(truth, -15.8, -13.2)


def generate_observations(config: GridConfig, truth: np.ndarray, noise_seed) -> np.ndarray:
    """Noiseless observations of the truth plus seeded Gaussian noise."""
    model = TimeSteppingModel(config)
    _, d_clean = model.simulate(truth)
    rng = np.random.default_rng(noise_seed)
    return d_clean + config.noise_sigma * rng.standard_normal(d_clean.size)
