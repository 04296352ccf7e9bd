"""Batch orchestration: twin generation, inversion runs, manifests and reports.

File formats
------------
observations CSV   obs_id, kind{steady|transient}, cell, time_index, value, sigma
parameter grids    plain CSV of grid rows, n_z lines per family, horizontal
                   family block first then vertical (row-major cells)
convergence CSV    iter, Phi, Phi_d, Phi_N, Phi_m, p, gamma, accepted,
                   n_direct_cols, n_adjoint_cols, n_simulations
manifest JSON      full resolved config, seeds, per-iteration history, final
                   mismatches, call counts, wall times, problem hash

All files are written atomically (temp file + rename). Floats are formatted
with repr so re-running an identical config reproduces identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict, parse_ints, parse_pairs
from .inversion import (
    InverseProblem,
    build_regularizer,
    mismatch_bounds,
    run_tsvd_lm,
)
from .model import GridConfig, TimeSteppingModel, generate_observations, smooth_random_field
from .sketch import SketchConfig, TruncationSchedule


def grid_config(cfg: RunConfig) -> GridConfig:
    m = cfg.model
    cols = parse_ints(m.steady_probe_cols, "model.steady_probe_cols")
    rows = parse_ints(m.steady_probe_rows, "model.steady_probe_rows")
    wells = tuple(parse_pairs(m.wells, "model.wells"))
    return GridConfig(
        n_x=m.n_x, n_z=m.n_z, dx=m.dx, dz=m.dz, top_value=m.top_value,
        bottom_influx=m.bottom_influx, beta=m.beta, log_t_ref=m.log_t_ref,
        timesteps=(m.dt,) * m.n_steps, wells=wells, well_rate=m.well_rate,
        steady_probes=tuple((ix, iz) for ix in cols for iz in rows),
        transient_probes=wells, noise_sigma=m.noise_sigma,
        newton_tol=m.newton_tol, newton_max_iter=m.newton_max_iter,
    )


def sketch_config(cfg: RunConfig, seed: int) -> SketchConfig:
    me = cfg.method
    return SketchConfig(p=me.p_init, l=me.l, l1=me.l1, l2=me.l2, eps_sv=me.eps_sv,
                        seed=seed, orthogonalize_samples=me.orthogonalize_samples,
                        allow_equal_oversampling=me.allow_equal_oversampling)


def truncation_schedule(cfg: RunConfig) -> TruncationSchedule:
    me = cfg.method
    return TruncationSchedule(kind=me.schedule, p_init=me.p_init, p_step=me.p_step,
                              p_max=me.p_max, sv_cut_init=me.sv_cut_init,
                              sv_cut_factor=me.sv_cut_factor)


def build_problem(cfg: RunConfig, model: TimeSteppingModel, d_obs: np.ndarray,
                  sigmas: np.ndarray) -> InverseProblem:
    p = cfg.problem
    n_params = model.n_params
    _, l_inv = build_regularizer(model.connections(), n_params,
                                 identity_shift=p.reg_identity_shift)
    return InverseProblem(
        d_obs=d_obs, gamma_d_diag=sigmas**2,
        m_pr=np.full(n_params, p.m_pr), l_inv=l_inv, mu=p.mu,
        lo=np.full(n_params, p.bound_lo), hi=np.full(n_params, p.bound_hi),
    )


# ---------------------------------------------------------------------------
# atomic, reproducible file output
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


def write_json(path: Path, payload: dict) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def write_param_grid(path: Path, cfg_grid: GridConfig, m: np.ndarray) -> None:
    n = cfg_grid.n_cells
    lines = []
    for family in (m[:n], m[n:]):
        grid = family.reshape(cfg_grid.n_z, cfg_grid.n_x)
        lines.extend(",".join(repr(float(v)) for v in row) for row in grid)
    _atomic_write(path, "\n".join(lines) + "\n")


def read_param_grid(path: Path, cfg_grid: GridConfig) -> np.ndarray:
    rows = [[float(tok) for tok in line.split(",")]
            for line in Path(path).read_text().splitlines() if line.strip()]
    arr = np.array(rows)
    if arr.shape != (2 * cfg_grid.n_z, cfg_grid.n_x):
        raise ValueError(f"grid file {path} has shape {arr.shape}, expected "
                         f"{(2 * cfg_grid.n_z, cfg_grid.n_x)}")
    return arr.reshape(-1)


# ---------------------------------------------------------------------------
# twin experiment data
# ---------------------------------------------------------------------------


def generate_twin(cfg: RunConfig, out_dir: str | Path) -> dict:
    """Write the twin-experiment observations and truth grid for a config."""
    out = Path(out_dir)
    g = grid_config(cfg)
    truth = smooth_random_field(g, cfg.model.truth_seed,
                                amplitude=cfg.model.truth_amplitude,
                                smoothing_passes=cfg.model.truth_smoothing)
    truth = np.clip(truth, cfg.problem.bound_lo, cfg.problem.bound_hi)
    d_obs = generate_observations(g, truth, noise_seed=cfg.model.truth_seed + 1)
    model = TimeSteppingModel(g)
    rows = []
    for obs_id, (kind, cell, t_index) in enumerate(model.observation_table()):
        rows.append([obs_id, kind, cell, t_index, d_obs[obs_id], g.noise_sigma])
    obs_path = out / "observations.csv"
    write_csv(obs_path, ["obs_id", "kind", "cell", "time_index", "value", "sigma"], rows)
    truth_path = out / "truth_grid.csv"
    write_param_grid(truth_path, g, truth)
    return {"observations": str(obs_path), "truth_grid": str(truth_path),
            "n_obs": int(d_obs.size), "truth": truth, "d_obs": d_obs}


def load_observations(path: str | Path, model: TimeSteppingModel) -> tuple[np.ndarray, np.ndarray]:
    """Read an observations CSV and check it matches the model's layout."""
    expected = model.observation_table()
    values = np.zeros(len(expected))
    sigmas = np.zeros(len(expected))
    with open(path) as fh:
        reader = csv.DictReader(fh)
        n_seen = 0
        for row in reader:
            i = int(row["obs_id"])
            if i >= len(expected):
                raise ValueError(f"{path}: obs_id {i} out of range (model has {len(expected)})")
            kind, cell, t_index = expected[i]
            if row["kind"] != kind or int(row["cell"]) != cell or int(row["time_index"]) != t_index:
                raise ValueError(f"{path}: observation {i} does not match the configured "
                                 f"probe layout")
            values[i] = float(row["value"])
            sigmas[i] = float(row["sigma"])
            n_seen += 1
    if n_seen != len(expected):
        raise ValueError(f"{path}: expected {len(expected)} observations, found {n_seen}")
    return values, sigmas


# ---------------------------------------------------------------------------
# inversion runs
# ---------------------------------------------------------------------------


def problem_hash(cfg: RunConfig, d_obs: np.ndarray) -> str:
    digest = hashlib.sha256()
    payload = {"model": asdict(cfg.model), "problem": asdict(cfg.problem)}
    digest.update(json.dumps(payload, sort_keys=True).encode())
    digest.update(np.ascontiguousarray(d_obs).tobytes())
    return digest.hexdigest()[:16]


def run_inversion(cfg: RunConfig, d_obs: np.ndarray, sigmas: np.ndarray,
                  seed: int | None = None, tag: str = "") -> dict:
    """One inversion run; returns the manifest dict (not yet written)."""
    g = grid_config(cfg)
    model = TimeSteppingModel(g, d_obs=d_obs)
    problem = build_problem(cfg, model, d_obs, sigmas)
    run_seed = cfg.driver.seed if seed is None else seed
    t0 = time.perf_counter()
    result = run_tsvd_lm(
        problem, model,
        estimator=cfg.method.estimator,
        sketch=sketch_config(cfg, run_seed),
        schedule=truncation_schedule(cfg),
        iter_max=cfg.driver.iter_max,
        eps_m=cfg.driver.eps_m,
        gamma0=cfg.driver.gamma0,
        gamma_floor=cfg.driver.gamma_floor,
        seed=run_seed,
    )
    wall = time.perf_counter() - t0
    bounds = mismatch_bounds(problem.n_obs)
    history = []
    for rec in result.history:
        entry = {k: rec.csv_row()[i] for i, k in enumerate(rec.CSV_FIELDS)}
        entry["t_simulate"] = rec.t_simulate
        entry["t_sketch"] = rec.t_sketch
        entry["t_update"] = rec.t_update
        history.append(entry)
    manifest = {
        "config": cfg.to_dict(),
        "tag": tag,
        "estimator": cfg.method.estimator,
        "seed": run_seed,
        "mu": cfg.problem.mu,
        "problem_hash": problem_hash(cfg, d_obs),
        "converged": result.converged,
        "iterations": result.state.iteration - 1,
        "final": {
            "phi": result.objective.phi,
            "phi_d": result.objective.phi_d,
            "phi_m": result.objective.phi_m,
            "phi_n": result.objective.phi_n,
            "phi_n_bounds": [bounds.lo_n, bounds.hi_n],
            "phi_n_in_bounds": bool(bounds.lo_n <= result.objective.phi_n <= bounds.hi_n),
        },
        "counts": {
            "n_simulations": result.n_simulations,
            "n_direct_cols": result.counter.forward_cols,
            "n_adjoint_cols": result.counter.adjoint_cols,
        },
        "wall_time_s": wall,
        "history": history,
        "final_m": result.m.tolist(),
    }
    return manifest


def history_rows(manifest: dict) -> list[list]:
    fields = ("iter", "Phi", "Phi_d", "Phi_N", "Phi_m", "p", "gamma", "accepted",
              "n_direct_cols", "n_adjoint_cols", "n_simulations")
    return [[entry[k] for k in fields] for entry in manifest["history"]]


def write_run_outputs(manifest: dict, cfg: RunConfig, out_dir: str | Path,
                      name: str) -> dict:
    out = Path(out_dir)
    g = grid_config(cfg)
    paths = {
        "manifest": out / f"{name}_manifest.json",
        "convergence": out / f"{name}_convergence.csv",
        "final_grid": out / f"{name}_final_grid.csv",
    }
    write_json(paths["manifest"], manifest)
    write_csv(paths["convergence"],
              list(("iter", "Phi", "Phi_d", "Phi_N", "Phi_m", "p", "gamma", "accepted",
                    "n_direct_cols", "n_adjoint_cols", "n_simulations")),
              history_rows(manifest))
    write_param_grid(paths["final_grid"], g, np.array(manifest["final_m"]))
    return {k: str(v) for k, v in paths.items()}


def run_replicates(cfg: RunConfig, d_obs: np.ndarray, sigmas: np.ndarray,
                   out_dir: str | Path, threads: int = 1) -> list[dict]:
    """Run every replicate seed; write per-run outputs and a summary CSV."""
    seeds = cfg.replicate_seeds()
    out = Path(out_dir)

    def one(k_seed):
        k, s = k_seed
        return run_inversion(cfg, d_obs, sigmas, seed=s, tag=f"replicate-{k}")

    jobs = list(enumerate(seeds))
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            manifests = list(pool.map(one, jobs))
    else:
        manifests = [one(j) for j in jobs]

    names = [f"{cfg.output.prefix}_{cfg.method.estimator}_seed{s}" for s in seeds]
    for manifest, name in zip(manifests, names):
        write_run_outputs(manifest, cfg, out, name)

    if len(manifests) > 1:
        rows = []
        for s, man in zip(seeds, manifests):
            f = man["final"]
            rows.append([s, f["phi"], f["phi_d"], f["phi_m"], f["phi_n"],
                         int(man["converged"]), man["counts"]["n_simulations"],
                         man["counts"]["n_direct_cols"], man["counts"]["n_adjoint_cols"],
                         man["wall_time_s"]])
        finals = np.array([[m["final"]["phi"], m["final"]["phi_d"], m["final"]["phi_m"],
                            m["final"]["phi_n"]] for m in manifests])
        for label, agg in (("ave", np.mean), ("min", np.min), ("max", np.max)):
            v = agg(finals, axis=0)
            rows.append([label, v[0], v[1], v[2], v[3], "", "", "", "", ""])
        write_csv(out / f"{cfg.output.prefix}_{cfg.method.estimator}_summary.csv",
                  ["seed", "phi", "phi_d", "phi_m", "phi_n", "converged",
                   "n_simulations", "n_direct_cols", "n_adjoint_cols", "wall_time_s"],
                  rows)
    return manifests


# ---------------------------------------------------------------------------
# comparison report
# ---------------------------------------------------------------------------

COMPARE_FIELDS = ("label", "estimator", "seed", "phi", "phi_d", "phi_n", "phi_m",
                  "n_simulations", "n_direct_cols", "n_adjoint_cols", "wall_time_s",
                  "phi_n_in_bounds")


def compare_manifests(manifests: list[dict], labels: list[str] | None = None) -> list[dict]:
    """Tabulate runs over one problem; refuses to mix different problems."""
    if len(manifests) < 2:
        raise ValueError("compare needs at least two manifests")
    hashes = {m["problem_hash"] for m in manifests}
    if len(hashes) > 1:
        raise ValueError(f"manifests describe different problems (hashes {sorted(hashes)})")
    labels = labels if labels is not None else [m.get("tag") or m["estimator"] for m in manifests]
    rows = []
    for label, m in zip(labels, manifests):
        f, c = m["final"], m["counts"]
        rows.append({
            "label": label, "estimator": m["estimator"], "seed": m["seed"],
            "phi": f["phi"], "phi_d": f["phi_d"], "phi_n": f["phi_n"], "phi_m": f["phi_m"],
            "n_simulations": c["n_simulations"], "n_direct_cols": c["n_direct_cols"],
            "n_adjoint_cols": c["n_adjoint_cols"], "wall_time_s": m["wall_time_s"],
            "phi_n_in_bounds": f["phi_n_in_bounds"],
        })
    return rows


def format_compare_table(rows: list[dict]) -> str:
    cols = COMPARE_FIELDS
    table = [[_fmt(r[c]) if not isinstance(r[c], float) else f"{r[c]:.4g}" for c in cols]
             for r in rows]
    widths = [max(len(c), *(len(t[i]) for t in table)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(t.ljust(w) for t, w in zip(row, widths)) for row in table)
    return "\n".join(lines)


def rerun_from_manifest(manifest: dict) -> dict:
    """Re-run the embedded config of a manifest; the observation data is
    regenerated from the config's twin seeds, so the history reproduces
    bit-exact."""
    cfg = config_from_dict(manifest["config"])
    g = grid_config(cfg)
    truth = smooth_random_field(g, cfg.model.truth_seed,
                                amplitude=cfg.model.truth_amplitude,
                                smoothing_passes=cfg.model.truth_smoothing)
    truth = np.clip(truth, cfg.problem.bound_lo, cfg.problem.bound_hi)
    d_obs = generate_observations(g, truth, noise_seed=cfg.model.truth_seed + 1)
    sigmas = np.full(d_obs.size, g.noise_sigma)
    return run_inversion(cfg, d_obs, sigmas, seed=manifest["seed"], tag=manifest.get("tag", ""))
