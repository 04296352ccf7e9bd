"""Command-line front end.

Subcommands:
  generate-twin   write synthetic observations and the truth parameter grid
  invert          run an inversion (or replicates) against generated data
  compare         tabulate several run manifests side by side
  oracle-check    dense-oracle self-tests on a small configuration
  config          print the default configuration file
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import runner
from .config import ConfigError, RunConfig, config_from_dict, default_config_text, load_config
from .inversion import build_regularizer, lm_update, mismatch_bounds, objective
from .model import TimeSteppingModel
from .oracle import assemble_dense_sensitivity, solve_full_lm
from .sketch import TruncatedSvd, tsvd_lanczos


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    if path.endswith(".json"):
        with open(path) as fh:
            payload = json.load(fh)
        return config_from_dict(payload["config"] if "config" in payload else payload)
    return load_config(path)


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "estimator", None):
        cfg.method.estimator = args.estimator
    if getattr(args, "seed", None) is not None:
        cfg.driver.seed = args.seed
        cfg.replicate.base_seed = args.seed
    return cfg.validate()


def cmd_generate_twin(args) -> int:
    cfg = _apply_overrides(_load_run_config(args.config), args)
    info = runner.generate_twin(cfg, args.out)
    print(f"wrote {info['observations']} ({info['n_obs']} observations)")
    print(f"wrote {info['truth_grid']}")
    return 0


def cmd_invert(args) -> int:
    cfg = _apply_overrides(_load_run_config(args.config), args)
    out = Path(args.out)
    obs_path = Path(args.observations) if args.observations else out / "observations.csv"
    if not obs_path.exists():
        print(f"error: observation file {obs_path} not found (run generate-twin first)",
              file=sys.stderr)
        return 2
    model = TimeSteppingModel(runner.grid_config(cfg))
    d_obs, sigmas = runner.load_observations(obs_path, model)
    manifests = runner.run_replicates(cfg, d_obs, sigmas, out, threads=args.threads)
    last = manifests[-1]
    status = "converged" if last["converged"] else "iter_max"
    for man in manifests:
        f = man["final"]
        print(f"seed {man['seed']}: Phi = {f['phi']:.4g}  Phi_d = {f['phi_d']:.4g}  "
              f"Phi_N = {f['phi_n']:.4g}  in-bounds = {f['phi_n_in_bounds']}")
    print(f"run finished ({status}); outputs in {out}")
    return 0


def cmd_compare(args) -> int:
    manifests = []
    for path in args.manifests:
        with open(path) as fh:
            manifests.append(json.load(fh))
    try:
        rows = runner.compare_manifests(manifests, labels=[Path(p).stem for p in args.manifests])
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    table = runner.format_compare_table(rows)
    print(table)
    if args.out:
        out = Path(args.out)
        runner.write_csv(out / "comparison.csv", list(runner.COMPARE_FIELDS),
                         [[r[c] for c in runner.COMPARE_FIELDS] for r in rows])
        print(f"wrote {out / 'comparison.csv'}")
    return 0


def cmd_oracle_check(args) -> int:
    """Dense-oracle consistency suite on a deliberately small grid."""
    cfg = _load_run_config(args.config)
    cfg.model.n_x = min(cfg.model.n_x, 8)
    cfg.model.n_z = min(cfg.model.n_z, 8)
    cfg.model.steady_probe_cols = "1 3 5"
    cfg.model.steady_probe_rows = "1 3 5 7"
    cfg.model.wells = "2,5 5,6 6,3"
    cfg.validate()
    g = runner.grid_config(cfg)
    truth = runner.smooth_random_field(g, cfg.model.truth_seed)
    d_obs = runner.generate_observations(g, truth, noise_seed=cfg.model.truth_seed + 1)
    sigmas = np.full(d_obs.size, g.noise_sigma)
    model = TimeSteppingModel(g, d_obs=d_obs)
    problem = runner.build_problem(cfg, model, d_obs, sigmas)
    m = problem.m_pr

    failures = 0

    def check(name: str, ok: bool, detail: str):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}  ({detail})")
        failures += 0 if ok else 1

    ref_adj = assemble_dense_sensitivity(model, problem, m, mode="adjoint")
    ref_fd = assemble_dense_sensitivity(model, problem, m, mode="finite-diff")
    scale = np.max(np.abs(ref_adj.s_dense))
    rel = np.max(np.abs(ref_adj.s_dense - ref_fd.s_dense)) / scale
    check("dense assembly: adjoint columns vs finite differences", rel <= 1e-4,
          f"max relative discrepancy {rel:.2e}")

    res = tsvd_lanczos(_dense_op(ref_adj.sd_dense), p=10, eps_sv=1e-10)
    lam_ref = ref_adj.lam[:res.tsvd.p]
    sv_err = np.max(np.abs(res.tsvd.lam - lam_ref) / lam_ref)
    check("bidiagonalization spectrum vs dense SVD", sv_err <= 1e-8,
          f"max relative error {sv_err:.2e}")

    traj, r = model.simulate(m)
    full = TruncatedSvd(ref_adj.u, ref_adj.lam, ref_adj.v)
    m_tilde = problem.l_inv @ (m - problem.m_pr)
    delta = lm_update(full, problem, m_tilde, 10.0, r)
    exact = solve_full_lm(ref_adj.sd_dense, problem, m_tilde, 10.0, r)
    rel = np.linalg.norm(delta - exact) / np.linalg.norm(exact)
    check("full-rank update vs direct dense solve", rel <= 1e-8, f"relative error {rel:.2e}")

    obj = objective(problem, m, r)
    bounds = mismatch_bounds(problem.n_obs)
    check("objective finite and bounds well-formed",
          np.isfinite(obj.phi) and bounds.lo < bounds.hi,
          f"Phi = {obj.phi:.4g}, window [{bounds.lo:.4g}, {bounds.hi:.4g}]")

    print("oracle-check:", "all passed" if failures == 0 else f"{failures} failure(s)")
    return 0 if failures == 0 else 1


def _dense_op(a: np.ndarray):
    from .operators import MatrixOp

    return MatrixOp(a)


def cmd_config(args) -> int:
    if args.print_defaults:
        sys.stdout.write(default_config_text())
        return 0
    print("nothing to do; use --print-defaults", file=sys.stderr)
    return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsvdlm",
                                     description="Truncated-SVD Levenberg-Marquardt inversion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="INI config file (or a manifest JSON to reuse its config)")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--seed", type=int, help="override driver and replicate base seed")
        p.add_argument("--threads", type=int, default=1, help="parallel replicate workers")
        p.add_argument("--estimator", help="override method.estimator")

    p_gen = sub.add_parser("generate-twin", help="write twin-experiment observations and truth")
    add_common(p_gen)
    p_gen.set_defaults(func=cmd_generate_twin)

    p_inv = sub.add_parser("invert", help="run inversion(s) against generated observations")
    add_common(p_inv)
    p_inv.add_argument("--observations", help="observations CSV (default: <out>/observations.csv)")
    p_inv.set_defaults(func=cmd_invert)

    p_cmp = sub.add_parser("compare", help="tabulate run manifests")
    p_cmp.add_argument("manifests", nargs="+", help="manifest JSON files")
    p_cmp.add_argument("--out", default="", help="directory for comparison.csv")
    p_cmp.set_defaults(func=cmd_compare)

    p_orc = sub.add_parser("oracle-check", help="dense-oracle self-tests on a small grid")
    p_orc.add_argument("--config", help="INI config file")
    p_orc.set_defaults(func=cmd_oracle_check)

    p_cfg = sub.add_parser("config", help="configuration helpers")
    p_cfg.add_argument("--print-defaults", action="store_true")
    p_cfg.set_defaults(func=cmd_config)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
