"""Run configuration: typed sections, INI parsing and default printing.

A run is fully determined by one config file; the same file reproduces the
same outputs byte for byte. Sections: [model] (grid, physics, probes, twin
generation), [problem] (regularization and bounds), [method] (estimator and
truncation schedule), [driver] (outer loop), [output], [replicate].
"""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields

from .inversion import ESTIMATORS


class ConfigError(ValueError):
    """Configuration rejected; the message names the offending field path."""


@dataclass
class ModelSection:
    n_x: int = 16
    n_z: int = 16
    dx: float = 1.0
    dz: float = 1.0
    top_value: float = 10.0
    bottom_influx: float = 3.0
    beta: float = 0.1
    log_t_ref: float = -14.0
    n_steps: int = 12
    dt: float = 0.1
    wells: str = "3,12 8,13 12,11"
    well_rate: float = -15.0
    steady_probe_cols: str = "2 5 8 11 14"
    steady_probe_rows: str = "1 3 5 7 9 11 13 15"
    noise_sigma: float = 0.5
    truth_seed: int = 1234
    truth_amplitude: float = 0.8
    truth_smoothing: int = 6
    newton_tol: float = 1e-10
    newton_max_iter: int = 50


@dataclass
class ProblemSection:
    mu: float = 10.0
    m_pr: float = -14.0
    bound_lo: float = -16.0
    bound_hi: float = -13.0
    reg_identity_shift: float = 1e-3


@dataclass
class MethodSection:
    estimator: str = "lanczos"
    l: int = 10
    l1: int = 10
    l2: int = 20
    eps_sv: float = 1e-5
    orthogonalize_samples: bool = True
    allow_equal_oversampling: bool = False
    schedule: str = "linear"
    p_init: int = 1
    p_step: int = 2
    p_max: int = 50
    sv_cut_init: float = 0.5
    sv_cut_factor: float = 0.5


@dataclass
class DriverSection:
    iter_max: int = 30
    eps_m: float = 1e-6
    gamma0: float = 1e6
    gamma_floor: float = 0.0
    seed: int = 0


@dataclass
class OutputSection:
    out_dir: str = "runs"
    prefix: str = "run"


@dataclass
class ReplicateSection:
    n_runs: int = 1
    base_seed: int = 0
    seeds: str = ""


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    problem: ProblemSection = field(default_factory=ProblemSection)
    method: MethodSection = field(default_factory=MethodSection)
    driver: DriverSection = field(default_factory=DriverSection)
    output: OutputSection = field(default_factory=OutputSection)
    replicate: ReplicateSection = field(default_factory=ReplicateSection)

    def validate(self) -> "RunConfig":
        m = self.model
        if m.n_x < 2 or m.n_z < 2:
            raise ConfigError("model.n_x/model.n_z: grid must be at least 2x2")
        if m.n_steps < 1 or m.dt <= 0.0:
            raise ConfigError("model.n_steps/model.dt: need at least one positive time step")
        if m.noise_sigma < 0.0:
            raise ConfigError("model.noise_sigma: must be >= 0")
        for name, pairs in (("model.wells", m.wells),):
            for ix, iz in parse_pairs(pairs, name):
                if not (0 <= ix < m.n_x and 0 <= iz < m.n_z):
                    raise ConfigError(f"{name}: cell ({ix},{iz}) outside the grid")
        for name, text, limit in (("model.steady_probe_cols", m.steady_probe_cols, m.n_x),
                                  ("model.steady_probe_rows", m.steady_probe_rows, m.n_z)):
            for v in parse_ints(text, name):
                if not 0 <= v < limit:
                    raise ConfigError(f"{name}: index {v} outside the grid")
        if self.problem.mu <= 0.0:
            raise ConfigError("problem.mu: must be positive")
        if self.problem.bound_lo >= self.problem.bound_hi:
            raise ConfigError("problem.bound_lo/bound_hi: need lo < hi")
        me = self.method
        if me.estimator not in ESTIMATORS:
            raise ConfigError(f"method.estimator: unknown estimator {me.estimator!r} "
                              f"(choose from {', '.join(ESTIMATORS)})")
        if me.schedule not in ("linear", "sv_cut"):
            raise ConfigError(f"method.schedule: unknown schedule {me.schedule!r}")
        if me.schedule == "sv_cut" and me.estimator != "lanczos":
            raise ConfigError("method.schedule: sv_cut is only supported with the "
                              "lanczos estimator")
        if me.p_init < 1 or me.p_max < me.p_init or me.p_step < 0:
            raise ConfigError("method.p_init/p_step/p_max: invalid truncation schedule")
        if me.l < 0 or me.l1 < 0 or me.l2 < me.l1:
            raise ConfigError("method.l/l1/l2: need l >= 0 and l2 >= l1 >= 0")
        if me.l1 == me.l2 and not me.allow_equal_oversampling:
            raise ConfigError("method.l1/l2: l1 == l2 is fragile for the 1-view method; "
                              "set allow_equal_oversampling to override")
        d = self.driver
        if d.iter_max < 1 or d.eps_m <= 0.0 or d.gamma0 <= 0.0 or d.gamma_floor < 0.0:
            raise ConfigError("driver: iter_max >= 1, eps_m > 0, gamma0 > 0, gamma_floor >= 0")
        if self.replicate.n_runs < 1:
            raise ConfigError("replicate.n_runs: must be >= 1")
        if self.replicate.seeds:
            seeds = parse_ints(self.replicate.seeds, "replicate.seeds")
            if len(seeds) != self.replicate.n_runs:
                raise ConfigError("replicate.seeds: length must equal replicate.n_runs")
        return self

    def replicate_seeds(self) -> list[int]:
        rep = self.replicate
        if rep.seeds:
            return parse_ints(rep.seeds, "replicate.seeds")
        return [rep.base_seed + k for k in range(rep.n_runs)]

    def to_dict(self) -> dict:
        return {f.name: asdict(getattr(self, f.name)) for f in fields(self)}


def parse_ints(text: str, name: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split()]
    except ValueError as exc:
        raise ConfigError(f"{name}: expected whitespace-separated integers ({exc})") from None


def parse_pairs(text: str, name: str) -> list[tuple[int, int]]:
    pairs = []
    for tok in text.split():
        parts = tok.split(",")
        if len(parts) != 2:
            raise ConfigError(f"{name}: expected ix,iz pairs, got {tok!r}")
        try:
            pairs.append((int(parts[0]), int(parts[1])))
        except ValueError:
            raise ConfigError(f"{name}: expected integer pair, got {tok!r}") from None
    return pairs


def _coerce(section: str, key: str, raw: str, target_type):
    try:
        if target_type is bool:
            lowered = raw.strip().lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return target_type(raw)
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from None


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    for f in fields(cfg):
        section = data.get(f.name, {})
        target = getattr(cfg, f.name)
        known = {sf.name: sf.type for sf in fields(target)}
        for key, value in section.items():
            if key not in known:
                raise ConfigError(f"{f.name}.{key}: unknown key")
            setattr(target, key, value)
    return cfg.validate()


def load_config(path: str) -> RunConfig:
    """Parse an INI config file (or re-load one embedded in a manifest dict)."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path) as fh:
        parser.read_file(fh)
    cfg = RunConfig()
    for f in fields(cfg):
        target = getattr(cfg, f.name)
        known = {sf.name: sf.type for sf in fields(target)}
        if not parser.has_section(f.name):
            continue
        for key, raw in parser.items(f.name):
            if key not in known:
                raise ConfigError(f"{f.name}.{key}: unknown key")
            pytype = {"int": int, "float": float, "str": str, "bool": bool}[known[key]]
            setattr(target, key, _coerce(f.name, key, raw, pytype))
    extra = set(parser.sections()) - {f.name for f in fields(cfg)}
    if extra:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(extra))}")
    return cfg.validate()


_SECTION_NOTES = {
    "model": "grid, physics, probes and twin-data generation",
    "problem": "objective weights, prior and parameter bounds",
    "method": "TSVD estimator, oversampling and truncation schedule",
    "driver": "outer Levenberg-Marquardt loop",
    "output": "where runs write their files",
    "replicate": "repeated runs with varied sketch seeds",
}


def default_config_text() -> str:
    """Self-documenting INI with every key at its default value."""
    cfg = RunConfig()
    out = io.StringIO()
    out.write("# tsvdlm run configuration (defaults)\n")
    for f in fields(cfg):
        out.write(f"\n[{f.name}]  # {_SECTION_NOTES[f.name]}\n")
        for sf in fields(getattr(cfg, f.name)):
            value = getattr(getattr(cfg, f.name), sf.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            out.write(f"{sf.name} = {value}\n")
    return out.getvalue()
