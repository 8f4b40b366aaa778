"""Run configuration: a single YAML file with nested sections.

The schema is fixed; unknown keys are validation errors so typos fail
fast, before any computation. All validation problems are collected and
reported together.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geometry import MeshSettings
from .priors import (GaussianPriorSpec, PcMaternSpec, PcPrecisionSpec,
                     PriorConfig)


class ConfigError(ValueError):
    """Carries every validation problem found in a config file."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


_SECTIONS = {"paths", "mesh", "grid", "priors", "noise", "design", "seed",
             "output_dir", "fit", "shortrec", "simulate", "predict"}


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path

    gauges_path: Path | None = None
    runoff_path: Path | None = None
    catchments_path: Path | None = None
    catchment_nodes_path: Path | None = None
    future_runoff_path: Path | None = None

    mesh_settings: MeshSettings = field(default_factory=MeshSettings)
    grid_spacing_km: float = 1.0
    grid_origin: tuple[float, float] = (0.0, 0.0)
    prior_config: PriorConfig = field(default_factory=PriorConfig)
    default_areal_sd_fraction: float = 0.03
    design: str = "P+A"
    seed: int = 0
    output_dir: Path = Path("out")
    fit_options: dict = field(default_factory=dict)
    shortrec_record_lengths: tuple[int, ...] = (1, 2, 3)
    shortrec_repeats: int = 10
    sim_scenario: int = 1
    sim_climates: int = 20
    sim_targets: tuple[str, ...] = ("C1", "C4")
    sim_grid_spacing_km: float = 2.0
    predict_grid_spacing_km: float | None = None

    def config_hash(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:12]


def _expect_mapping(problems, raw, key):
    val = raw.get(key)
    if val is None:
        return {}
    if not isinstance(val, dict):
        problems.append(f"section {key!r} must be a mapping")
        return {}
    return val


def _get_number(problems, section, name, value, default, positive=False):
    if value is None:
        return default
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        problems.append(f"{section}.{name} must be a number, got {value!r}")
        return default
    if positive and value <= 0:
        problems.append(f"{section}.{name} must be positive, got {value}")
        return default
    return float(value)


def load_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a YAML config; overrides (from CLI flags) win."""
    path = Path(path)
    problems: list[str] = []
    if not path.exists():
        raise ConfigError([f"config file not found: {path}"])
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"config is not valid YAML: {exc}"])
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])
    raw = dict(raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, leaf = key.partition(".")
        if leaf:
            raw.setdefault(section, {})
            if isinstance(raw[section], dict):
                raw[section][leaf] = value
        else:
            raw[key] = value

    unknown = set(raw) - _SECTIONS
    if unknown:
        problems.append(f"unknown config sections: {sorted(unknown)}")

    cfg = RunConfig(raw=raw, base_dir=path.parent.resolve())

    paths = _expect_mapping(problems, raw, "paths")
    unknown_paths = set(paths) - {"gauges", "runoff", "catchments",
                                  "catchment_nodes", "future_runoff"}
    if unknown_paths:
        problems.append(f"unknown keys in paths: {sorted(unknown_paths)}")

    def resolve(key):
        val = paths.get(key)
        if val is None:
            return None
        p = (cfg.base_dir / str(val)).resolve()
        if not p.exists():
            problems.append(f"paths.{key}: file not found: {p}")
        return p

    cfg.gauges_path = resolve("gauges")
    cfg.runoff_path = resolve("runoff")
    cfg.catchments_path = resolve("catchments")
    cfg.catchment_nodes_path = resolve("catchment_nodes")
    cfg.future_runoff_path = resolve("future_runoff")
    if cfg.catchments_path and cfg.catchment_nodes_path:
        problems.append("give either paths.catchments or paths.catchment_nodes, not both")

    mesh = _expect_mapping(problems, raw, "mesh")
    max_edge = _get_number(problems, "mesh", "max_edge_km",
                           mesh.get("max_edge_km"), 5.0, positive=True)
    extension = mesh.get("extension_km")
    if extension is not None:
        extension = _get_number(problems, "mesh", "extension_km", extension, None,
                                positive=True)
    coarsen = _get_number(problems, "mesh", "exterior_coarsen",
                          mesh.get("exterior_coarsen"), 1.0, positive=True)
    try:
        cfg.mesh_settings = MeshSettings(max_edge_km=max_edge, extension_km=extension,
                                         exterior_coarsen=max(coarsen, 1.0))
    except ValueError as exc:
        problems.append(f"mesh: {exc}")

    grid = _expect_mapping(problems, raw, "grid")
    cfg.grid_spacing_km = _get_number(problems, "grid", "spacing_km",
                                      grid.get("spacing_km"), 1.0, positive=True)
    origin = grid.get("origin", [0.0, 0.0])
    if (not isinstance(origin, (list, tuple)) or len(origin) != 2
            or not all(isinstance(v, (int, float)) for v in origin)):
        problems.append(f"grid.origin must be [x, y], got {origin!r}")
    else:
        cfg.grid_origin = (float(origin[0]), float(origin[1]))

    priors = _expect_mapping(problems, raw, "priors")
    try:
        cfg.prior_config = _parse_priors(priors)
    except ValueError as exc:
        problems.append(f"priors: {exc}")

    noise = _expect_mapping(problems, raw, "noise")
    cfg.default_areal_sd_fraction = _get_number(
        problems, "noise", "default_areal_sd_fraction",
        noise.get("default_areal_sd_fraction"), 0.03, positive=True)

    design = raw.get("design", "P+A")
    if design not in ("P", "A", "P+A"):
        problems.append(f"design must be P, A or P+A, got {design!r}")
    else:
        cfg.design = design

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        problems.append(f"seed must be an integer, got {seed!r}")
    else:
        cfg.seed = seed

    cfg.output_dir = (cfg.base_dir / str(raw.get("output_dir", "out"))).resolve()

    fit = _expect_mapping(problems, raw, "fit")
    unknown_fit = set(fit) - {"xatol", "fatol", "maxiter", "maxfev"}
    if unknown_fit:
        problems.append(f"unknown keys in fit: {sorted(unknown_fit)}")
    fit_options = {}
    for name, positive in (("xatol", True), ("fatol", True)):
        if name in fit:
            fit_options[name] = _get_number(problems, "fit", name, fit[name],
                                            None, positive=positive)
    for name in ("maxiter", "maxfev"):
        if name in fit:
            if not isinstance(fit[name], int) or fit[name] <= 0:
                problems.append(f"fit.{name} must be a positive integer")
            else:
                fit_options[name] = fit[name]
    cfg.fit_options = {k: v for k, v in fit_options.items() if v is not None}

    shortrec = _expect_mapping(problems, raw, "shortrec")
    lengths = shortrec.get("record_lengths", [1, 2, 3])
    if (not isinstance(lengths, (list, tuple)) or not lengths
            or not all(isinstance(v, int) and 0 <= v <= 10 for v in lengths)):
        problems.append(f"shortrec.record_lengths must be integers in 0..10, got {lengths!r}")
    else:
        cfg.shortrec_record_lengths = tuple(lengths)
    repeats = shortrec.get("repeats", 10)
    if not isinstance(repeats, int) or repeats < 1:
        problems.append(f"shortrec.repeats must be a positive integer, got {repeats!r}")
    else:
        cfg.shortrec_repeats = repeats

    sim = _expect_mapping(problems, raw, "simulate")
    scenario = sim.get("scenario", 1)
    if not isinstance(scenario, int) or not 1 <= scenario <= 9:
        problems.append(f"simulate.scenario must be 1..9, got {scenario!r}")
    else:
        cfg.sim_scenario = scenario
    climates = sim.get("climates", 20)
    if not isinstance(climates, int) or climates < 1:
        problems.append(f"simulate.climates must be a positive integer, got {climates!r}")
    else:
        cfg.sim_climates = climates
    targets = sim.get("targets", ["C1", "C4"])
    if not isinstance(targets, (list, tuple)) or not targets:
        problems.append(f"simulate.targets must be a nonempty list, got {targets!r}")
    else:
        cfg.sim_targets = tuple(str(t) for t in targets)
    cfg.sim_grid_spacing_km = _get_number(problems, "simulate", "grid_spacing_km",
                                          sim.get("grid_spacing_km"), 2.0, positive=True)

    predict = _expect_mapping(problems, raw, "predict")
    spacing = predict.get("grid_spacing_km")
    if spacing is not None:
        cfg.predict_grid_spacing_km = _get_number(
            problems, "predict", "grid_spacing_km", spacing, None, positive=True)

    if problems:
        raise ConfigError(problems)
    return cfg


def _parse_priors(priors: dict) -> PriorConfig:
    unknown = set(priors) - {"climatic", "annual", "tau_y", "tau_z", "tau_beta", "beta_c"}
    if unknown:
        raise ValueError(f"unknown prior keys: {sorted(unknown)}")

    def matern(key) -> PcMaternSpec:
        spec = priors.get(key) or {}
        return PcMaternSpec(
            u_rho=float(spec.get("u_rho_km", 10.0)),
            alpha_rho=float(spec.get("alpha_rho", 0.1)),
            u_sigma=float(spec.get("u_sigma", 2.0)),
            alpha_sigma=float(spec.get("alpha_sigma", 0.1)))

    def precision(key, u, alpha) -> PcPrecisionSpec:
        spec = priors.get(key) or {}
        return PcPrecisionSpec(u=float(spec.get("u", u)),
                               alpha=float(spec.get("alpha", alpha)))

    beta = priors.get("beta_c") or {}
    return PriorConfig(
        climatic=matern("climatic"),
        annual=matern("annual"),
        tau_y=precision("tau_y", 1.5, 0.1),
        tau_z=precision("tau_z", 1.5, 0.1),
        tau_beta=precision("tau_beta", 10.0, 0.2),
        beta_c=GaussianPriorSpec(mean=float(beta.get("mean", 2.0)),
                                 sd=float(beta.get("sd", 0.5))),
    )


def require_paths(cfg: RunConfig, *names: str) -> list[str]:
    """Missing-path problems for a command that needs the given inputs."""
    problems = []
    mapping = {
        "gauges": cfg.gauges_path,
        "runoff": cfg.runoff_path,
        "catchments": cfg.catchments_path or cfg.catchment_nodes_path,
        "future_runoff": cfg.future_runoff_path,
    }
    for name in names:
        if mapping.get(name) is None:
            problems.append(f"paths.{name} is required for this command")
    return problems
