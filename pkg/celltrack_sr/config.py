"""Pipeline configuration: profiles, config files, CELLTRACK_* environment overrides."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Tuple

from dotenv import dotenv_values

from . import __version__
from .degradation import DegradationSpec
from .errors import CellTrackError, ConfigError
from .metrics import MetricParams
from .network import NetworkConfig
from .simulation import SimParams
from .solver import Method, SolverConfig
from .tracking import TrackingParams
from .utils import canonical_json, config_hash

logger = logging.getLogger(__name__)

ENV_PREFIX = "CELLTRACK_"
DEFAULT_TV_LAMBDA = 0.01
MANIFEST_PREFIX = "manifest"
PROFILES = ("paper", "desk", "real")


@dataclass(frozen=True)
class PipelineConfig:
    profile: str = "paper"
    sim: SimParams = field(default_factory=SimParams)
    degradation: DegradationSpec = field(default_factory=lambda: DegradationSpec(magnification=4, noise_sigma=0.001))
    solver: SolverConfig = field(default_factory=SolverConfig)
    tracking: TrackingParams = field(default_factory=TrackingParams)
    metrics: MetricParams = field(default_factory=MetricParams)
    n_videos: int = 100
    seed: int = 0
    out_dir: str = "runs"
    lr_size: Optional[int] = None
    frame_pattern: str = "*.png"

    def __post_init__(self):
        if self.solver.magnification != self.degradation.magnification:
            raise ConfigError(
                f"solver magnification {self.solver.magnification} != degradation magnification {self.degradation.magnification}"
            )
        L = self.degradation.magnification
        if self.sim.height % L or self.sim.width % L:
            raise ConfigError(f"frame size {self.sim.height}x{self.sim.width} is not divisible by L={L}")
        if self.n_videos < 1:
            raise ConfigError("n_videos must be >= 1")

    @property
    def magnification(self) -> int:
        return self.degradation.magnification

    def config_hash(self) -> str:
        return config_hash(self)

    def to_dict(self) -> Dict[str, Any]:
        return json.loads(canonical_json(self))

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        try:
            if "sim" in kwargs:
                kwargs["sim"] = SimParams(**kwargs["sim"])
            if "degradation" in kwargs:
                kwargs["degradation"] = DegradationSpec(**kwargs["degradation"])
            if "tracking" in kwargs:
                kwargs["tracking"] = TrackingParams(**kwargs["tracking"])
            if "metrics" in kwargs:
                kwargs["metrics"] = MetricParams(**kwargs["metrics"])
            if "solver" in kwargs:
                kwargs["solver"] = SolverConfig(**kwargs["solver"])
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


# Profiles

def paper_profile() -> PipelineConfig:
    return PipelineConfig(profile="paper")


def desk_profile() -> PipelineConfig:
    L = 4
    lr = 64
    return PipelineConfig(
        profile="desk",
        sim=SimParams(height=lr * L, width=lr * L, n_frames=30, t_eff=18),
        degradation=DegradationSpec(magnification=L, noise_sigma=0.001),
        solver=SolverConfig(
            max_iters_first=500,
            max_iters_rest=250,
            early_stop_start_first=250,
            early_stop_start_rest=150,
            magnification=L,
            network=NetworkConfig(encoder_channels=16, skip_channels=4, decoder_channels=20),
        ),
        n_videos=5,
        lr_size=lr,
    )


def real_profile() -> PipelineConfig:
    return PipelineConfig(
        profile="real",
        solver=SolverConfig(max_iters_first=3000, max_iters_rest=2000, early_stop_start_first=2000, early_stop_start_rest=1000),
        metrics=MetricParams(smoothing_sigma=1.0),
        n_videos=1,
    )


_PROFILE_FACTORIES: Dict[str, Callable[[], PipelineConfig]] = {
    "paper": paper_profile,
    "desk": desk_profile,
    "real": real_profile,
}


def profile_config(name: str) -> PipelineConfig:
    try:
        return _PROFILE_FACTORIES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose one of {', '.join(PROFILES)}") from None


# Overrides

def _as_bool(text: Any) -> bool:
    return str(text).strip().lower() in ("1", "true", "yes", "on")


# key -> (section, field, caster); section None means a top-level field
_OVERRIDES: Dict[str, Tuple[Optional[str], str, Callable[[Any], Any]]] = {
    "SEED": (None, "seed", int),
    "OUT": (None, "out_dir", str),
    "N_VIDEOS": (None, "n_videos", int),
    "FRAME_PATTERN": (None, "frame_pattern", str),
    "N_FRAMES": ("sim", "n_frames", int),
    "N_IMMUNE": ("sim", "n_immune", int),
    "T_EFF": ("sim", "t_eff", int),
    "POTENTIAL": ("sim", "potential", _as_bool),
    "NOISE_SIGMA": ("degradation", "noise_sigma", float),
    "WORKERS": ("solver", "workers", int),
    "DPV_BUDGET": ("solver", "dpv_budget", str),
    "INPUT_NOISE_STD": ("solver", "input_noise_std", float),
    "PATIENCE": ("solver", "patience", int),
    "FLAT_THRESHOLD": ("solver", "flat_threshold", float),
    "LOG_EVERY": ("solver", "log_every", int),
    "SSIM_FORM": ("metrics", "ssim_form", str),
    "SMOOTHING_SIGMA": ("metrics", "smoothing_sigma", float),
    "GATE": ("tracking", "gate", float),
}
_SPECIAL = ("PROFILE", "METHOD", "LAMBDA", "SCALE", "LOG_LEVEL", "DB", "RUN_SLOW")


def with_scale(cfg: PipelineConfig, scale: int) -> PipelineConfig:
    scale = int(scale)
    sim = cfg.sim
    if cfg.lr_size:
        sim = replace(sim, height=cfg.lr_size * scale, width=cfg.lr_size * scale)
    return replace(
        cfg,
        sim=sim,
        degradation=replace(cfg.degradation, magnification=scale),
        solver=replace(cfg.solver, magnification=scale),
    )


def with_method(cfg: PipelineConfig, method, lam: Optional[float] = None) -> PipelineConfig:
    method = Method(method)
    if lam is None:
        lam = (cfg.solver.lam or DEFAULT_TV_LAMBDA) if method.tv_p is not None else 0.0
    return replace(cfg, solver=cfg.solver.with_method(method, lam))


def _rescaled_t_eff(sim: SimParams, n_frames: int) -> int:
    # keep the interaction window at the same fraction of the video
    return max(0, min(n_frames, round(sim.t_eff * n_frames / sim.n_frames)))


def apply_overrides(cfg: PipelineConfig, values: Mapping[str, Any]) -> PipelineConfig:
    """Apply KEY=VALUE overrides; keys may carry the CELLTRACK_ prefix."""
    sections: Dict[Optional[str], Dict[str, Any]] = {}
    special: Dict[str, Any] = {}
    for raw_key, value in values.items():
        if value is None or value == "":
            continue
        key = raw_key[len(ENV_PREFIX):] if raw_key.startswith(ENV_PREFIX) else raw_key
        key = key.upper()
        if key in _SPECIAL:
            special[key] = value
            continue
        if key not in _OVERRIDES:
            logger.debug("Ignoring unknown config key %s", raw_key)
            continue
        section, name, cast = _OVERRIDES[key]
        try:
            sections.setdefault(section, {})[name] = cast(value)
        except ValueError as exc:
            raise ConfigError(f"{raw_key}: {exc}") from exc
    try:
        if "PROFILE" in special and special["PROFILE"] != cfg.profile:
            cfg = profile_config(str(special["PROFILE"]))
        if "SCALE" in special:
            cfg = with_scale(cfg, int(special["SCALE"]))
        if "n_frames" in sections.get("sim", {}) and "t_eff" not in sections["sim"]:
            sections["sim"]["t_eff"] = _rescaled_t_eff(cfg.sim, sections["sim"]["n_frames"])
        top = sections.pop(None, {})
        changes = {name: replace(getattr(cfg, name), **vals) for name, vals in sections.items()}
        cfg = replace(cfg, **top, **changes)
        if "METHOD" in special or "LAMBDA" in special:
            method = special.get("METHOD", cfg.solver.method)
            lam = float(special["LAMBDA"]) if "LAMBDA" in special else None
            cfg = with_method(cfg, method, lam)
    except ValueError as exc:
        if isinstance(exc, CellTrackError):
            raise
        raise ConfigError(str(exc)) from exc
    return cfg


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, str]:
    environ = os.environ if environ is None else environ
    return {k: v for k, v in environ.items() if k.startswith(ENV_PREFIX)}


def load_config_file(path: str, base: PipelineConfig) -> PipelineConfig:
    """A manifest.<command>.json from an earlier run, or a dotenv-style KEY=VALUE file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    if p.suffix == ".json":
        doc = json.loads(p.read_text(encoding="utf-8"))
        return PipelineConfig.from_dict(doc.get("config", doc))
    return apply_overrides(base, dotenv_values(p))


def resolve_config(
    profile: str = "paper",
    config_path: Optional[str] = None,
    cli: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> PipelineConfig:
    """profile defaults -> config file -> CELLTRACK_* environment -> CLI flags."""
    env = env_overrides(environ)
    cli = dict(cli or {})
    profile = cli.get("PROFILE") or env.get(ENV_PREFIX + "PROFILE") or profile
    cfg = profile_config(profile)
    if config_path:
        cfg = load_config_file(config_path, cfg)
    cfg = apply_overrides(cfg, {k: v for k, v in env.items() if k != ENV_PREFIX + "PROFILE"})
    cfg = apply_overrides(cfg, {k: v for k, v in cli.items() if k != "PROFILE"})
    logger.debug("Resolved %s config %s", cfg.profile, cfg.config_hash()[:12])
    return cfg


def manifest(cfg: PipelineConfig, command: str, seeds: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    return {
        "schema": 1,
        "tool": "celltrack_sr",
        "version": __version__,
        "command": command,
        "config_hash": cfg.config_hash(),
        "seeds": {"base": cfg.seed, **(seeds or {})},
        "config": cfg.to_dict(),
    }


def manifest_name(command: str) -> str:
    """``superres:RDPV`` -> manifest.superres.RDPV.json"""
    return f"{MANIFEST_PREFIX}.{command.replace(':', '.')}.json"


def write_manifest(directory: str, cfg: PipelineConfig, command: str, seeds: Optional[Dict[str, Any]] = None) -> str:
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, manifest_name(command))
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest(cfg, command, seeds), f, sort_keys=True, indent=2)
    return path
