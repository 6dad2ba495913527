import json

import pytest

from celltrack_sr.config import (
    DEFAULT_TV_LAMBDA,
    PROFILES,
    PipelineConfig,
    apply_overrides,
    desk_profile,
    load_config_file,
    manifest,
    profile_config,
    resolve_config,
    with_method,
    with_scale,
    write_manifest,
)
from celltrack_sr.errors import ConfigError
from celltrack_sr.solver import Method, SolverConfig


def test_profiles():
    paper = profile_config("paper")
    assert paper.sim.height == 288 and paper.magnification == 4
    assert paper.solver.network.encoder_channels == 128
    assert paper.solver.budget(0) == (1000, 500) and paper.solver.budget(3) == (500, 300)
    desk = profile_config("desk")
    assert desk.sim.height == 256 and desk.sim.n_frames == 30
    assert desk.solver.budget(0) == (500, 250)
    real = profile_config("real")
    assert real.solver.budget(0) == (3000, 2000) and real.metrics.smoothing_sigma == 1.0
    with pytest.raises(ConfigError):
        profile_config("laptop")


@pytest.mark.parametrize("name", PROFILES)
def test_every_profile_builds(name):
    cfg = resolve_config(cli={"PROFILE": name}, environ={})
    assert cfg.profile == name
    assert 0 <= cfg.sim.t_eff <= cfg.sim.n_frames


def test_frame_override_rescales_interaction_window():
    assert desk_profile().sim.t_eff == 18
    short = apply_overrides(profile_config("paper"), {"CELLTRACK_N_FRAMES": "12"})
    assert short.sim.n_frames == 12 and short.sim.t_eff == 7
    pinned = apply_overrides(desk_profile(), {"N_FRAMES": "10", "T_EFF": "10"})
    assert pinned.sim.t_eff == 10


def test_magnification_must_agree():
    cfg = desk_profile()
    with pytest.raises(ConfigError):
        PipelineConfig(sim=cfg.sim, degradation=cfg.degradation, solver=SolverConfig(magnification=2))


def test_with_scale_keeps_lr_size():
    cfg = with_scale(desk_profile(), 2)
    assert cfg.magnification == 2 and cfg.solver.magnification == 2
    assert cfg.sim.height == 128


def test_with_method_defaults_lambda():
    cfg = with_method(desk_profile(), "RDPV-TVi")
    assert cfg.solver.method is Method.RDPV_TVI and cfg.solver.lam == DEFAULT_TV_LAMBDA
    assert with_method(cfg, "RDPV").solver.lam == 0.0
    assert with_method(desk_profile(), "RDPV-TVa", 0.0).solver.lam == 0.0


def test_overrides_cast_values():
    cfg = apply_overrides(desk_profile(), {"CELLTRACK_SEED": "9", "N_FRAMES": "12", "CELLTRACK_POTENTIAL": "no", "UNRELATED": "1"})
    assert cfg.seed == 9 and cfg.sim.n_frames == 12 and cfg.sim.potential is False


def test_bad_override_value():
    with pytest.raises(ConfigError):
        apply_overrides(desk_profile(), {"CELLTRACK_SEED": "nine"})


def test_resolution_order(tmp_path):
    env_file = tmp_path / "run.env"
    env_file.write_text("CELLTRACK_SEED=3\nCELLTRACK_N_VIDEOS=2\n")
    environ = {"CELLTRACK_SEED": "4", "CELLTRACK_PROFILE": "desk", "HOME": "/root"}
    cfg = resolve_config(config_path=str(env_file), cli={"SEED": 5, "METHOD": "RDPV-TVa", "LAMBDA": 0.02}, environ=environ)
    assert cfg.profile == "desk"
    assert cfg.n_videos == 2
    assert cfg.seed == 5
    assert cfg.solver.method is Method.RDPV_TVA and cfg.solver.lam == 0.02


def test_missing_config_file():
    with pytest.raises(ConfigError):
        resolve_config(config_path="/nonexistent/run.env", environ={})


def test_manifest_roundtrip(tmp_path):
    cfg = with_method(desk_profile(), "RDPV-TVi", 0.05)
    path = write_manifest(str(tmp_path), cfg, "compare")
    doc = json.loads(open(path, encoding="utf-8").read())
    assert doc["config_hash"] == cfg.config_hash()
    reloaded = load_config_file(path, profile_config("paper"))
    assert reloaded == cfg
    assert reloaded.config_hash() == cfg.config_hash()


def test_hash_is_stable_and_sensitive():
    assert desk_profile().config_hash() == desk_profile().config_hash()
    assert manifest(desk_profile(), "generate")["config_hash"] != with_scale(desk_profile(), 2).config_hash()


def test_unknown_keys_in_manifest():
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"profile": "desk", "colour": "blue"})
