from __future__ import annotations

import os
from dataclasses import replace

import numpy as np
import pytest

from celltrack_sr.config import PipelineConfig
from celltrack_sr.degradation import DegradationSpec
from celltrack_sr.metrics import MetricParams
from celltrack_sr.network import NetworkConfig, build_network
from celltrack_sr.simulation import SimParams
from celltrack_sr.solver import SolverConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long empirical checks, run with CELLTRACK_RUN_SLOW=1")


def pytest_collection_modifyitems(config, items):
    if os.getenv("CELLTRACK_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set CELLTRACK_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


TOY_NETWORK = NetworkConfig(encoder_units=2, decoder_units=2, encoder_channels=8, skip_channels=2, decoder_channels=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_network() -> NetworkConfig:
    return TOY_NETWORK


@pytest.fixture
def toy_weights(toy_network):
    return build_network(toy_network, seed=3)


@pytest.fixture
def toy_spec() -> DegradationSpec:
    return DegradationSpec(magnification=2, noise_sigma=0.0)


@pytest.fixture
def toy_solver() -> SolverConfig:
    return SolverConfig(
        method="RDPV",
        max_iters_first=6,
        max_iters_rest=4,
        early_stop_start_first=6,
        early_stop_start_rest=4,
        patience=2,
        magnification=2,
        network=TOY_NETWORK,
    )


@pytest.fixture
def toy_lr(rng):
    # 16x16 LR frames (32x32 HR at L=2)
    base = np.linspace(0.2, 0.8, 16)
    frame = 0.5 * (base[None, :] + base[:, None])
    return np.stack([np.clip(frame + 0.02 * rng.standard_normal((16, 16)), 0, 1) for _ in range(2)])


@pytest.fixture
def tiny_config(tmp_path, toy_solver) -> PipelineConfig:
    """One 32x32 video of three frames with two immune cells, L=2, a few solver steps."""
    return PipelineConfig(
        profile="desk",
        sim=SimParams(height=32, width=32, n_immune=2, n_frames=3, t_eff=0, tumor_radius=6.0, immune_radius=3.0),
        degradation=DegradationSpec(magnification=2, noise_sigma=0.001),
        solver=replace(toy_solver, max_iters_first=3, max_iters_rest=2, early_stop_start_first=3, early_stop_start_rest=2),
        metrics=MetricParams(immune_radius=3.0, tumor_radius=6.0),
        n_videos=1,
        seed=5,
        out_dir=str(tmp_path / "run"),
    )
