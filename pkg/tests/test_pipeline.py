import asyncio
import csv
import json
import os
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from celltrack_sr.config import desk_profile, load_config_file, with_method
from celltrack_sr.db import ResultsDatabase
from celltrack_sr.errors import ConfigError, ContractError
from celltrack_sr.exporters import read_jsonl, read_report, read_trajectories
from celltrack_sr.frames import FrameSequence, load_frames, save_frames
from celltrack_sr.pipeline import list_videos, run_pipeline, video_dir

import main


def run(command, cfg, **options):
    return asyncio.run(run_pipeline(command, cfg, **options))


def test_generate_and_degrade(tiny_config):
    run("generate", tiny_config)
    paths = video_dir(tiny_config.out_dir, 0)
    hr = load_frames(paths.hr)
    assert hr.frames.shape == (3, 32, 32)
    assert len(read_trajectories(str(paths.gt_tracks))) == 3
    run("degrade", tiny_config)
    assert load_frames(paths.lr).frames.shape == (3, 16, 16)
    for command in ("generate", "degrade"):
        path = os.path.join(tiny_config.out_dir, f"manifest.{command}.json")
        manifest = json.loads(open(path, encoding="utf-8").read())
        assert manifest["command"] == command
        assert manifest["config_hash"] == tiny_config.config_hash()


def _full_run(cfg):
    for command in ("generate", "degrade"):
        run(command, cfg)
    run("superres", cfg, method="RDPV")
    run("metrics", cfg)


def _is_volatile(path):
    # wall-clock timings, the sqlite file and manifests (which record out_dir)
    return path.name == "results.db" or path.name.startswith(("timings_", "manifest."))


def _stable_files(out_dir):
    root = Path(out_dir)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file() and not _is_volatile(p)}


def test_outputs_are_reproducible(tiny_config, tmp_path):
    other = replace(tiny_config, out_dir=str(tmp_path / "again"))
    for cfg in (tiny_config, other):
        _full_run(cfg)
    first, second = _stable_files(tiny_config.out_dir), _stable_files(other.out_dir)
    assert "video_000/sr_RDPV/frame_0003.png" in first
    assert "video_000/metrics_RDPV.json" in first
    assert first == second


def test_superres_track_metrics(tiny_config):
    for command in ("generate", "degrade"):
        run(command, tiny_config)
    run("superres", tiny_config, method="bicubic")
    run("superres", tiny_config, method="RDPV")
    paths = video_dir(tiny_config.out_dir, 0)
    assert load_frames(paths.sr("RDPV")).frames.shape == (3, 32, 32)
    traces = read_jsonl(str(paths.traces("RDPV")))
    assert [t["frame"] for t in traces] == [0, 1, 2]
    assert [t["iterations"] for t in traces] == [3, 2, 2]

    run("track", tiny_config, sources=["hr", "lr"])
    assert paths.tracks("hr").exists() and paths.tracks("lr").exists()

    run("metrics", tiny_config)
    report = read_report(str(paths.report("RDPV")))
    assert len(report.psnr) == 3 and len(report.lr_psnr) == 3
    assert report.detection_percentage is not None
    assert read_report(str(paths.report("lr"))).psnr == []


def test_tv_variant_with_zero_lambda_reproduces_rdpv(tiny_config):
    for command in ("generate", "degrade"):
        run(command, tiny_config)
    run("superres", tiny_config, method="RDPV")
    run("superres", with_method(tiny_config, "RDPV-TVa", 0.0), method="RDPV-TVa")
    paths = video_dir(tiny_config.out_dir, 0)
    np.testing.assert_array_equal(load_frames(paths.sr("RDPV")).frames, load_frames(paths.sr("RDPV-TVa")).frames)


def test_compare_writes_summary(tiny_config):
    for command in ("generate", "degrade"):
        run(command, tiny_config)
    result = run("compare", tiny_config, methods=["bicubic", "DPV", "RDPV"])
    assert os.path.join(tiny_config.out_dir, "summary.pdf") in result.artifacts
    # DPV reuses the per-frame iteration counts recorded by RDPV
    paths = video_dir(tiny_config.out_dir, 0)
    dpv = [t["iterations"] for t in read_jsonl(str(paths.traces("DPV")))]
    rdpv = [t["iterations"] for t in read_jsonl(str(paths.traces("RDPV")))]
    assert dpv == rdpv
    with open(os.path.join(tiny_config.out_dir, "summary.csv"), newline="", encoding="utf-8") as f:
        sources = [row[0] for row in list(csv.reader(f))[1:]]
    assert sources == ["hr", "lr", "bicubic", "DPV", "RDPV"]

    async def stored():
        async with ResultsDatabase(os.path.join(tiny_config.out_dir, "results.db")) as db:
            return await db.sources(), await db.get_iterations("RDPV")

    db_sources, iterations = asyncio.run(stored())
    assert {"hr", "lr", "bicubic", "DPV", "RDPV"} <= set(db_sources)
    assert [row["iterations"] for row in iterations] == rdpv


def test_ingest_real_frames(tiny_config, tmp_path):
    run("generate", tiny_config)
    real = replace(tiny_config, out_dir=str(tmp_path / "real"))
    run("degrade", real, input_dir=str(video_dir(tiny_config.out_dir, 0).hr))
    assert [v.name for v in list_videos(real.out_dir)] == ["video_000"]
    run("superres", real, method="nearest")
    run("metrics", real, sources=["nearest"])
    report = read_report(str(video_dir(real.out_dir, 0).report("nearest")))
    assert len(report.psnr) == 3 and report.detection_percentage is None


def test_ingest_crops_to_a_usable_size(tiny_config, tmp_path, rng):
    real_dir = tmp_path / "microscope"
    save_frames(FrameSequence(rng.random((3, 38, 45))), real_dir)
    run("degrade", tiny_config, input_dir=str(real_dir))
    paths = video_dir(tiny_config.out_dir, 0)
    # L=2 and two encoder units: sides become multiples of 4
    assert load_frames(paths.hr).frame_shape == (36, 44)
    run("superres", tiny_config, method="RDPV")
    assert load_frames(paths.sr("RDPV")).frame_shape == (36, 44)


def test_missing_inputs_are_reported(tiny_config):
    with pytest.raises(ContractError):
        run("degrade", tiny_config)
    with pytest.raises(ConfigError):
        run("publish", tiny_config)


def test_cli_exit_codes(tmp_path, monkeypatch):
    monkeypatch.delenv("CELLTRACK_PROFILE", raising=False)
    out = str(tmp_path / "cli")
    assert main.main(["superres", "--out", out, "--profile", "desk", "--method", "bicubic"]) == 1
    assert main.main(["generate", "--out", out, "--config", str(tmp_path / "missing.env")]) == 1



# Desk-scale corpora

DESK_METHODS = ["bicubic", "DPV", "RDPV", "RDPV-TVi"]


def _desk_reports(cfg, sources):
    reports = {}
    for paths in list_videos(cfg.out_dir):
        for source in sources:
            reports.setdefault(source, []).append(read_report(str(paths.report(source))))
    return reports


def _mean(reports, source, attr):
    values = [getattr(r, attr) for r in reports[source]]
    return float(np.nanmean([np.nan if v is None else v for v in values]))


@pytest.fixture(scope="module")
def desk_corpus(tmp_path_factory):
    cfg = replace(desk_profile(), out_dir=str(tmp_path_factory.mktemp("desk")))
    for command in ("generate", "degrade"):
        run(command, cfg)
    run("compare", cfg, methods=DESK_METHODS)
    return cfg


@pytest.fixture(scope="module")
def clean_desk_corpus(tmp_path_factory):
    base = desk_profile()
    cfg = replace(base, degradation=replace(base.degradation, noise_sigma=0.0), out_dir=str(tmp_path_factory.mktemp("clean")))
    for command in ("generate", "degrade"):
        run(command, cfg)
    run("superres", cfg, method="RDPV")
    run("metrics", cfg, sources=["hr", "lr", "RDPV"])
    return cfg


@pytest.mark.slow
def test_warm_start_shortens_later_frames(desk_corpus):
    first, rest = [], []
    for paths in list_videos(desk_corpus.out_dir):
        counts = [t["iterations"] for t in sorted(read_jsonl(str(paths.traces("RDPV"))), key=lambda t: t["frame"])]
        first.append(counts[0])
        rest += counts[1:]
    assert len(first) >= 5
    assert np.mean(rest) < 0.8 * np.mean(first)


@pytest.mark.slow
@pytest.mark.parametrize("attr", ["psnr_mean", "ssim_mean"])
def test_method_ordering(desk_corpus, attr):
    reports = _desk_reports(desk_corpus, DESK_METHODS)
    values = [_mean(reports, m, attr) for m in ("RDPV-TVi", "RDPV", "DPV", "bicubic")]
    gaps = np.diff(values)
    assert np.all(gaps <= 0)
    assert np.sum(gaps == 0) <= 1


@pytest.mark.slow
def test_descriptor_fidelity(desk_corpus):
    reports = _desk_reports(desk_corpus, ["lr", "RDPV-TVi"])
    assert _mean(reports, "RDPV-TVi", "msd_ccc") > _mean(reports, "lr", "msd_ccc")
    sr_p, lr_p = _mean(reports, "RDPV-TVi", "ttest_p"), _mean(reports, "lr", "ttest_p")
    assert sr_p > 0.05
    assert lr_p < sr_p


@pytest.mark.slow
def test_super_resolution_improves_tracking(clean_desk_corpus):
    reports = _desk_reports(clean_desk_corpus, ["hr", "lr", "RDPV"])
    assert _mean(reports, "hr", "detection_percentage") >= 95.0
    assert _mean(reports, "RDPV", "detection_percentage") >= _mean(reports, "lr", "detection_percentage") + 20.0
    assert _mean(reports, "RDPV", "swap_error") <= 0.5 * _mean(reports, "lr", "swap_error")


@pytest.mark.slow
def test_desk_pipeline_is_reproducible(tmp_path):
    base = desk_profile()
    cfg = replace(base, n_videos=1, sim=replace(base.sim, n_frames=6, t_eff=4), out_dir=str(tmp_path / "first"))
    _full_run(cfg)
    replay = replace(load_config_file(os.path.join(cfg.out_dir, "manifest.metrics.json"), cfg), out_dir=str(tmp_path / "second"))
    _full_run(replay)
    assert _stable_files(cfg.out_dir) == _stable_files(replay.out_dir)
