"""Command orchestration: generate → degrade → superres → track → metrics → compare.

Corpus layout under ``out_dir``::

    manifest.<command>.json  results.db  summary.csv  summary.pdf
    video_000/
        hr/  lr/  sr_<method>/          numbered 16-bit PNG frames + sequence.json
        gt_tracks.csv                   simulated trajectories (synthetic corpora only)
        tracks_<source>.csv             tracked trajectories, HR pixel units
        traces_<method>.jsonl           solver trace, one record per frame
        timings_<method>.jsonl          wall-time per frame
        metrics_<source>.json           MetricsReport
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import exporters
from .config import PipelineConfig, with_method, write_manifest
from .db import ResultsDatabase
from .degradation import bicubic_upsample, degrade, downsample, nearest_upsample
from .errors import ConfigError, ContractError, SolverDivergedError
from .frames import FrameSequence, load_frames, save_frames
from .metrics import MetricsReport, descriptor_metrics, gaussian_smooth, image_quality, psnr
from .pdf_export import generate_summary_pdf
from .simulation import make_dataset
from .solver import Method, run_video
from .tracking import track_video
from .utils import derive_seed, mean_std_str

logger = logging.getLogger(__name__)

COMMANDS = ("generate", "degrade", "superres", "track", "metrics", "compare")
BASELINES = ("bicubic", "nearest")
SOLVER_METHODS = tuple(m.value for m in Method)
COMPARE_ORDER = ("hr", "lr", "nearest", "bicubic", "DPV", "RDPV", "RDPV-TVa", "RDPV-TVi")
DEFAULT_COMPARE = ("bicubic", "DPV", "RDPV", "RDPV-TVi")

# seed-stream keys under the base seed
_NOISE_STREAM = 1
_SOLVER_STREAM = 2


@dataclass
class PipelineResult:
    command: str
    status: int = 0
    artifacts: List[str] = field(default_factory=list)


@dataclass
class VideoPaths:
    root: Path
    index: int

    @property
    def name(self) -> str:
        return self.root.name

    @property
    def hr(self) -> Path:
        return self.root / "hr"

    @property
    def lr(self) -> Path:
        return self.root / "lr"

    @property
    def gt_tracks(self) -> Path:
        return self.root / "gt_tracks.csv"

    def sr(self, method: str) -> Path:
        return self.root / f"sr_{method}"

    def tracks(self, source: str) -> Path:
        return self.root / f"tracks_{source}.csv"

    def traces(self, method: str) -> Path:
        return self.root / f"traces_{method}.jsonl"

    def timings(self, method: str) -> Path:
        return self.root / f"timings_{method}.jsonl"

    def report(self, source: str) -> Path:
        return self.root / f"metrics_{source}.json"


def video_dir(out_dir: str, index: int) -> VideoPaths:
    return VideoPaths(Path(out_dir) / f"video_{index:03d}", index)


def list_videos(out_dir: str) -> List[VideoPaths]:
    root = Path(out_dir)
    if not root.is_dir():
        raise ContractError(f"output directory {out_dir} does not exist; run generate first")
    videos = []
    for d in sorted(root.glob("video_*")):
        suffix = d.name.split("_", 1)[1]
        if d.is_dir() and suffix.isdigit():
            videos.append(VideoPaths(d, int(suffix)))
    if not videos:
        raise ContractError(f"no video_* directories under {out_dir}")
    return videos


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise ContractError(f"missing {path}; {hint}")
    return path


def default_db_path(cfg: PipelineConfig) -> str:
    return os.getenv("CELLTRACK_DB") or os.path.join(cfg.out_dir, "results.db")


# Commands

async def generate(cfg: PipelineConfig, db: ResultsDatabase, **_) -> List[str]:
    artifacts = []
    for video in make_dataset(cfg.n_videos, cfg.sim, cfg.seed):
        paths = video_dir(cfg.out_dir, video.index)
        save_frames(video.frames, paths.hr)
        artifacts.append(exporters.write_trajectories(video.trajectories, str(paths.gt_tracks)))
        artifacts.append(str(paths.hr))
    artifacts.append(write_manifest(cfg.out_dir, cfg, "generate", {"videos": [derive_seed(cfg.seed, v) for v in range(cfg.n_videos)]}))
    return artifacts


def _frame_multiple(cfg: PipelineConfig) -> int:
    # HR sides must divide by L for S and by 2^units for the network
    return math.lcm(cfg.magnification, 2 ** cfg.solver.network.encoder_units)


async def degrade_corpus(cfg: PipelineConfig, db: ResultsDatabase, input_dir: Optional[str] = None, **_) -> List[str]:
    if input_dir:
        # real frames are ingested as the HR sequence of video_000
        seq = load_frames(input_dir, cfg.frame_pattern).center_crop(_frame_multiple(cfg))
        save_frames(seq, video_dir(cfg.out_dir, 0).hr)
        logger.info("Ingested %d frames from %s", len(seq), input_dir)
    artifacts = []
    for paths in list_videos(cfg.out_dir):
        hr = load_frames(_require(paths.hr, "run generate first"), "*.png")
        spec = replace(cfg.degradation, seed=derive_seed(cfg.seed, paths.index, _NOISE_STREAM))
        lr = np.stack([degrade(f, spec, t) for t, f in enumerate(hr.frames)])
        save_frames(FrameSequence(lr, bit_depth=16, frame_interval=hr.frame_interval), paths.lr)
        artifacts.append(str(paths.lr))
        logger.info("%s: degraded %d frames by L=%d, sigma=%g", paths.name, len(hr), spec.magnification, spec.noise_sigma)
    artifacts.append(write_manifest(cfg.out_dir, cfg, "degrade"))
    return artifacts


def _baseline(lr: FrameSequence, method: str, L: int) -> FrameSequence:
    upsample = bicubic_upsample if method == "bicubic" else nearest_upsample
    return lr.map(lambda f: upsample(f, L))


def _recorded_budgets(paths: VideoPaths, n_frames: int) -> Optional[List[int]]:
    path = paths.traces(Method.RDPV.value)
    if not path.exists():
        return None
    records = sorted(exporters.read_jsonl(str(path)), key=lambda r: r["frame"])
    if len(records) != n_frames:
        return None
    return [int(r["iterations"]) for r in records]


async def superres(cfg: PipelineConfig, db: ResultsDatabase, method: Optional[str] = None, **_) -> List[str]:
    method = method or cfg.solver.method.value
    if method not in BASELINES + SOLVER_METHODS:
        raise ConfigError(f"unknown method {method!r}")
    artifacts = []
    L = cfg.magnification
    for paths in list_videos(cfg.out_dir):
        lr = load_frames(_require(paths.lr, "run degrade first"), "*.png")
        out = paths.sr(method)
        if method in BASELINES:
            save_frames(_baseline(lr, method, L), out)
            artifacts.append(str(out))
            continue
        solver_cfg = cfg.solver if cfg.solver.method.value == method else with_method(cfg, method).solver
        budgets = _recorded_budgets(paths, len(lr)) if method == Method.DPV.value and solver_cfg.dpv_budget == "matched" else None
        seed = derive_seed(cfg.seed, paths.index, _SOLVER_STREAM)
        try:
            sr, traces = run_video(lr, solver_cfg, cfg.degradation, seed, budgets=budgets)
        except SolverDivergedError as exc:
            trace_path = str(paths.traces(method))
            if exc.trace is not None:
                exporters.write_traces([exc.trace], trace_path)
            raise SolverDivergedError(f"{paths.name}/{method}: {exc} (trace: {trace_path})", exc.trace) from exc
        save_frames(sr, out)
        artifacts += [
            str(out),
            exporters.write_traces(traces, str(paths.traces(method))),
            exporters.write_timings(traces, str(paths.timings(method))),
        ]
        await db.add_traces(paths.name, traces)
        logger.info("%s: %s done, %d solver iterations", paths.name, method, sum(t.stop_iteration for t in traces))
    artifacts.append(write_manifest(cfg.out_dir, cfg, f"superres:{method}"))
    return artifacts


def _sources(paths: VideoPaths) -> Dict[str, Path]:
    found: Dict[str, Path] = {}
    if paths.hr.exists():
        found["hr"] = paths.hr
    if paths.lr.exists():
        found["lr"] = paths.lr
    for d in sorted(paths.root.glob("sr_*")):
        found[d.name[len("sr_"):]] = d
    return found


def _track_source(cfg: PipelineConfig, paths: VideoPaths, source: str, frame_dir: Path) -> str:
    frames = load_frames(frame_dir, "*.png")
    scale = cfg.magnification if source == "lr" else 1
    tracks = track_video(frames.frames, cfg.tracking, scale=scale)
    return exporters.write_trajectories(tracks, str(paths.tracks(source)))


async def track(cfg: PipelineConfig, db: ResultsDatabase, sources: Optional[Sequence[str]] = None, **_) -> List[str]:
    artifacts = []
    for paths in list_videos(cfg.out_dir):
        for source, frame_dir in _sources(paths).items():
            if sources and source not in sources:
                continue
            artifacts.append(_track_source(cfg, paths, source, frame_dir))
            logger.info("%s: tracked %s", paths.name, source)
    artifacts.append(write_manifest(cfg.out_dir, cfg, "track"))
    return artifacts


def _reference_frames(cfg: PipelineConfig, paths: VideoPaths) -> FrameSequence:
    hr = load_frames(_require(paths.hr, "HR frames are the reference"), "*.png")
    sigma = cfg.metrics.smoothing_sigma
    return hr.map(lambda f: gaussian_smooth(f, sigma)) if sigma > 0 else hr


async def metrics(cfg: PipelineConfig, db: ResultsDatabase, sources: Optional[Sequence[str]] = None, **_) -> List[str]:
    artifacts = []
    spec = replace(cfg.degradation, noise_sigma=0.0)
    for paths in list_videos(cfg.out_dir):
        reference = _reference_frames(cfg, paths)
        lr = load_frames(paths.lr, "*.png") if paths.lr.exists() else None
        gt = exporters.read_trajectories(str(paths.gt_tracks)) if paths.gt_tracks.exists() else None
        for source, frame_dir in _sources(paths).items():
            if sources and source not in sources:
                continue
            report = MetricsReport(video=paths.name, source=source)
            if source not in ("hr", "lr"):
                frames = load_frames(frame_dir, "*.png")
                report.psnr, report.ssim = image_quality(frames.frames, reference.frames, cfg.metrics)
                if lr is not None:
                    report.lr_psnr = [psnr(downsample(f, spec), y) for f, y in zip(frames.frames, lr.frames)]
            if gt is not None:
                if not paths.tracks(source).exists():
                    _track_source(cfg, paths, source, frame_dir)
                tracks = exporters.read_trajectories(
                    str(paths.tracks(source)), tumor_id=None, tumor_split_radius=cfg.tracking.tumor_split_radius
                )
                descriptor_metrics(report, gt, tracks, cfg.metrics)
            artifacts.append(exporters.write_report(report, str(paths.report(source))))
            await db.upsert_report(report)
            logger.info("%s: %s PSNR %s SSIM %s", paths.name, source, report.psnr_mean, report.ssim_mean)
    artifacts.append(write_manifest(cfg.out_dir, cfg, "metrics"))
    return artifacts


async def compare(cfg: PipelineConfig, db: ResultsDatabase, methods: Optional[Sequence[str]] = None, **_) -> List[str]:
    methods = list(methods or DEFAULT_COMPARE)
    videos = list_videos(cfg.out_dir)
    # RDPV first so DPV can reuse its per-frame iteration counts
    ordered = sorted(methods, key=lambda m: (m != Method.RDPV.value, COMPARE_ORDER.index(m) if m in COMPARE_ORDER else 99))
    artifacts = []
    for method in ordered:
        if any(not p.sr(method).exists() for p in videos):
            artifacts += await superres(cfg, db, method=method)
    wanted = ["hr", "lr"] + methods
    artifacts += await metrics(cfg, db, sources=wanted)
    stored = await db.sources()
    missing = [s for s in wanted if s not in stored]
    if missing:
        logger.warning("No stored reports for %s", ", ".join(missing))
    rows = [r for r in await db.get_reports() if r["source"] in wanted]
    table = exporters.summarize(rows, order=COMPARE_ORDER)
    artifacts.append(exporters.export_summary_csv(table, os.path.join(cfg.out_dir, "summary.csv")))
    info = [
        ("Profile", cfg.profile),
        ("Videos", str(len(videos))),
        ("Magnification", str(cfg.magnification)),
        ("Noise sigma", f"{cfg.degradation.noise_sigma:g}"),
        ("Config hash", cfg.config_hash()[:16]),
    ]
    for method in ordered:
        if method in SOLVER_METHODS:
            counts = [row["iterations"] for row in await db.get_iterations(method)]
            info.append((f"{method} iterations/frame", mean_std_str(counts, digits=1)))
    artifacts.append(generate_summary_pdf(table, os.path.join(cfg.out_dir, "summary.pdf"), info=info))
    artifacts.append(write_manifest(cfg.out_dir, cfg, "compare"))
    return artifacts


_DISPATCH: Dict[str, Callable] = {
    "generate": generate,
    "degrade": degrade_corpus,
    "superres": superres,
    "track": track,
    "metrics": metrics,
    "compare": compare,
}


async def run_pipeline(command: str, cfg: PipelineConfig, db_path: Optional[str] = None, **options) -> PipelineResult:
    """Run one command against ``cfg.out_dir``; CellTrackError propagates to the caller."""
    if command not in _DISPATCH:
        raise ConfigError(f"unknown command {command!r}; choose one of {', '.join(COMMANDS)}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    db = ResultsDatabase(db_path or default_db_path(cfg))
    await db.connect()
    try:
        logger.info("Running %s (%s profile) in %s", command, cfg.profile, cfg.out_dir)
        artifacts = await _DISPATCH[command](cfg, db, **options)
    finally:
        await db.close()
    logger.info("%s wrote %d artifacts", command, len(artifacts))
    return PipelineResult(command, 0, artifacts)
