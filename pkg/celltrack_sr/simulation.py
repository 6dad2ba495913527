"""Synthetic time-lapse videos: immune cells drifting toward a fixed tumor cell.

Each immune cell moves per frame by a drift of constant modulus toward the
tumor, isotropic Gaussian diffusion and, while ``t <= t_eff``, the step of a
radial repulsive-attractive potential. Frames render cells as shaded disks
with a bright rim on a mid-gray background.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ContractError, ParameterError
from .frames import FrameSequence
from .utils import derive_seed

logger = logging.getLogger(__name__)

TUMOR_TRACK_ID = 0
BACKGROUND_LEVEL = 0.5
INTERIOR_LEVEL = 0.35
RIM_LEVEL = 0.9
_MIN_FORCE_DISTANCE = 1.0
_PLACEMENT_ATTEMPTS = 10_000


@dataclass(frozen=True)
class SimParams:
    height: int = 288
    width: int = 288
    n_immune: int = 16
    n_frames: int = 100
    dt: float = 20.0
    drift: float = 0.5
    diffusion: float = 1.0
    t_eff: int = 60
    immune_radius: float = 4.0
    tumor_radius: float = 10.0
    potential: bool = True
    r_rep: float = 14.0
    r_att: float = 40.0
    k_rep: float = 20.0
    k_att: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if min(self.height, self.width, self.n_frames) < 1 or self.n_immune < 0:
            raise ParameterError("frame size and frame count must be positive, n_immune non-negative")
        if self.immune_radius <= 0 or self.tumor_radius <= 0:
            raise ParameterError("cell radii must be positive")
        if self.drift < 0 or self.diffusion < 0 or self.dt <= 0:
            raise ParameterError("drift and diffusion must be non-negative, dt positive")
        if not 0 <= self.t_eff <= self.n_frames:
            raise ParameterError(f"t_eff must lie in [0, n_frames], got {self.t_eff}")
        if self.r_rep <= 0 or self.r_att < self.r_rep:
            raise ParameterError("potential ranges need 0 < r_rep <= r_att")

    @property
    def center(self) -> Tuple[float, float]:
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0


@dataclass
class Trajectory:
    track_id: int
    frames: np.ndarray
    positions: np.ndarray
    radius: float
    kind: str = "immune"

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.int64).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 2)
        if len(self.frames) != len(self.positions):
            raise ContractError(f"track {self.track_id}: {len(self.frames)} frames but {len(self.positions)} positions")
        if len(self.frames) > 1 and np.any(np.diff(self.frames) <= 0):
            raise ContractError(f"track {self.track_id}: frame indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    def as_map(self) -> Dict[int, np.ndarray]:
        return {int(f): p for f, p in zip(self.frames, self.positions)}


def _reflect(values: np.ndarray, upper: float) -> np.ndarray:
    out = np.where(values < 0.0, -values, values)
    out = np.where(out > upper, 2.0 * upper - out, out)
    return np.clip(out, 0.0, upper)


def _place_immune(params: SimParams, rng: np.random.Generator) -> np.ndarray:
    ri, rt = params.immune_radius, params.tumor_radius
    cx, cy = params.center
    placed: List[np.ndarray] = []
    for _ in range(params.n_immune):
        for _attempt in range(_PLACEMENT_ATTEMPTS):
            p = np.array([rng.uniform(ri, params.width - 1 - ri), rng.uniform(ri, params.height - 1 - ri)])
            if np.hypot(p[0] - cx, p[1] - cy) < ri + rt:
                continue
            if any(np.hypot(*(p - q)) < 2 * ri for q in placed):
                continue
            placed.append(p)
            break
        else:
            raise ParameterError(f"could not place {params.n_immune} non-overlapping cells in {params.width}x{params.height}")
    return np.array(placed, dtype=np.float64).reshape(-1, 2)


def potential_step(params: SimParams, positions: np.ndarray, tumor: np.ndarray) -> np.ndarray:
    """Displacement from the radial potential for every immune cell.

    Tumor interaction: repulsion k_rep/d² for d < r_rep, constant pull k_att for
    r_rep <= d < r_att, nothing beyond. Immune pairs use the repulsive branch only.
    """
    step = np.zeros_like(positions)
    rel = positions - tumor
    d = np.hypot(rel[:, 0], rel[:, 1])
    unit = np.divide(rel, d[:, None], out=np.zeros_like(rel), where=d[:, None] > 0)
    dc = np.maximum(d, _MIN_FORCE_DISTANCE)
    mag = np.where(d < params.r_rep, params.k_rep / dc ** 2, np.where(d < params.r_att, -params.k_att, 0.0))
    step += mag[:, None] * unit

    if len(positions) > 1:
        diff = positions[:, None, :] - positions[None, :, :]
        dist = np.hypot(diff[..., 0], diff[..., 1])
        np.fill_diagonal(dist, np.inf)
        near = dist < params.r_rep
        safe = np.where(near, np.maximum(dist, 1e-12), 1.0)
        push = np.where(near, params.k_rep / np.maximum(safe, _MIN_FORCE_DISTANCE) ** 2 / safe, 0.0)
        step += np.einsum("ij,ijk->ik", push, diff)
    return step


def simulate_trajectories(params: SimParams) -> List[Trajectory]:
    """Tumor (track 0) fixed at the frame centre plus ``n_immune`` drifting walkers."""
    rng = np.random.default_rng(params.seed)
    tumor = np.array(params.center)
    pos = _place_immune(params, rng)
    history = np.zeros((params.n_frames, params.n_immune, 2))
    history[0] = pos
    for t in range(1, params.n_frames):
        rel = tumor - pos
        d = np.hypot(rel[:, 0], rel[:, 1])
        toward = np.divide(rel, d[:, None], out=np.zeros_like(rel), where=d[:, None] > 0)
        noise = rng.normal(0.0, 1.0, size=pos.shape)
        step = params.drift * toward + params.diffusion * noise
        if params.potential and t <= params.t_eff:
            step += potential_step(params, pos, tumor)
        pos = pos + step
        pos[:, 0] = _reflect(pos[:, 0], params.width - 1.0)
        pos[:, 1] = _reflect(pos[:, 1], params.height - 1.0)
        history[t] = pos

    frames = np.arange(params.n_frames)
    tracks = [Trajectory(TUMOR_TRACK_ID, frames, np.tile(tumor, (params.n_frames, 1)), params.tumor_radius, kind="tumor")]
    for i in range(params.n_immune):
        tracks.append(Trajectory(i + 1, frames, history[:, i, :], params.immune_radius))
    return tracks


def _draw_cell(img: np.ndarray, x: float, y: float, radius: float) -> None:
    h, w = img.shape
    rim_width = max(0.8, 0.15 * radius)
    reach = radius + 4.0 * rim_width
    x0, x1 = max(0, int(np.floor(x - reach))), min(w, int(np.ceil(x + reach)) + 1)
    y0, y1 = max(0, int(np.floor(y - reach))), min(h, int(np.ceil(y + reach)) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.hypot(xx - x, yy - y)
    coverage = np.clip(radius + 0.5 - d, 0.0, 1.0)
    rim = np.exp(-0.5 * ((d - radius) / rim_width) ** 2)
    patch = img[y0:y1, x0:x1]
    patch += coverage * (INTERIOR_LEVEL - patch) + (RIM_LEVEL - BACKGROUND_LEVEL) * rim


def render_frames(trajectories: List[Trajectory], params: SimParams) -> FrameSequence:
    """Phase-contrast-like rendering: darker interior, bright rim, gray background."""
    frames = np.full((params.n_frames, params.height, params.width), BACKGROUND_LEVEL)
    for tr in sorted(trajectories, key=lambda t: t.kind != "tumor"):
        for f, (x, y) in zip(tr.frames, tr.positions):
            if 0 <= f < params.n_frames:
                _draw_cell(frames[f], x, y, tr.radius)
    return FrameSequence(np.clip(frames, 0.0, 1.0), bit_depth=16, frame_interval=params.dt)


@dataclass
class SyntheticVideo:
    index: int
    seed: int
    frames: FrameSequence
    trajectories: List[Trajectory]


def make_video(params: SimParams, index: int = 0) -> SyntheticVideo:
    tracks = simulate_trajectories(params)
    return SyntheticVideo(index=index, seed=params.seed, frames=render_frames(tracks, params), trajectories=tracks)


def make_dataset(n_videos: int, params: SimParams, base_seed: int) -> List[SyntheticVideo]:
    if n_videos < 1:
        raise ParameterError(f"n_videos must be >= 1, got {n_videos}")
    videos = []
    for v in range(n_videos):
        seeded = replace(params, seed=derive_seed(base_seed, v))
        videos.append(make_video(seeded, v))
        logger.info("Simulated video %d/%d (seed %d)", v + 1, n_videos, seeded.seed)
    return videos


def split_tumor(trajectories: List[Trajectory]) -> Tuple[Optional[Trajectory], List[Trajectory]]:
    tumor = next((t for t in trajectories if t.kind == "tumor"), None)
    return tumor, [t for t in trajectories if t.kind != "tumor"]
