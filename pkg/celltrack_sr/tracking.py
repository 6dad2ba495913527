"""Cell localisation (circular Hough transform) and frame-to-frame linking."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .errors import ParameterError
from .simulation import Trajectory

logger = logging.getLogger(__name__)

GATED_COST = 1e9


@dataclass(frozen=True)
class TrackingParams:
    r_min: float = 2.5
    r_max: float = 13.0
    radius_step: float = 0.5
    threshold: float = 0.15
    edge_threshold: float = 0.02
    prefilter_sigma: float = 1.0
    polarity: str = "both"
    gate: float = 4.5
    max_missed: int = 2
    tumor_split_radius: float = 7.0

    def __post_init__(self):
        if self.polarity not in ("both", "bright", "dark"):
            raise ParameterError(f"polarity must be both, bright or dark, got {self.polarity!r}")
        if self.gate <= 0 or self.max_missed < 0 or self.radius_step <= 0:
            raise ParameterError("gate and radius_step must be positive, max_missed non-negative")

    def for_scale(self, scale: int) -> "ScaledSettings":
        """Detector settings for frames downsampled by ``scale``.

        Radii, step and prefilter width shrink with the scale. Downsampled
        cells keep only a few faint edge pixels, so both thresholds shrink too.
        """
        r_max = self.r_max / scale
        r_min = min(max(1.0, self.r_min / scale), r_max)
        return ScaledSettings(
            radius_band=(r_min, max(r_max, r_min)),
            prefilter_sigma=max(0.5, self.prefilter_sigma / scale),
            radius_step=self.radius_step / scale,
            threshold=self.threshold / scale,
            edge_threshold=self.edge_threshold / scale,
        )


@dataclass(frozen=True)
class ScaledSettings:
    radius_band: Tuple[float, float]
    prefilter_sigma: float
    radius_step: float
    threshold: float
    edge_threshold: float


@dataclass
class Detection:
    frame_index: int
    x: float
    y: float
    radius: float
    score: float

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y])


def _splat(shape: Tuple[int, int], xs: np.ndarray, ys: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # bilinear vote deposit
    h, w = shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0
    acc = np.zeros(h * w)
    for dx, dy, share in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)), (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        acc += np.bincount(yi[ok] * w + xi[ok], weights=(weights * share)[ok], minlength=h * w)
    return acc.reshape(h, w)


def cht_localize(
    frame,
    radius_band: Tuple[float, float],
    threshold: float = 0.15,
    frame_index: int = 0,
    edge_threshold: float = 0.02,
    prefilter_sigma: float = 1.0,
    radius_step: float = 0.5,
    polarity: str = "both",
) -> List[Detection]:
    """Gradient-weighted circular Hough voting over a radius band.

    Every edge pixel votes at distance r along its gradient direction
    ("bright": toward the brighter side, "dark": away from it, "both").
    The score of a candidate (x, y, r) is the 3x3 vote sum divided by 2πr.
    Peaks are suppressed within ``r_min`` (or within an already accepted
    circle), centres refined by the vote centroid and radii by the
    score-weighted mean over the radii above half the peak profile.
    """
    r_min, r_max = radius_band
    if r_min < 1 or r_max < r_min:
        raise ParameterError(f"radius band must satisfy 1 <= r_min <= r_max, got {radius_band}")
    img = np.asarray(frame, dtype=np.float64)
    if prefilter_sigma > 0:
        img = ndimage.gaussian_filter(img, prefilter_sigma)
    gx = ndimage.sobel(img, axis=1) / 8.0
    gy = ndimage.sobel(img, axis=0) / 8.0
    mag = np.hypot(gx, gy)
    ys, xs = np.nonzero(mag > edge_threshold)
    if len(xs) == 0:
        return []
    weights = mag[ys, xs]
    ux, uy = gx[ys, xs] / weights, gy[ys, xs] / weights
    signs = {"both": (1.0, -1.0), "bright": (1.0,), "dark": (-1.0,)}[polarity]

    radii = np.arange(r_min, r_max + 1e-9, radius_step)
    votes = np.zeros((len(radii),) + img.shape)
    for k, r in enumerate(radii):
        for s in signs:
            votes[k] += _splat(img.shape, xs + s * r * ux, ys + s * r * uy, weights)
    scores = np.stack([ndimage.uniform_filter(v, size=3, mode="constant") * 9.0 / (2 * np.pi * r) for v, r in zip(votes, radii)])
    best = scores.max(axis=0)

    nms = 2 * int(np.ceil(r_min)) + 1
    peaks = (ndimage.maximum_filter(best, size=nms, mode="constant") == best) & (best > threshold)
    py, px = np.nonzero(peaks)
    order = np.argsort(-best[py, px], kind="stable")

    h, w = img.shape
    found: List[Detection] = []
    for i in order:
        y, x = int(py[i]), int(px[i])
        profile = scores[:, y, x]
        sel = profile >= 0.5 * profile.max()
        radius = float(np.sum(profile[sel] * radii[sel]) / np.sum(profile[sel]))
        y0, y1, x0, x1 = max(0, y - 1), min(h, y + 2), max(0, x - 1), min(w, x + 2)
        patch = votes[sel, y0:y1, x0:x1].sum(axis=0)
        total = patch.sum()
        gy_, gx_ = np.mgrid[y0:y1, x0:x1]
        cy = float((patch * gy_).sum() / total) if total > 0 else float(y)
        cx = float((patch * gx_).sum() / total) if total > 0 else float(x)
        if any(np.hypot(cx - d.x, cy - d.y) < max(r_min, d.radius) for d in found):
            continue
        found.append(Detection(frame_index, cx, cy, radius, float(best[y, x])))
    return found


@dataclass
class CostMatrix:
    values: np.ndarray
    gate: Optional[float] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            values = values.reshape(0, 0) if values.size == 0 else np.atleast_2d(values)
        self.values = values

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @classmethod
    def from_positions(cls, tracks: np.ndarray, detections: np.ndarray, gate: float) -> "CostMatrix":
        tracks = np.asarray(tracks, dtype=np.float64).reshape(-1, 2)
        detections = np.asarray(detections, dtype=np.float64).reshape(-1, 2)
        dist = np.hypot(tracks[:, None, 0] - detections[None, :, 0], tracks[:, None, 1] - detections[None, :, 1])
        return cls(np.where(dist > gate, GATED_COST, dist), gate)

    def is_gated(self, row: int, col: int) -> bool:
        return self.values[row, col] >= GATED_COST


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]] = field(default_factory=list)
    unmatched_rows: List[int] = field(default_factory=list)
    unmatched_cols: List[int] = field(default_factory=list)
    total_cost: float = 0.0


def solve_assignment(cost: CostMatrix) -> Assignment:
    """Minimum-cost one-to-one matching; gated pairs are dropped from the result."""
    n_rows, n_cols = cost.shape
    if n_rows == 0 or n_cols == 0:
        return Assignment([], list(range(n_rows)), list(range(n_cols)), 0.0)
    rows, cols = linear_sum_assignment(cost.values)
    keep = cost.values[rows, cols] < GATED_COST
    pairs = [(int(r), int(c)) for r, c in zip(rows[keep], cols[keep])]
    matched_r = {r for r, _ in pairs}
    matched_c = {c for _, c in pairs}
    return Assignment(
        pairs,
        [r for r in range(n_rows) if r not in matched_r],
        [c for c in range(n_cols) if c not in matched_c],
        float(sum(cost.values[r, c] for r, c in pairs)),
    )


@dataclass
class _OpenTrack:
    track_id: int
    frames: List[int] = field(default_factory=list)
    positions: List[np.ndarray] = field(default_factory=list)
    radii: List[float] = field(default_factory=list)
    missed: int = 0

    def add(self, frame: int, det: Detection) -> None:
        self.frames.append(frame)
        self.positions.append(det.center)
        self.radii.append(det.radius)
        self.missed = 0

    def close(self) -> Trajectory:
        return Trajectory(self.track_id, self.frames, np.array(self.positions), float(np.mean(self.radii)))


def link_tracks(detections_per_frame: Sequence[Sequence[Detection]], gate: float, max_missed: int = 2) -> List[Trajectory]:
    """Frame-to-frame linking by optimal assignment with a distance gate.

    A track survives up to ``max_missed`` consecutive frames without a match;
    unmatched detections start new tracks.
    """
    active: List[_OpenTrack] = []
    finished: List[_OpenTrack] = []
    next_id = 1
    for f, dets in enumerate(detections_per_frame):
        dets = list(dets)
        last = np.array([t.positions[-1] for t in active]).reshape(-1, 2)
        centers = np.array([d.center for d in dets]).reshape(-1, 2)
        result = solve_assignment(CostMatrix.from_positions(last, centers, gate))
        for r, c in result.pairs:
            active[r].add(f, dets[c])
        still: List[_OpenTrack] = []
        matched = {r for r, _ in result.pairs}
        for r, track in enumerate(active):
            if r not in matched:
                track.missed += 1
            (finished if track.missed > max_missed else still).append(track)
        for c in result.unmatched_cols:
            track = _OpenTrack(next_id)
            next_id += 1
            track.add(f, dets[c])
            still.append(track)
        active = still
    tracks = [t.close() for t in sorted(finished + active, key=lambda t: t.track_id)]
    logger.debug("Linked %d tracks over %d frames", len(tracks), len(detections_per_frame))
    return tracks


def lr_to_hr(coords: np.ndarray, scale: int) -> np.ndarray:
    # pixel centres: x_hr = (x_lr + 0.5)·L − 0.5
    return (np.asarray(coords, dtype=np.float64) + 0.5) * scale - 0.5


def label_tumor(tracks: List[Trajectory], split_radius: float) -> List[Trajectory]:
    """Mark the longest large-radius track as the tumor."""
    big = [t for t in tracks if t.radius >= split_radius]
    if big:
        tumor = max(big, key=lambda t: (len(t), t.radius))
        tumor.kind = "tumor"
    return tracks


def track_video(frames, params: TrackingParams, scale: int = 1) -> List[Trajectory]:
    """Localise and link every frame; LR coordinates and radii are mapped to HR units."""
    settings = params.for_scale(scale)
    per_frame: List[List[Detection]] = []
    for f, frame in enumerate(frames):
        dets = cht_localize(
            frame,
            settings.radius_band,
            settings.threshold,
            frame_index=f,
            edge_threshold=settings.edge_threshold,
            prefilter_sigma=settings.prefilter_sigma,
            radius_step=settings.radius_step,
            polarity=params.polarity,
        )
        if scale != 1:
            for d in dets:
                d.x, d.y = (float(v) for v in lr_to_hr(np.array([d.x, d.y]), scale))
                d.radius *= scale
        per_frame.append(dets)
    tracks = link_tracks(per_frame, params.gate, params.max_missed)
    logger.info("Tracked %d trajectories over %d frames (scale %d)", len(tracks), len(per_frame), scale)
    return label_tumor(tracks, params.tumor_split_radius)
