"""Image quality, motility and tracking-fidelity measures."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, stats

from .errors import ParameterError, ShapeError
from .simulation import Trajectory, split_tumor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricParams:
    k1: float = 0.01
    k2: float = 0.03
    ssim_form: str = "conventional"
    match_radius: Optional[float] = None
    smoothing_sigma: float = 0.0
    immune_radius: float = 4.0
    tumor_radius: float = 10.0

    def __post_init__(self):
        if self.ssim_form not in ("conventional", "verbatim"):
            raise ParameterError(f"ssim_form must be conventional or verbatim, got {self.ssim_form!r}")
        if self.smoothing_sigma < 0:
            raise ParameterError("smoothing sigma must be non-negative")

    @property
    def fidelity_radius(self) -> float:
        return self.match_radius if self.match_radius is not None else self.immune_radius


def _pair(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    return x, y


# Image quality

def psnr(x, y) -> float:
    """20·log10((max(Y) − min(Y)) / RMSE) with Y the reference; +inf when x == y."""
    x, y = _pair(x, y)
    data_range = float(y.max() - y.min())
    if data_range == 0:
        raise ParameterError("PSNR is undefined for a constant reference image")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 20.0 * math.log10(data_range / math.sqrt(mse))


def ssim(x, y, k1: float = 0.01, k2: float = 0.03, form: str = "conventional") -> float:
    """Single-window SSIM over whole-image statistics, clamped to [0,1].

    ``conventional``: c_i = (k_i·max(Y))², covariance term, c2 in the contrast factor.
    ``verbatim``: c_i = k_i·max(Y), 2σ_Xσ_Y numerator and c1 in both denominator factors.
    """
    x, y = _pair(x, y)
    mx, my = x.mean(), y.mean()
    vx, vy = x.var(), y.var()
    peak = float(y.max())
    if form == "conventional":
        c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
        cross = float(np.mean((x - mx) * (y - my)))
        num = (2 * mx * my + c1) * (2 * cross + c2)
        den = (mx ** 2 + my ** 2 + c1) * (vx + vy + c2)
    elif form == "verbatim":
        c1, c2 = k1 * peak, k2 * peak
        num = (2 * mx * my + c1) * (2 * math.sqrt(vx) * math.sqrt(vy) + c2)
        den = (mx ** 2 + my ** 2 + c1) * (vx + vy + c1)
    else:
        raise ParameterError(f"unknown SSIM form {form!r}")
    if den == 0:
        return 1.0 if np.array_equal(x, y) else 0.0
    return float(min(1.0, max(0.0, num / den)))


def gaussian_smooth(frame, sigma: float) -> np.ndarray:
    """Separable Gaussian filter used as a ground-truth proxy for real videos."""
    frame = np.asarray(frame, dtype=np.float64)
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return frame.copy()
    return ndimage.gaussian_filter(frame, sigma, mode="nearest")


def image_quality(frames: Sequence[np.ndarray], reference: Sequence[np.ndarray], params: MetricParams) -> Tuple[List[float], List[float]]:
    if len(frames) != len(reference):
        raise ShapeError(f"{len(frames)} frames against {len(reference)} reference frames")
    psnrs = [psnr(f, r) for f, r in zip(frames, reference)]
    ssims = [ssim(f, r, params.k1, params.k2, params.ssim_form) for f, r in zip(frames, reference)]
    return psnrs, ssims


# Motility and interaction

def msd_curve(trajectories: Sequence[Trajectory]) -> List[float]:
    """MSD at lag t from each track's first sample, over the tracks alive at that lag."""
    sums: Dict[int, float] = {}
    counts: Dict[int, int] = {}
    for tr in trajectories:
        if len(tr) == 0:
            continue
        lags = tr.frames - tr.frames[0]
        disp = np.sum((tr.positions - tr.positions[0]) ** 2, axis=1)
        for lag, d in zip(lags, disp):
            sums[int(lag)] = sums.get(int(lag), 0.0) + float(d)
            counts[int(lag)] = counts.get(int(lag), 0) + 1
    if not sums:
        return []
    return [sums[t] / counts[t] if t in counts else float("nan") for t in range(max(sums) + 1)]


def ccc(a, b) -> float:
    """Lin's concordance correlation coefficient."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ShapeError(f"CCC needs two series of equal length >= 2, got {a.shape} and {b.shape}")
    va, vb = a.var(), b.var()
    den = va + vb + (a.mean() - b.mean()) ** 2
    if den == 0:
        logger.warning("CCC of two identical constant series is undefined; reporting 0")
        return 0.0
    return float(2.0 * np.mean((a - a.mean()) * (b - b.mean())) / den)


def curve_ccc(reference: Sequence[float], other: Sequence[float]) -> float:
    n = min(len(reference), len(other))
    a = np.asarray(reference[:n], dtype=np.float64)
    b = np.asarray(other[:n], dtype=np.float64)
    ok = np.isfinite(a) & np.isfinite(b)
    if ok.sum() < 2:
        return float("nan")
    return ccc(a[ok], b[ok])


def mean_interaction_time(
    immune: Sequence[Trajectory], tumor: Trajectory, immune_radius: float, tumor_radius: float
) -> Tuple[List[int], float]:
    """Frames each immune track spends within 2·(r_tumor + r_immune) of the tumor."""
    radius = 2.0 * (immune_radius + tumor_radius)
    tumor_at = tumor.as_map()
    counts = []
    for tr in immune:
        n = 0
        for f, p in zip(tr.frames, tr.positions):
            q = tumor_at.get(int(f))
            if q is not None and math.hypot(p[0] - q[0], p[1] - q[1]) <= radius:
                n += 1
        counts.append(n)
    mean = float(np.mean(counts)) if counts else float("nan")
    return counts, mean


def two_sample_ttest(a, b) -> Tuple[float, float]:
    """Welch's two-sided t-test; (t, p)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ParameterError(f"each sample needs at least 2 values, got {a.size} and {b.size}")
    if a.var() == 0 and b.var() == 0:
        if a.mean() == b.mean():
            return 0.0, 1.0
        return math.copysign(math.inf, a.mean() - b.mean()), 0.0
    result = stats.ttest_ind(a, b, equal_var=False)
    return float(result.statistic), float(result.pvalue)


# Tracking fidelity

@dataclass
class FidelityResult:
    detection_percentage: float
    swap_error: float
    detected: int
    total: int
    swaps_per_track: List[int] = field(default_factory=list)


def tracking_fidelity(detected: Sequence[Trajectory], gt: Sequence[Trajectory], match_radius: float) -> FidelityResult:
    """Detection percentage and swaps per GT trajectory.

    A GT sample is matched to the nearest detected sample of the same frame
    within ``match_radius``. A GT track counts as detected when at least half
    its samples are matched; a swap is a change of matched detected identity.
    """
    raw: Dict[int, Tuple[list, List[int]]] = {}
    for tr in detected:
        for f, p in zip(tr.frames, tr.positions):
            pts, ids = raw.setdefault(int(f), ([], []))
            pts.append(p)
            ids.append(tr.track_id)
    by_frame = {f: (np.array(p).reshape(-1, 2), ids) for f, (p, ids) in raw.items()}

    hits = 0
    swaps_per_track: List[int] = []
    for g in gt:
        ids_seen: List[int] = []
        matched = 0
        for f, p in zip(g.frames, g.positions):
            entry = by_frame.get(int(f))
            if entry is None:
                continue
            pts, ids = entry
            dist = np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1])
            k = int(np.argmin(dist))
            if dist[k] <= match_radius:
                matched += 1
                ids_seen.append(ids[k])
        if len(g) and matched >= 0.5 * len(g):
            hits += 1
        swaps_per_track.append(sum(1 for u, v in zip(ids_seen, ids_seen[1:]) if u != v))
    total = len(gt)
    if total == 0:
        logger.warning("tracking fidelity requested without ground-truth trajectories")
        return FidelityResult(0.0, 0.0, 0, 0, [])
    return FidelityResult(100.0 * hits / total, float(np.mean(swaps_per_track)), hits, total, swaps_per_track)


@dataclass
class MetricsReport:
    video: str
    source: str
    psnr: List[float] = field(default_factory=list)
    ssim: List[float] = field(default_factory=list)
    lr_psnr: List[float] = field(default_factory=list)
    msd: List[float] = field(default_factory=list)
    msd_ccc: Optional[float] = None
    mit: List[int] = field(default_factory=list)
    mit_mean: Optional[float] = None
    ttest_t: Optional[float] = None
    ttest_p: Optional[float] = None
    detection_percentage: Optional[float] = None
    swap_error: Optional[float] = None

    @property
    def psnr_mean(self) -> Optional[float]:
        finite = [v for v in self.psnr if math.isfinite(v)]
        return float(np.mean(finite)) if finite else None

    @property
    def ssim_mean(self) -> Optional[float]:
        return float(np.mean(self.ssim)) if self.ssim else None

    def to_dict(self) -> Dict:
        doc = asdict(self)
        doc["psnr_mean"] = self.psnr_mean
        doc["ssim_mean"] = self.ssim_mean
        return doc

    @classmethod
    def from_dict(cls, doc: Dict) -> "MetricsReport":
        names = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in doc.items() if k in names})


def descriptor_metrics(report: MetricsReport, gt: Sequence[Trajectory], tracks: Sequence[Trajectory], params: MetricParams) -> MetricsReport:
    """Fill the motility, interaction and fidelity fields of ``report``."""
    gt_tumor, gt_immune = split_tumor(list(gt))
    tumor, immune = split_tumor(list(tracks))
    gt_curve = msd_curve(gt_immune)
    report.msd = msd_curve(immune)
    report.msd_ccc = curve_ccc(gt_curve, report.msd) if report.msd else None

    reference_tumor = tumor or gt_tumor
    if reference_tumor is not None and gt_tumor is not None:
        gt_mit, _ = mean_interaction_time(gt_immune, gt_tumor, params.immune_radius, params.tumor_radius)
        report.mit, report.mit_mean = mean_interaction_time(immune, reference_tumor, params.immune_radius, params.tumor_radius)
        if len(gt_mit) >= 2 and len(report.mit) >= 2:
            report.ttest_t, report.ttest_p = two_sample_ttest(gt_mit, report.mit)

    fidelity = tracking_fidelity(immune, gt_immune, params.fidelity_radius)
    report.detection_percentage = fidelity.detection_percentage
    report.swap_error = fidelity.swap_error
    return report
