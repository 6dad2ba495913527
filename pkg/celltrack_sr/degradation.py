"""LR observation model y = S·x + η and the interpolation baselines."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import DEFAULT_LANCZOS_ORDER, cubic_kernel, kernel_matrix, lanczos_matrix
from .utils import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DegradationSpec:
    magnification: int = 4
    noise_sigma: float = 0.0
    seed: int = 0
    lanczos_order: int = DEFAULT_LANCZOS_ORDER

    def __post_init__(self):
        if int(self.magnification) != self.magnification or self.magnification < 1:
            raise ParameterError(f"magnification must be a positive integer, got {self.magnification}")
        if self.noise_sigma < 0:
            raise ParameterError(f"noise sigma must be non-negative, got {self.noise_sigma}")

    @property
    def factor(self) -> Fraction:
        return Fraction(1, self.magnification)


def _as_image(img) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {arr.shape}")
    return arr


def downsample(hr, spec: DegradationSpec) -> np.ndarray:
    """Anti-aliased Lanczos decimation by L (the operator S)."""
    hr = _as_image(hr)
    L = spec.magnification
    h, w = hr.shape
    if h % L or w % L:
        raise ShapeError(f"image {h}x{w} is not divisible by magnification {L}")
    if L == 1:
        return hr.copy()
    ah = lanczos_matrix(h, h // L, spec.lanczos_order)
    aw = lanczos_matrix(w, w // L, spec.lanczos_order)
    return ah @ hr @ aw.T


def add_awgn(img, sigma: float, seed: int) -> np.ndarray:
    """Add i.i.d. N(0, σ²) noise and clamp to [0,1]."""
    img = np.asarray(img, dtype=np.float64)
    if sigma < 0:
        raise ParameterError(f"noise sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    return np.clip(img + rng.normal(0.0, sigma, size=img.shape), 0.0, 1.0)


def degrade(hr, spec: DegradationSpec, frame_index: int = 0) -> np.ndarray:
    # stored frames live on [0,1]; each frame gets its own noise stream
    lr = np.clip(downsample(hr, spec), 0.0, 1.0)
    return add_awgn(lr, spec.noise_sigma, derive_seed(spec.seed, frame_index))


def bicubic_upsample(lr, L: int) -> np.ndarray:
    """Catmull-Rom (a = -0.5) bicubic interpolation by an integer factor."""
    lr = _as_image(lr)
    if L < 1:
        raise ParameterError(f"magnification must be >= 1, got {L}")
    if L == 1:
        return lr.copy()
    h, w = lr.shape
    ah = kernel_matrix(h, h * L, cubic_kernel, 2.0, antialias=False)
    aw = kernel_matrix(w, w * L, cubic_kernel, 2.0, antialias=False)
    return ah @ lr @ aw.T


def nearest_upsample(lr, L: int) -> np.ndarray:
    lr = _as_image(lr)
    if L < 1:
        raise ParameterError(f"magnification must be >= 1, got {L}")
    return np.repeat(np.repeat(lr, L, axis=0), L, axis=1)
