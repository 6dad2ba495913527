from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Tuple, Union

import numpy as np
from PIL import Image

from .errors import FormatError
from .utils import frame_sort_key

logger = logging.getLogger(__name__)

SIDECAR_NAME = "sequence.json"
DEFAULT_PATTERN = "*.png"
_LEVELS = {8: 255.0, 16: 65535.0}


@dataclass
class FrameSequence:
    """Ordered grayscale frames on [0,1] with acquisition metadata."""

    frames: np.ndarray
    bit_depth: int = 16
    frame_interval: float = 0.0

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.ndim != 3:
            raise FormatError(f"frames must be [T,H,W], got shape {frames.shape}")
        if frames.size and (frames.min() < -1e-9 or frames.max() > 1.0 + 1e-9):
            raise FormatError(f"intensities must lie in [0,1], got [{frames.min():.4g}, {frames.max():.4g}]")
        if self.bit_depth not in _LEVELS:
            raise FormatError(f"unsupported bit depth {self.bit_depth}")
        self.frames = np.clip(frames, 0.0, 1.0)

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    def __getitem__(self, index: int) -> np.ndarray:
        return self.frames[index]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.frames)

    @property
    def frame_shape(self) -> Tuple[int, int]:
        return tuple(self.frames.shape[1:])

    def center_crop(self, multiple: int) -> "FrameSequence":
        """Largest centred crop whose sides are multiples of ``multiple``."""
        h, w = self.frame_shape
        ch, cw = h - h % multiple, w - w % multiple
        if ch == 0 or cw == 0:
            raise FormatError(f"frames of {h}x{w} are smaller than the required multiple {multiple}")
        if (ch, cw) == (h, w):
            return self
        top, left = (h - ch) // 2, (w - cw) // 2
        logger.warning("Cropping %dx%d frames to %dx%d (sides must be multiples of %d)", h, w, ch, cw, multiple)
        return FrameSequence(self.frames[:, top : top + ch, left : left + cw], self.bit_depth, self.frame_interval)

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "FrameSequence":
        out = np.stack([np.clip(fn(f), 0.0, 1.0) for f in self.frames])
        return FrameSequence(out, bit_depth=self.bit_depth, frame_interval=self.frame_interval)


def _bit_depth_of(img: Image.Image, arr: np.ndarray) -> int:
    if img.mode == "L":
        return 8
    if img.mode.startswith("I;16") or img.mode == "I":
        if arr.size and (arr.min() < 0 or arr.max() > 65535):
            raise FormatError(f"{getattr(img, 'filename', '?')}: values outside the 16-bit range")
        return 16
    raise FormatError(f"{getattr(img, 'filename', '?')}: unsupported image mode {img.mode}")


def _read_sidecar(directory: Path) -> dict:
    path = directory / SIDECAR_NAME
    if not path.exists():
        return {}
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def list_frame_files(directory: Union[str, Path], pattern: str = DEFAULT_PATTERN) -> List[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FormatError(f"frame directory {directory} does not exist")
    files = [p for p in directory.glob(pattern) if p.is_file()]
    return sorted(files, key=lambda p: frame_sort_key(p.name))


def load_frames(directory: Union[str, Path], pattern: str = DEFAULT_PATTERN) -> FrameSequence:
    """Read a numbered 8/16-bit grayscale image sequence, normalised to [0,1]."""
    files = list_frame_files(directory, pattern)
    if not files:
        raise FormatError(f"no files matching {pattern!r} in {directory}")
    frames: List[np.ndarray] = []
    depth = 8
    shape: Optional[Tuple[int, ...]] = None
    for path in files:
        with Image.open(path) as img:
            arr = np.asarray(img)
            bits = _bit_depth_of(img, arr)
        if arr.ndim != 2:
            raise FormatError(f"{path}: expected a single-channel image, got shape {arr.shape}")
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise FormatError(f"{path}: shape {arr.shape} differs from {shape}")
        depth = max(depth, bits)
        frames.append(arr.astype(np.float64) / _LEVELS[bits])
    meta = _read_sidecar(Path(directory))
    logger.debug("Loaded %d frames of %s from %s", len(frames), shape, directory)
    return FrameSequence(
        np.stack(frames),
        bit_depth=int(meta.get("bit_depth", depth)),
        frame_interval=float(meta.get("frame_interval", 0.0)),
    )


def save_frames(seq: FrameSequence, directory: Union[str, Path], prefix: str = "frame_", bit_depth: Optional[int] = None) -> List[str]:
    """Write ``frame_0001.png`` ... plus a ``sequence.json`` sidecar."""
    bit_depth = bit_depth or seq.bit_depth
    if bit_depth not in _LEVELS:
        raise FormatError(f"unsupported bit depth {bit_depth}")
    os.makedirs(directory, exist_ok=True)
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    levels = _LEVELS[bit_depth]
    paths = []
    for i, frame in enumerate(seq.frames, start=1):
        q = np.round(np.clip(frame, 0.0, 1.0) * levels).astype(dtype)
        path = os.path.join(directory, f"{prefix}{i:04d}.png")
        Image.fromarray(q).save(path)
        paths.append(path)
    sidecar = {"bit_depth": bit_depth, "frame_interval": seq.frame_interval, "n_frames": len(seq)}
    with open(os.path.join(directory, SIDECAR_NAME), "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, indent=2)
    return paths
