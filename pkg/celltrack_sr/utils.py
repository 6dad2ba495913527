from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, is_dataclass
from enum import Enum
from fractions import Fraction
from typing import Any, Optional, Sequence, Tuple

import numpy as np


def derive_seed(base_seed: int, *keys: int) -> int:
    # Independent child streams: same (base, keys) always yields the same seed
    seq = np.random.SeedSequence([int(base_seed), *[int(k) for k in keys]])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def _jsonable(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return {k: _jsonable(v) for k, v in asdict(value).items()}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Fraction):
        return f"{value.numerator}/{value.denominator}"
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    return value


def canonical_json(value: Any) -> str:
    return json.dumps(_jsonable(value), sort_keys=True, separators=(",", ":"))


def config_hash(value: Any) -> str:
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()


def numeric_suffix(name: str) -> Optional[int]:
    # "frame_0042.png" -> 42
    m = re.search(r"(\d+)(?=\.[^.]+$|$)", name)
    return int(m.group(1)) if m else None


def frame_sort_key(name: str) -> Tuple[int, int, str]:
    n = numeric_suffix(name)
    return (0, n, name) if n is not None else (1, 0, name)


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    arr = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=np.float64)
    if arr.size == 0:
        return float("nan"), float("nan")
    return float(arr.mean()), float(arr.std())


def mean_std_str(values: Sequence[float], digits: int = 4) -> str:
    m, s = mean_std(values)
    if np.isnan(m):
        return "-"
    return f"{m:.{digits}f} ± {s:.{digits}f}"

