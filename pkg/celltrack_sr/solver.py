"""Frame-wise deep-prior optimisation: DPV, RDPV and the TV-penalised RDPV variants."""
from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .degradation import DegradationSpec
from .errors import ConfigError, ContractError, ParameterError, SolverDivergedError
from .frames import FrameSequence
from .network import NetworkConfig, NetworkWeights, SeedImage, build_network, forward, make_seed_image
from .tensor import GradTensor
from .utils import derive_seed

logger = logging.getLogger(__name__)

RELATIVE_DECREASE_FLOOR = 1e-12


class Method(str, Enum):
    DPV = "DPV"
    RDPV = "RDPV"
    RDPV_TVA = "RDPV-TVa"
    RDPV_TVI = "RDPV-TVi"

    @property
    def recursive(self) -> bool:
        return self is not Method.DPV

    @property
    def tv_p(self) -> Optional[int]:
        return {Method.RDPV_TVA: 1, Method.RDPV_TVI: 2}.get(self)


class StopReason(str, Enum):
    MAX_ITERS = "max-iters"
    PATIENCE_FLAT = "patience-flat"


@dataclass(frozen=True)
class AdamHyper:
    step: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class SolverConfig:
    method: Method = Method.RDPV
    lam: float = 0.0
    max_iters_first: int = 1000
    max_iters_rest: int = 500
    early_stop_start_first: int = 500
    early_stop_start_rest: int = 300
    patience: int = 50
    flat_threshold: float = 1e-4
    adam: AdamHyper = field(default_factory=AdamHyper)
    magnification: int = 4
    tv_eps: float = 1e-8
    input_noise_std: float = 0.0
    dpv_budget: str = "matched"
    workers: int = 1
    log_every: int = 100
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if isinstance(self.adam, dict):
            object.__setattr__(self, "adam", AdamHyper(**self.adam))
        if isinstance(self.network, dict):
            object.__setattr__(self, "network", NetworkConfig(**self.network))
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if self.method.tv_p is None and self.lam != 0:
            raise ConfigError(f"{self.method.value} has no TV term; lambda must be 0 (got {self.lam})")
        if min(self.max_iters_first, self.max_iters_rest, self.early_stop_start_first, self.early_stop_start_rest) < 1:
            raise ConfigError("iteration budgets must be positive")
        if self.early_stop_start_first > self.max_iters_first or self.early_stop_start_rest > self.max_iters_rest:
            raise ConfigError("early-stop start must not exceed the iteration budget")
        if self.patience < 2:
            raise ConfigError(f"patience must be >= 2, got {self.patience}")
        if self.flat_threshold < 0 or self.tv_eps < 0 or self.input_noise_std < 0:
            raise ConfigError("flat_threshold, tv_eps and input_noise_std must be non-negative")
        if self.dpv_budget not in ("matched", "fixed"):
            raise ConfigError(f"dpv_budget must be 'matched' or 'fixed', got {self.dpv_budget!r}")
        if self.magnification < 1 or self.workers < 1:
            raise ConfigError("magnification and workers must be positive")

    def budget(self, frame_index: int) -> Tuple[int, int]:
        if frame_index == 0:
            return self.max_iters_first, self.early_stop_start_first
        return self.max_iters_rest, self.early_stop_start_rest

    def with_method(self, method, lam: Optional[float] = None) -> "SolverConfig":
        method = Method(method)
        if lam is None:
            lam = self.lam if method.tv_p is not None else 0.0
        return replace(self, method=method, lam=lam)


@dataclass
class SolverTrace:
    frame_index: int
    method: str
    objectives: List[float] = field(default_factory=list)
    stop_iteration: int = 0
    stop_reason: Optional[StopReason] = None
    wall_time: float = 0.0

    def to_record(self) -> Dict:
        # wall-time is kept out so trace files are reproducible
        return {
            "frame": self.frame_index,
            "method": self.method,
            "iterations": self.stop_iteration,
            "stop_reason": self.stop_reason.value if self.stop_reason else None,
            "final_objective": self.objectives[-1] if self.objectives else None,
            "objectives": self.objectives,
        }

    def timing_record(self) -> Dict:
        return {"frame": self.frame_index, "method": self.method, "wall_time": round(self.wall_time, 6)}


# Objective

def _smooth_abs(x: GradTensor, eps: float) -> GradTensor:
    # sqrt(x² + ε) − sqrt(ε): exact |x| at ε = 0, exactly 0 at x = 0
    return T.sqrt(T.square(x) + eps) - math.sqrt(eps)


def tv_penalty(u: GradTensor, p: int, eps: float = 1e-8) -> GradTensor:
    """TV_p with forward differences and replicate boundary; p=1 anisotropic, p=2 isotropic."""
    if p not in (1, 2):
        raise ParameterError(f"TV order p must be 1 or 2, got {p}")
    u = T.as_tensor(u)
    if u.ndim == 2 and u.record is None and not u.requires_grad:
        u = GradTensor(u.values[None])
    if u.ndim != 3 or u.shape[1] < 2 or u.shape[2] < 2:
        raise ParameterError(f"TV needs an image of at least 2x2, got shape {u.shape}")
    dh = T.forward_diff(u, axis=2)
    dv = T.forward_diff(u, axis=1)
    if p == 1:
        return T.reduce_sum(_smooth_abs(dh, eps) + _smooth_abs(dv, eps))
    return T.reduce_sum(T.sqrt(T.square(dh) + T.square(dv) + eps) - math.sqrt(eps))


def frame_objective(weights: NetworkWeights, z, y, spec: DegradationSpec, cfg: SolverConfig) -> GradTensor:
    """‖y − S f_θ(z)‖² (+ λ·TV_p(f_θ(z)) for the TV variants)."""
    out = forward(weights, z)
    lr = T.lanczos_resample(out, spec.factor, spec.lanczos_order)
    y = np.asarray(y, dtype=np.float64)
    if lr.shape[1:] != y.shape:
        raise ContractError(f"S f(z) has shape {lr.shape[1:]} but the observation has shape {y.shape}")
    objective = T.reduce_sum(T.square(lr - y[None]))
    p = cfg.method.tv_p
    if p is not None and cfg.lam > 0:
        objective = objective + cfg.lam * tv_penalty(out, p, cfg.tv_eps)
    return objective


# Optimiser

@dataclass
class AdamState:
    step: int
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros(cls, weights: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            0,
            {k: np.zeros_like(w, dtype=np.float64) for k, w in weights.items()},
            {k: np.zeros_like(w, dtype=np.float64) for k, w in weights.items()},
        )


def adam_step(
    weights: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper,
) -> Tuple["OrderedDict[str, np.ndarray]", AdamState]:
    """One bias-corrected Adam update; returns new arrays and state, inputs untouched."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise SolverDivergedError(f"non-finite gradient for {name} at step {state.step + 1}")
    t = state.step + 1
    c1 = 1.0 - hyper.beta1 ** t
    c2 = 1.0 - hyper.beta2 ** t
    new_w: "OrderedDict[str, np.ndarray]" = OrderedDict()
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for name, w in weights.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        v = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * g * g
        new_w[name] = np.asarray(w, dtype=np.float64) - hyper.step * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_m[name] = m
        new_v[name] = v
    return new_w, AdamState(t, new_m, new_v)


def early_stop_check(window: Sequence[float], patience: int, flat_threshold: float) -> bool:
    """True when the relative decrease over the last ``patience`` values is below the threshold."""
    if len(window) < patience:
        return False
    recent = list(window)[-patience:]
    oldest, newest = recent[0], recent[-1]
    return (oldest - newest) / max(oldest, RELATIVE_DECREASE_FLOOR) < flat_threshold


def optimize(
    objective: Callable[[NetworkWeights, int], GradTensor],
    init: NetworkWeights,
    hyper: AdamHyper,
    max_iters: int,
    early_stop_start: Optional[int],
    patience: int,
    flat_threshold: float,
    trace: SolverTrace,
    log_every: int = 100,
) -> NetworkWeights:
    """Adam loop with patience-based early stopping; fills ``trace`` in place.

    ``early_stop_start=None`` disables early stopping. Only objective values
    recorded after ``early_stop_start`` iterations enter the patience window.
    Returns the iterate whose objective was recorded last: no update is
    applied after the stop rule fires or the budget runs out.
    """
    weights = init.copy()
    state = AdamState.zeros(weights.arrays())
    window: deque = deque(maxlen=patience)
    trace.stop_reason = StopReason.MAX_ITERS
    started = time.perf_counter()
    try:
        for it in range(1, max_iters + 1):
            obj = objective(weights, it)
            value = obj.item()
            if not math.isfinite(value):
                raise SolverDivergedError(f"objective became {value} at iteration {it}", trace)
            trace.objectives.append(value)
            trace.stop_iteration = it
            if log_every and it % log_every == 0:
                logger.debug("frame %d iteration %d objective %.6g", trace.frame_index, it, value)
            if early_stop_start is not None and it > early_stop_start:
                window.append(value)
                if early_stop_check(window, patience, flat_threshold):
                    trace.stop_reason = StopReason.PATIENCE_FLAT
                    break
            if it == max_iters:
                break
            T.backward(obj)
            try:
                arrays, state = adam_step(weights.arrays(), weights.grads(), state, hyper)
            except SolverDivergedError as exc:
                raise SolverDivergedError(str(exc), trace) from exc
            weights = NetworkWeights.from_arrays(weights.config, arrays)
    finally:
        trace.wall_time = time.perf_counter() - started
    return weights.copy()


def solve_frame(
    y,
    init: NetworkWeights,
    z: SeedImage,
    cfg: SolverConfig,
    spec: DegradationSpec,
    frame_index: int = 0,
    max_iters: Optional[int] = None,
    early_stop: bool = True,
    noise_seed: int = 0,
) -> Tuple[np.ndarray, NetworkWeights, SolverTrace]:
    """Optimise θ for one LR frame; returns f_θ*(z), θ* and the trace."""
    if cfg.magnification != spec.magnification:
        raise ConfigError(f"solver magnification {cfg.magnification} differs from degradation {spec.magnification}")
    budget, start = cfg.budget(frame_index)
    if max_iters is not None:
        budget = max_iters
        start = min(start, budget)
    trace = SolverTrace(frame_index=frame_index, method=cfg.method.value)
    rng = np.random.default_rng(noise_seed) if cfg.input_noise_std > 0 else None

    def objective(weights: NetworkWeights, it: int) -> GradTensor:
        z_in = z.values
        if rng is not None:
            z_in = z_in + rng.normal(0.0, cfg.input_noise_std, size=z_in.shape)
        return frame_objective(weights, z_in, y, spec, cfg)

    final = optimize(
        objective,
        init,
        cfg.adam,
        budget,
        start if early_stop else None,
        cfg.patience,
        cfg.flat_threshold,
        trace,
        cfg.log_every,
    )
    sr = forward(final, z).values[0].copy()
    logger.info(
        "%s frame %d: %d iterations (%s), objective %.6g, %.1fs",
        cfg.method.value,
        frame_index,
        trace.stop_iteration,
        trace.stop_reason.value,
        trace.objectives[-1],
        trace.wall_time,
    )
    return sr, final, trace


def video_seed_image(lr_shape: Tuple[int, int], cfg: SolverConfig, seed: int) -> SeedImage:
    h, w = lr_shape
    L = cfg.magnification
    return make_seed_image(h * L, w * L, derive_seed(seed, 0), channels=cfg.network.input_channels)


def initial_weights(cfg: SolverConfig, seed: int, frame_index: Optional[int] = None) -> NetworkWeights:
    # recursive methods draw once per video; DPV draws per frame
    if frame_index is None:
        return build_network(cfg.network, derive_seed(seed, 1))
    return build_network(cfg.network, derive_seed(seed, 2, frame_index))


def _lr_frames(frames) -> List[np.ndarray]:
    data = frames.frames if isinstance(frames, FrameSequence) else frames
    out = [np.asarray(f, dtype=np.float64) for f in data]
    if not out:
        raise ContractError("run_video needs at least one frame")
    return out


def run_video(
    frames,
    cfg: SolverConfig,
    spec: DegradationSpec,
    seed: int,
    budgets: Optional[Sequence[int]] = None,
) -> Tuple[FrameSequence, List[SolverTrace]]:
    """Super-resolve a whole LR video with the configured method.

    RDPV and the TV variants warm-start frame t from frame t−1's weights. DPV
    restarts from random weights on every frame with a fixed budget: either
    ``budgets`` (iterations per frame), the iterations RDPV needs on the same
    video (``dpv_budget="matched"``), or ``max_iters_first`` (``"fixed"``).
    """
    lr = _lr_frames(frames)
    z = video_seed_image(lr[0].shape, cfg, seed)
    interval = frames.frame_interval if isinstance(frames, FrameSequence) else 0.0

    if cfg.method.recursive:
        weights = initial_weights(cfg, seed)
        outputs, traces = [], []
        for t, y in enumerate(lr):
            sr, weights, trace = solve_frame(y, weights, z, cfg, spec, t, noise_seed=derive_seed(seed, 3, t))
            outputs.append(sr)
            traces.append(trace)
        return FrameSequence(np.stack(outputs), bit_depth=16, frame_interval=interval), traces

    if budgets is None:
        if cfg.dpv_budget == "matched":
            logger.info("DPV: running RDPV first to match its per-frame iteration counts")
            _, rdpv_traces = run_video(lr, cfg.with_method(Method.RDPV, 0.0), spec, seed)
            budgets = [tr.stop_iteration for tr in rdpv_traces]
        else:
            budgets = [cfg.max_iters_first] * len(lr)
    if len(budgets) != len(lr):
        raise ContractError(f"got {len(budgets)} DPV budgets for {len(lr)} frames")

    def _one(t: int):
        init = initial_weights(cfg, seed, t)
        sr, _, trace = solve_frame(
            lr[t], init, z, cfg, spec, t, max_iters=int(budgets[t]), early_stop=False, noise_seed=derive_seed(seed, 3, t)
        )
        return sr, trace

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_one, range(len(lr))))
    else:
        results = [_one(t) for t in range(len(lr))]
    outputs = [r[0] for r in results]
    traces = [r[1] for r in results]
    return FrameSequence(np.stack(outputs), bit_depth=16, frame_interval=interval), traces
