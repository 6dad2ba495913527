"""Encoder-decoder CNN with long skip connections (concatenation) used as the video prior.

Layout for ``encoder_units = n``::

    z ─ E0 ─ E1 ─ ... ─ E(n-1)
        │    │           │
        S0   S1   ...    S(n-1)          (1×1 conv → skip_channels, BN, LReLU)
        │    │           │
    out ─ D0 ─ D1 ─ ... ─ D(n-1) ─ (deepest encoder output)

Encoder unit: stride-2 3×3 conv, BN, LReLU. Decoder unit at level i:
concat(previous, S_i) → 3×3 conv, BN, LReLU → 1×1 conv, BN, LReLU → Lanczos ×2.
Output head: 1×1 conv with bias followed by a sigmoid.
"""
from __future__ import annotations

import json
import logging
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError
from .tensor import GradTensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CTSRNET\x00"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sHI")


@dataclass(frozen=True)
class NetworkConfig:
    encoder_units: int = 4
    decoder_units: int = 4
    encoder_channels: int = 128
    skip_channels: int = 4
    decoder_channels: int = 132
    input_channels: int = 1
    kernel_size: int = 3
    leaky_slope: float = T.DEFAULT_LEAKY_SLOPE
    lanczos_order: int = T.DEFAULT_LANCZOS_ORDER
    bn_eps: float = T.DEFAULT_BN_EPS

    def __post_init__(self):
        if self.encoder_units < 1 or self.encoder_units != self.decoder_units:
            raise ConfigError(
                f"encoder_units ({self.encoder_units}) must be positive and equal decoder_units ({self.decoder_units})"
            )
        if min(self.encoder_channels, self.skip_channels, self.input_channels) < 1:
            raise ConfigError("channel counts must be positive")
        if self.decoder_channels != self.encoder_channels + self.skip_channels:
            raise ConfigError(
                f"decoder_channels must equal encoder_channels + skip_channels "
                f"({self.encoder_channels} + {self.skip_channels}), got {self.decoder_channels}"
            )
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in (0,1), got {self.leaky_slope}")
        if self.lanczos_order < 1 or self.bn_eps <= 0:
            raise ConfigError("lanczos_order must be >= 1 and bn_eps > 0")

    @property
    def divisor(self) -> int:
        return 2 ** self.encoder_units

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkConfig":
        return cls(**data)


def parameter_shapes(config: NetworkConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Ordered parameter names and shapes; a function of the config only."""
    k = config.kernel_size
    enc, skip, dec = config.encoder_channels, config.skip_channels, config.decoder_channels
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    prev = config.input_channels
    for i in range(config.encoder_units):
        shapes[f"encoder.{i}.conv.weight"] = (enc, prev, k, k)
        shapes[f"encoder.{i}.bn.gamma"] = (enc,)
        shapes[f"encoder.{i}.bn.beta"] = (enc,)
        prev = enc
    for i in range(config.encoder_units):
        shapes[f"skip.{i}.conv.weight"] = (skip, enc, 1, 1)
        shapes[f"skip.{i}.bn.gamma"] = (skip,)
        shapes[f"skip.{i}.bn.beta"] = (skip,)
    for i in range(config.decoder_units):
        shapes[f"decoder.{i}.conv1.weight"] = (dec, dec, k, k)
        shapes[f"decoder.{i}.bn1.gamma"] = (dec,)
        shapes[f"decoder.{i}.bn1.beta"] = (dec,)
        shapes[f"decoder.{i}.conv2.weight"] = (enc, dec, 1, 1)
        shapes[f"decoder.{i}.bn2.gamma"] = (enc,)
        shapes[f"decoder.{i}.bn2.beta"] = (enc,)
    shapes["output.conv.weight"] = (1, enc, 1, 1)
    shapes["output.conv.bias"] = (1,)
    return shapes


class NetworkWeights:
    """Ordered, named parameter set of the network (the optimisation variable)."""

    def __init__(self, config: NetworkConfig, params: "OrderedDict[str, GradTensor]"):
        expected = parameter_shapes(config)
        if list(params.keys()) != list(expected.keys()):
            raise ShapeError("parameter names do not match the network config")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> GradTensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def keys(self) -> List[str]:
        return list(self.params.keys())

    def items(self):
        return self.params.items()

    @property
    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.values) for k, p in self.params.items())

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict(
            (k, p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in self.params.items()
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "NetworkWeights":
        return NetworkWeights.from_arrays(self.config, self.arrays())

    @classmethod
    def from_arrays(cls, config: NetworkConfig, arrays: Dict[str, np.ndarray]) -> "NetworkWeights":
        params = OrderedDict((name, T.parameter(arrays[name])) for name in parameter_shapes(config))
        return cls(config, params)

    def equals(self, other: "NetworkWeights") -> bool:
        if self.config != other.config or self.keys() != other.keys():
            return False
        return all(np.array_equal(self[k].values, other[k].values) for k in self.keys())


@dataclass
class SeedImage:
    values: np.ndarray
    distribution: str
    seed: int

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def as_tensor(self) -> GradTensor:
        return GradTensor(self.values)


def make_seed_image(height: int, width: int, seed: int, channels: int = 1, amplitude: float = 0.1) -> SeedImage:
    rng = np.random.default_rng(seed)
    values = rng.uniform(0.0, amplitude, size=(channels, height, width))
    return SeedImage(values=values, distribution=f"uniform(0,{amplitude})", seed=seed)


def build_network(config: NetworkConfig, seed: int) -> NetworkWeights:
    """Random initialisation: uniform Kaiming fan-in scaling, BN gamma=1 / beta=0."""
    rng = np.random.default_rng(seed)
    relu_gain = np.sqrt(2.0 / (1.0 + config.leaky_slope ** 2))
    params: "OrderedDict[str, GradTensor]" = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".gamma"):
            values = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            gain = 1.0 if name.startswith("output.") else relu_gain
            bound = gain * np.sqrt(3.0 / fan_in)
            values = rng.uniform(-bound, bound, size=shape)
        params[name] = T.parameter(values)
    weights = NetworkWeights(config, params)
    logger.debug("Built network with %d parameters (seed %s)", weights.n_parameters, seed)
    return weights


def _conv_bn_act(x: GradTensor, weights: NetworkWeights, prefix: str, conv: str, bn: str, stride: int = 1) -> GradTensor:
    cfg = weights.config
    kernel = weights[f"{prefix}.{conv}.weight"]
    pad = kernel.shape[-1] // 2
    y = T.conv2d(x, kernel, stride=stride, padding=pad)
    y = T.batch_norm(y, weights[f"{prefix}.{bn}.gamma"], weights[f"{prefix}.{bn}.beta"], cfg.bn_eps)
    return T.leaky_relu(y, cfg.leaky_slope)


def forward(weights: NetworkWeights, z: Union[SeedImage, GradTensor, np.ndarray], ablate_skips: Iterable[int] = ()) -> GradTensor:
    """f_θ(z): single-channel output in (0,1) with z's spatial size."""
    cfg = weights.config
    x = z.as_tensor() if isinstance(z, SeedImage) else T.as_tensor(z)
    if x.ndim != 3 or x.shape[0] != cfg.input_channels:
        raise ShapeError(f"z must have shape [{cfg.input_channels},H,W], got {x.shape}")
    _, h, w = x.shape
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeError(f"z spatial size {h}x{w} is not divisible by {cfg.divisor}")
    ablated = set(ablate_skips)

    encoded: List[GradTensor] = []
    for i in range(cfg.encoder_units):
        x = _conv_bn_act(x, weights, f"encoder.{i}", "conv", "bn", stride=2)
        encoded.append(x)

    skips: List[GradTensor] = []
    for i, e in enumerate(encoded):
        s = _conv_bn_act(e, weights, f"skip.{i}", "conv", "bn")
        if i in ablated:
            s = T.scale_channels(s, np.zeros(cfg.skip_channels))
        skips.append(s)

    y = encoded[-1]
    for i in reversed(range(cfg.decoder_units)):
        y = T.concat([y, skips[i]], axis=0)
        y = _conv_bn_act(y, weights, f"decoder.{i}", "conv1", "bn1")
        y = _conv_bn_act(y, weights, f"decoder.{i}", "conv2", "bn2")
        y = T.lanczos_resample(y, 2, cfg.lanczos_order)

    y = T.conv2d(y, weights["output.conv.weight"])
    y = T.add(y, T.mul(weights["output.conv.bias"], np.ones((1, 1, 1))))
    return T.sigmoid(y)


# Checkpoint container
#
#   offset 0   8 bytes   magic  b"CTSRNET\0"
#   offset 8   uint16    format version (little endian)
#   offset 10  uint32    header length N
#   offset 14  N bytes   UTF-8 JSON: {"config": {...}, "tensors": [{"name", "shape"}, ...]}
#   then       float64 little-endian values of each tensor, row-major, in header order

def save_checkpoint(weights: NetworkWeights, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "config": asdict(weights.config),
        "tensors": [{"name": k, "shape": list(p.shape)} for k, p in weights.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for p in weights.params.values():
            f.write(p.values.astype("<f8").tobytes(order="C"))
    return path


def load_checkpoint(path: Union[str, Path]) -> NetworkWeights:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, header_len = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a network checkpoint")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = _HEADER.size
    header = json.loads(data[offset:offset + header_len].decode("utf-8"))
    offset += header_len
    config = NetworkConfig.from_dict(header["config"])
    arrays: Dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise FormatError(f"{path}: truncated tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset = end
    return NetworkWeights.from_arrays(config, arrays)
