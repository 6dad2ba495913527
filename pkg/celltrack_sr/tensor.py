"""Dense double-precision tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a ``GradTensor`` whose ``record`` holds
the op kind, its inputs and a closure mapping the output gradient to input
gradients. ``backward`` linearises the graph into a ``ComputationTape`` (a
topologically ordered list of records) and replays it in reverse.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

_node_ids = itertools.count(1)

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

DEFAULT_LANCZOS_ORDER = 3
DEFAULT_LEAKY_SLOPE = 0.1
DEFAULT_BN_EPS = 1e-5


@dataclass
class OpRecord:
    kind: str
    inputs: Tuple["GradTensor", ...]
    output_id: int
    backward_fn: BackwardFn
    saved: Dict[str, object] = field(default_factory=dict)

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.node_id for t in self.inputs)


class GradTensor:
    __slots__ = ("values", "grad", "requires_grad", "node_id", "record")

    def __init__(self, values, requires_grad: bool = False, record: Optional[OpRecord] = None):
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self.record = record

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return int(self.values.size)

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, GradTensor):
            raise ParameterError("division is only defined by a constant")
        return mul(self, 1.0 / float(other))

    def __repr__(self) -> str:
        kind = self.record.kind if self.record else "leaf"
        return f"GradTensor(shape={self.shape}, op={kind}, requires_grad={self.requires_grad})"


def as_tensor(value) -> GradTensor:
    if isinstance(value, GradTensor):
        return value
    return GradTensor(np.asarray(value, dtype=np.float64))


def parameter(values) -> GradTensor:
    return GradTensor(np.array(values, dtype=np.float64, copy=True), requires_grad=True)


def _make(values: np.ndarray, kind: str, inputs: Sequence[GradTensor], backward_fn: BackwardFn, **saved) -> GradTensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = GradTensor(values, requires_grad=requires_grad)
    if requires_grad:
        out.record = OpRecord(kind, tuple(inputs), out.node_id, backward_fn, dict(saved))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# Elementwise algebra

def add(a, b) -> GradTensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.values + b.values, "add", (a, b), backward)


def sub(a, b) -> GradTensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.values - b.values, "sub", (a, b), backward)


def mul(a, b) -> GradTensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _make(a.values * b.values, "mul", (a, b), backward)


def square(x: GradTensor) -> GradTensor:
    def backward(g):
        return (2.0 * x.values * g,)

    return _make(x.values * x.values, "square", (x,), backward)


def sqrt(x: GradTensor) -> GradTensor:
    out = np.sqrt(x.values)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g * 0.5 / out,)

    return _make(out, "sqrt", (x,), backward)


def reduce_sum(x: GradTensor) -> GradTensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.values.sum()), "reduce_sum", (x,), backward)


def mean(x: GradTensor) -> GradTensor:
    n = x.size

    def backward(g):
        return (np.full(x.shape, float(g) / n),)

    return _make(np.asarray(x.values.mean()), "mean", (x,), backward)


def concat(tensors: Sequence[GradTensor], axis: int = 0) -> GradTensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(values, "concat", tensors, backward)


def scale_channels(x: GradTensor, mask) -> GradTensor:
    """Multiply each channel by a constant factor (used to ablate branches)."""
    factors = np.asarray(mask, dtype=np.float64).reshape(-1, *([1] * (x.ndim - 1)))
    return mul(x, factors)


def forward_diff(u: GradTensor, axis: int) -> GradTensor:
    """First-order forward difference with replicate boundary (last difference is 0)."""
    n = u.shape[axis]
    if n < 2:
        raise ShapeError(f"forward difference needs at least 2 samples along axis {axis}")
    d = np.diff(u.values, axis=axis)
    pad = [(0, 0)] * u.ndim
    pad[axis] = (0, 1)
    out = np.pad(d, pad)

    def backward(g):
        inner = np.take(g, np.arange(n - 1), axis=axis)
        gu = np.zeros(u.shape)
        lo = [slice(None)] * u.ndim
        hi = [slice(None)] * u.ndim
        lo[axis] = slice(0, n - 1)
        hi[axis] = slice(1, n)
        gu[tuple(lo)] -= inner
        gu[tuple(hi)] += inner
        return (gu,)

    return _make(out, "forward_diff", (u,), backward, axis=axis)


# Network layers

def conv2d(x: GradTensor, kernel: GradTensor, stride: int = 1, padding: int = 0) -> GradTensor:
    """Cross-correlation (no kernel flip) of a [C_in,H,W] input with a [C_out,C_in,k,k] kernel."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] and [O,C,k,k], got {x.shape} and {kernel.shape}")
    c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"input has {c_in} channels but kernel expects {k_in}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"invalid stride={stride} / padding={padding}")
    k = kh
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, k={k}, stride={stride}")

    xp = np.pad(x.values, ((0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :h_out, :w_out]
    cols = np.ascontiguousarray(windows.transpose(0, 3, 4, 1, 2)).reshape(c_in * k * k, h_out * w_out)
    w2 = kernel.values.reshape(c_out, -1)
    out = (w2 @ cols).reshape(c_out, h_out, w_out)

    def backward(g):
        g2 = g.reshape(c_out, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c_in, k, k, h_out, w_out)
            gxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += gcols[:, i, j]
            gx = gxp[:, padding:padding + h, padding:padding + w]
        return gx, gk

    return _make(out, "conv2d", (x, kernel), backward, stride=stride, padding=padding)


def batch_norm(x: GradTensor, gamma: GradTensor, beta: GradTensor, eps: float = DEFAULT_BN_EPS) -> GradTensor:
    """Per-instance normalisation over each channel's H×W values."""
    if eps <= 0:
        raise ParameterError(f"batch_norm eps must be positive, got {eps}")
    if x.ndim != 3:
        raise ShapeError(f"batch_norm expects [C,H,W], got {x.shape}")
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must have shape ({c},), got {gamma.shape} / {beta.shape}")
    n = x.shape[1] * x.shape[2]
    mu = x.values.mean(axis=(1, 2), keepdims=True)
    var = x.values.var(axis=(1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mu) * inv
    g3 = gamma.values[:, None, None]
    out = g3 * xhat + beta.values[:, None, None]

    def backward(g):
        dgamma = (g * xhat).sum(axis=(1, 2))
        dbeta = g.sum(axis=(1, 2))
        dxhat = g * g3
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=(1, 2), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
        )
        return dx, dgamma, dbeta

    return _make(out, "batch_norm", (x, gamma, beta), backward, eps=eps)


def leaky_relu(x: GradTensor, slope: float = DEFAULT_LEAKY_SLOPE) -> GradTensor:
    if not 0.0 < slope < 1.0:
        raise ParameterError(f"leaky-relu slope must lie in (0,1), got {slope}")
    positive = x.values > 0
    out = np.where(positive, x.values, slope * x.values)

    def backward(g):
        return (np.where(positive, g, slope * g),)

    return _make(out, "leaky_relu", (x,), backward, slope=slope)


def sigmoid(x: GradTensor) -> GradTensor:
    out = expit(x.values)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _make(out, "sigmoid", (x,), backward)


def activation(x: GradTensor, kind: str, slope: float = DEFAULT_LEAKY_SLOPE) -> GradTensor:
    if kind == "leaky-relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ParameterError(f"unknown activation {kind!r}")


# Resampling

def lanczos_kernel(x, a: int = DEFAULT_LANCZOS_ORDER) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.sinc(x) * np.sinc(x / a)
    out[np.abs(x) >= a] = 0.0
    # exact zeros at the non-zero integers
    out[(x != 0) & (x == np.round(x))] = 0.0
    return out


def cubic_kernel(x, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel (a = -0.5 is Catmull-Rom)."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    near = x <= 1
    far = (x > 1) & (x < 2)
    out[near] = (a + 2) * x[near] ** 3 - (a + 3) * x[near] ** 2 + 1
    out[far] = a * x[far] ** 3 - 5 * a * x[far] ** 2 + 8 * a * x[far] - 4 * a
    return out


def kernel_matrix(n_in: int, n_out: int, kernel: Callable[[np.ndarray], np.ndarray], support: float, antialias: bool = True) -> np.ndarray:
    """Dense [n_out, n_in] interpolation matrix with per-row weight normalisation.

    Output sample i sits at input coordinate (i + 0.5)·n_in/n_out − 0.5 (pixel
    centres aligned). When shrinking and ``antialias`` is set the kernel is
    stretched by the inverse scale. Taps falling outside the input are dropped.
    """
    if n_in == n_out:
        return np.eye(n_in)
    scale = n_out / n_in
    kscale = min(1.0, scale) if antialias else 1.0
    radius = support / kscale
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    offsets = np.arange(-math.ceil(radius), math.ceil(radius) + 1)
    taps = np.floor(centers)[:, None].astype(np.int64) + offsets[None, :]
    weights = kernel((centers[:, None] - taps) * kscale)
    valid = (taps >= 0) & (taps < n_in)
    weights = np.where(valid, weights, 0.0)
    row_sums = weights.sum(axis=1, keepdims=True)
    weights = weights / row_sums
    matrix = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps.shape[1])
    np.add.at(matrix, (rows, np.clip(taps, 0, n_in - 1).reshape(-1)), weights.reshape(-1))
    return matrix


@lru_cache(maxsize=128)
def lanczos_matrix(n_in: int, n_out: int, a: int = DEFAULT_LANCZOS_ORDER) -> np.ndarray:
    matrix = kernel_matrix(n_in, n_out, lambda x: lanczos_kernel(x, a), float(a))
    matrix.setflags(write=False)
    return matrix


def scaled_size(n: int, factor) -> int:
    size = Fraction(n) * Fraction(factor).limit_denominator(1 << 16)
    if size.denominator != 1 or size < 1:
        raise ParameterError(f"size {n} times factor {factor} is not a positive integer")
    return int(size)


def lanczos_resample(x: GradTensor, factor, a: int = DEFAULT_LANCZOS_ORDER) -> GradTensor:
    """Separable Lanczos-a resampling of a [C,H,W] tensor by a rational factor."""
    if a < 1:
        raise ParameterError(f"Lanczos order must be positive, got {a}")
    if x.ndim != 3:
        raise ShapeError(f"lanczos_resample expects [C,H,W], got {x.shape}")
    _, h, w = x.shape
    ah = lanczos_matrix(h, scaled_size(h, factor), a)
    aw = lanczos_matrix(w, scaled_size(w, factor), a)
    out = ah @ x.values @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return _make(out, "lanczos_resample", (x,), backward, factor=str(factor), a=a)


# Reverse pass

class ComputationTape:
    """Topologically ordered op records reachable from a scalar root."""

    def __init__(self, root: GradTensor, nodes: List[GradTensor]):
        self.root = root
        self.nodes = nodes

    @property
    def records(self) -> List[OpRecord]:
        return [n.record for n in self.nodes if n.record is not None]

    @classmethod
    def from_root(cls, root: GradTensor) -> "ComputationTape":
        order: List[GradTensor] = []
        visited = set()
        stack: List[Tuple[GradTensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in visited:
                continue
            visited.add(node.node_id)
            stack.append((node, True))
            if node.record is not None:
                for inp in node.record.inputs:
                    if inp.requires_grad and inp.node_id not in visited:
                        stack.append((inp, False))
        return cls(root, order)

    def backward(self) -> None:
        grads: Dict[int, np.ndarray] = {self.root.node_id: np.ones(self.root.shape)}
        for node in reversed(self.nodes):
            g = grads.pop(node.node_id, None)
            if g is None:
                g = np.zeros(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node.record is None:
                continue
            for inp, ig in zip(node.record.inputs, node.record.backward_fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = ig if prev is None else prev + ig


def backward(root: GradTensor) -> ComputationTape:
    """Accumulate d(root)/dT into ``T.grad`` for every requires-grad tensor reachable from root."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    tape = ComputationTape.from_root(root)
    if not root.requires_grad:
        logger.debug("backward called on a root that does not require grad")
        return tape
    tape.backward()
    return tape
