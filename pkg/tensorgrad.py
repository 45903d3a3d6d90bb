"""Dense tensors with reverse-mode differentiation.

Every layer MicroAttNet uses lives here, together with the focal loss, the
Adam optimizer, a finite-difference gradient checker and the MATN checkpoint
container. Arrays are numpy float32 for training and float64 for
verification.

Convolution uses the cross-correlation convention: the kernel is applied as
stored, without flipping.
"""
import json
import logging
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigurationError,
    DataError,
    DimensionError,
    NumericError,
    UsageError,
)

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1

MAGIC = b"MATN"
FORMAT_VERSION = 1

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}
_TAG_DTYPES = {tag: dtype for dtype, tag in _DTYPE_TAGS.items()}

_grad_mode = threading.local()


def resolve_dtype(precision: str) -> np.dtype:
    """Map a precision name ("f32" or "f64") to a numpy dtype."""
    try:
        return np.dtype(_PRECISIONS[precision])
    except KeyError:
        raise ConfigurationError(f"Unknown precision '{precision}', expected one of {sorted(_PRECISIONS)}")


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Run operations without recording a graph."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


class Tensor:
    """An array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        array = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float32)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op: Optional[str] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError("non-finite values", where=op)
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, finished = stack.pop()
        if finished:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf's .grad, then free the graph."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward called on a tensor that is detached from any graph")

    order = _topological_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._backward is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
            node.requires_grad = False


# Elementwise and structural helpers

def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)

    def backward_fn(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result(a.data + b.data, (a, b), backward_fn, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", np.float32))
    b = _as_tensor(b, a.dtype)

    def backward_fn(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward_fn, "mul")


def tensor_sum(x: Tensor) -> Tensor:
    def backward_fn(grad):
        return (np.broadcast_to(grad, x.shape).copy(),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward_fn, "sum")


def tensor_mean(x: Tensor) -> Tensor:
    count = x.data.size

    def backward_fn(grad):
        return (np.broadcast_to(grad / count, x.shape).astype(x.dtype),)

    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,), backward_fn, "mean")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    def backward_fn(grad):
        return (grad.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), backward_fn, "reshape")


def flatten(x: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not tensors:
        raise UsageError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    boundaries = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}")

    def backward_fn(grad):
        return tuple(np.split(grad, boundaries, axis=axis))

    return _result(data, tuple(tensors), backward_fn, "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 1) -> Tensor:
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward_fn(grad):
        full = np.zeros_like(x.data)
        full[index] = grad
        return (full,)

    return _result(np.ascontiguousarray(x.data[index]), (x,), backward_fn, "slice")


# Layers

@dataclass
class LayerParams:
    """Weights and bias of a convolution or fully connected layer."""

    weight: Tensor
    bias: Optional[Tensor] = None

    def tensors(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class BatchNormParams:
    """Scale, shift and running statistics of a batch-normalization layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    @classmethod
    def create(cls, channels: int, dtype=np.float32, name: str = "bn") -> "BatchNormParams":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def tensors(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def conv2d(x: Tensor, params: LayerParams, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a (B, Cin, H, W) batch with (Cout, Cin, k, k) kernels."""
    weight, bias = params.weight, params.bias
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    out_channels, in_channels, kh, kw = weight.shape
    if x.shape[1] != in_channels:
        raise DimensionError(f"conv2d input has {x.shape[1]} channels, weight expects {in_channels}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extent must be odd, got {kh}x{kw}")
    if padding < 0 or stride < 1:
        raise ConfigurationError(f"conv2d needs padding >= 0 and stride >= 1, got {padding}, {stride}")
    if bias is not None and bias.shape != (out_channels,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {out_channels} outputs")

    height, width = x.shape[2], x.shape[3]
    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if padded.shape[2] < kh or padded.shape[3] < kw:
        raise DimensionError(f"conv2d input {x.shape} is smaller than the {kh}x{kw} kernel")

    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)

    def backward_fn(grad):
        grad_weight = np.tensordot(grad, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_windows = np.tensordot(grad, weight.data, axes=([1], [0]))
        grad_padded = np.zeros_like(padded)
        row_span = stride * (out_h - 1) + 1
        col_span = stride * (out_w - 1) + 1
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i:i + row_span:stride, j:j + col_span:stride] += (
                    grad_windows[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        grads = (np.ascontiguousarray(grad_x), grad_weight)
        if bias is not None:
            grads += (grad.sum(axis=(0, 2, 3)),)
        return grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _result(out, parents, backward_fn, "conv2d")


def batchnorm(x: Tensor, params: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalization over (B, H, W) for 4-D input, over B for 2-D input."""
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    channels = x.shape[1]
    if params.gamma.shape != (channels,):
        raise DimensionError(f"batchnorm has {params.gamma.shape[0]} channels, input has {channels}")
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    shape = (1, channels, 1, 1) if x.ndim == 4 else (1, channels)
    gamma = params.gamma.data.reshape(shape)
    beta = params.beta.data.reshape(shape)

    if training:
        if x.shape[0] < 2:
            raise ConfigurationError("batchnorm in train mode needs a batch of at least 2 samples")
        count = x.data.size // channels
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(shape)
        var = (centered * centered).mean(axis=axes)
        inv_std = (1.0 / np.sqrt(var + params.epsilon)).astype(x.dtype)
        xhat = centered * inv_std.reshape(shape)
        momentum = params.momentum
        params.running_mean[...] = (1 - momentum) * params.running_mean + momentum * mean
        params.running_var[...] = (1 - momentum) * params.running_var + momentum * var * count / (count - 1)

        def backward_fn(grad):
            grad_xhat = grad * gamma
            grad_x = (inv_std.reshape(shape) / count) * (
                count * grad_xhat
                - grad_xhat.sum(axis=axes, keepdims=True)
                - xhat * (grad_xhat * xhat).sum(axis=axes, keepdims=True)
            )
            return grad_x, (grad * xhat).sum(axis=axes), grad.sum(axis=axes)
    else:
        inv_std = (1.0 / np.sqrt(params.running_var + params.epsilon)).astype(x.dtype)
        xhat = (x.data - params.running_mean.reshape(shape)) * inv_std.reshape(shape)

        def backward_fn(grad):
            grad_x = grad * gamma * inv_std.reshape(shape)
            return grad_x, (grad * xhat).sum(axis=axes), grad.sum(axis=axes)

    out = (gamma * xhat + beta).astype(x.dtype)
    return _result(out, (x, params.gamma, params.beta), backward_fn, "batchnorm")


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0

    def backward_fn(grad):
        return (grad * positive,)

    return _result(np.where(positive, x.data, 0).astype(x.dtype), (x,), backward_fn, "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)

    def backward_fn(grad):
        return (grad * s * (1 - s),)

    return _result(s, (x,), backward_fn, "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction for stability."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(grad):
        return (s * (grad - (grad * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (x,), backward_fn, "softmax")


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "softmax_lastaxis": softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"Unknown activation '{kind}'")
    return fn(x)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties route the gradient to the first maximum."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2 expects 4-D input, got {x.shape}")
    batch, channels, height, width = x.shape
    if height % 2 or width % 2:
        raise DimensionError(f"maxpool2 needs even spatial extents, got {height}x{width}")
    windows = (
        x.data.reshape(batch, channels, height // 2, 2, width // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(batch, channels, height // 2, width // 2, 4)
    )
    winners = windows.argmax(axis=-1)[..., None]
    out = np.take_along_axis(windows, winners, axis=-1)[..., 0]

    def backward_fn(grad):
        grad_windows = np.zeros_like(windows)
        np.put_along_axis(grad_windows, winners, grad[..., None], axis=-1)
        grad_x = (
            grad_windows.reshape(batch, channels, height // 2, width // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(batch, channels, height, width)
        )
        return (grad_x,)

    return _result(np.ascontiguousarray(out), (x,), backward_fn, "maxpool2")


def dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; the identity in eval mode."""
    if not 0 <= p < 1:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise UsageError("dropout in train mode needs a seeded random generator")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) * np.asarray(1.0 / (1.0 - p), dtype=x.dtype)

    def backward_fn(grad):
        return (grad * mask,)

    return _result(x.data * mask, (x,), backward_fn, "dropout")


def linear(x: Tensor, params: LayerParams) -> Tensor:
    """x · Wᵀ + b for x of shape (B, N) and W of shape (M, N)."""
    weight, bias = params.weight, params.bias
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear cannot apply weight {weight.shape} to input {x.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward_fn(grad):
        grads = (grad @ weight.data, grad.T @ x.data)
        if bias is not None:
            grads += (grad.sum(axis=0),)
        return grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return _result(out, parents, backward_fn, "linear")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-D input, got {x.shape}")
    area = x.shape[2] * x.shape[3]

    def backward_fn(grad):
        return (np.broadcast_to((grad / area)[:, :, None, None], x.shape).astype(x.dtype),)

    return _result(x.data.mean(axis=(2, 3)), (x,), backward_fn, "global_avg_pool")


# Losses

def _check_targets(logits: Tensor, targets) -> np.ndarray:
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if t.shape != logits.shape:
        raise DimensionError(f"targets shape {t.shape} does not match logits {logits.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise DataError("targets must be binary (0 or 1)")
    return t.astype(logits.dtype)


def focal_loss(logits: Tensor, targets, gamma: float = 2.0) -> Tensor:
    """Per-class sigmoid focal loss averaged over batch and classes.

    Each element contributes y(1-p)^γ(-log p) + (1-y)p^γ(-log(1-p)) with
    p = sigmoid(logit) clamped to [1e-7, 1-1e-7]. With γ = 0 this is binary
    cross-entropy.
    """
    if not np.isfinite(gamma) or gamma < 0:
        raise ConfigurationError(f"focal loss gamma must be finite and >= 0, got {gamma}")
    t = _check_targets(logits, targets)
    raw = expit(logits.data)
    p = np.clip(raw, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = ((raw > PROB_CLAMP) & (raw < 1 - PROB_CLAMP)).astype(logits.dtype)
    positive_term = (1 - p) ** gamma * -np.log(p)
    negative_term = p ** gamma * -np.log(1 - p)
    elements = t * positive_term + (1 - t) * negative_term

    def backward_fn(grad):
        d_positive = gamma * p * (1 - p) ** gamma * np.log(p) - (1 - p) ** (gamma + 1)
        d_negative = -gamma * p ** gamma * (1 - p) * np.log(1 - p) + p ** (gamma + 1)
        d_logits = (t * d_positive + (1 - t) * d_negative) * inside / elements.size
        return ((grad * d_logits).astype(logits.dtype),)

    value = np.asarray(elements.mean(), dtype=logits.dtype)
    return _result(value, (logits,), backward_fn, "focal_loss")


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid binary cross-entropy with the same probability clamp as focal_loss."""
    t = _check_targets(logits, targets)
    raw = expit(logits.data)
    p = np.clip(raw, PROB_CLAMP, 1 - PROB_CLAMP)
    inside = ((raw > PROB_CLAMP) & (raw < 1 - PROB_CLAMP)).astype(logits.dtype)
    elements = -(t * np.log(p) + (1 - t) * np.log(1 - p))

    def backward_fn(grad):
        return ((grad * (p - t) * inside / elements.size).astype(logits.dtype),)

    value = np.asarray(elements.mean(), dtype=logits.dtype)
    return _result(value, (logits,), backward_fn, "binary_cross_entropy")


# Optimizer

@dataclass
class AdamState:
    """Moments and step count of Adam, one moment pair per parameter."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                   beta2: float = 0.999, eps_adam: float = 1e-8) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps_adam=eps_adam,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState) -> AdamState:
    """Apply one bias-corrected Adam update in place and return the advanced state."""
    if not (len(params) == len(grads) == len(state.first_moment) == len(state.second_moment)):
        raise DimensionError("adam_step needs one gradient and one moment pair per parameter")
    state.step_count += 1
    step = state.step_count
    correction1 = 1 - state.beta1 ** step
    correction2 = 1 - state.beta2 ** step
    for param, grad, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if grad is None:
            grad = np.zeros_like(param.data)
        if grad.shape != param.shape or m.shape != param.shape:
            raise DimensionError(f"adam_step shape mismatch for parameter {param.name or param.shape}")
        m *= state.beta1
        m += (1 - state.beta1) * grad
        v *= state.beta2
        v += (1 - state.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param.data -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps_adam)).astype(param.dtype)
    return state


class Adam:
    """Adam over a fixed list of parameters, reading their accumulated .grad."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps_adam: float = 1e-8, state: Optional[AdamState] = None):
        self.params = list(params)
        self.state = state or AdamState.zeros_like(self.params, lr, beta1, beta2, eps_adam)

    def zero_grad(self) -> None:
        for param in self.params:
            param.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)


# Verification

@dataclass
class GradcheckResult:
    max_rel_error: float
    worst_input: int = -1
    worst_index: tuple[int, ...] = ()
    checked: int = 0


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5,
              max_coords: Optional[int] = None, seed: int = 0, floor: float = 1e-8) -> GradcheckResult:
    """Compare analytic gradients of a scalar function with central differences.

    The relative error of each coordinate is |a - n| / max(|a|, |n|, floor).
    With max_coords set, that many coordinates per input are sampled with a
    seeded generator instead of checking all of them.
    """
    for tensor in inputs:
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.grad = None
        tensor.requires_grad = True
    out = fn(*inputs)
    if out.data.size != 1:
        raise UsageError(f"gradcheck needs a scalar-valued function, got shape {out.shape}")
    if out.requires_grad:
        backward(out)

    rng = np.random.default_rng(seed)
    result = GradcheckResult(max_rel_error=0.0)
    with no_grad():
        for k, tensor in enumerate(inputs):
            analytic = (tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)).reshape(-1)
            flat = tensor.data.reshape(-1)
            if max_coords is None or max_coords >= flat.size:
                indices = np.arange(flat.size)
            else:
                indices = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in indices:
                original = flat[i]
                flat[i] = original + eps
                upper = flat[i]
                f_plus = float(fn(*inputs).data)
                flat[i] = original - eps
                lower = flat[i]
                f_minus = float(fn(*inputs).data)
                flat[i] = original
                numeric = (f_plus - f_minus) / float(upper - lower)
                a = float(analytic[i])
                error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                result.checked += 1
                if error > result.max_rel_error:
                    result.max_rel_error = error
                    result.worst_input = k
                    result.worst_index = tuple(int(c) for c in np.unravel_index(i, tensor.shape))
    logger.debug(f"gradcheck: {result.checked} coordinates, max relative error {result.max_rel_error:.3e}")
    return result


# Checkpoint container

def save_blobs(path: Union[str, Path], header: dict, blobs: dict[str, np.ndarray]) -> None:
    """Write a MATN container: header JSON followed by named little-endian arrays."""
    path = Path(path)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(header_bytes)), header_bytes,
             struct.pack("<I", len(blobs))]
    for name, value in blobs.items():
        array = np.asarray(value)
        tag = _DTYPE_TAGS.get(np.dtype(array.dtype.type))
        if tag is None:
            raise UsageError(f"Cannot store blob '{name}' of dtype {array.dtype}")
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<H", len(name_bytes)))
        parts.append(name_bytes)
        parts.append(struct.pack("<BB", tag, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def load_blobs(path: Union[str, Path]) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a MATN container written by save_blobs."""
    path = Path(path)
    raw = path.read_bytes()
    offset = 0

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(raw):
            raise CheckpointFormatError(f"{path}: truncated checkpoint")
        chunk = raw[offset:offset + count]
        offset += count
        return chunk

    if take(4) != MAGIC:
        raise CheckpointFormatError(f"{path}: not a MATN checkpoint (bad magic bytes)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(found=version, supported=FORMAT_VERSION)
    (header_length,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(take(header_length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path}: unreadable header: {e}")
    (count,) = struct.unpack("<I", take(4))

    blobs: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = struct.unpack("<H", take(2))
        name = take(name_length).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2))
        if tag not in _TAG_DTYPES:
            raise CheckpointFormatError(f"{path}: unknown dtype tag {tag} for '{name}'")
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        dtype = _TAG_DTYPES[tag]
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(size * dtype.itemsize), dtype=dtype.newbyteorder("<"))
        blobs[name] = values.astype(dtype).reshape(shape)
    return header, blobs
