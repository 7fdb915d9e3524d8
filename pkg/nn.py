"""
nn.py – DepthAug3D
3D CNN layer zoo with exact reverse-mode gradients, the five-member
architecture family and the binary checkpoint container.

Tensors are numpy arrays shaped (batch, channels, nx, ny, nz), row-major.

Architecture family:
    block i (i = 1..4): conv(8*i filters, 3x3x3, "same") + BN + activation,
    repeated 1 + insertion_counts[i] times, then pooling with size
    pooling_sizes[i]. Extra layers are dealt round-robin from block 1:
    depth 4 -> (0,0,0,0), 6 -> (1,1,0,0), 8 -> (1,1,1,1),
    10 -> (2,2,1,1), 12 -> (2,2,2,2).
    Flatten -> dropout(p) -> fully connected to 2 logits.

Checkpoint layout (little-endian):
    4s magic b'DACK', u32 version, u32 len + ArchitectureSpec JSON,
    u32 tensor count, per tensor: u16 name len, name, u8 ndim, u32 dims, f32 data;
    u8 optimizer flag, then (if set) u64 step and the moment tensors.
"""

import io
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import log_softmax, softmax

from errors import CheckpointMismatch, DegenerateBatch, InvalidSpec, MissingFile, ShapeMismatch, VolumeFormatError
from helpers import atomic_write_bytes

logger = logging.getLogger(__name__)

VALID_DEPTHS = (4, 6, 8, 10, 12)
KERNEL = 3

CHECKPOINT_MAGIC = b'DACK'
CHECKPOINT_VERSION = 1


# ── Convolution ───────────────────────────────────────────────────────────────

class ConvLayer:
    """3x3x3 "same" convolution (stride 1, zero padding 1)."""

    kind = 'conv'

    def __init__(self, weights: np.ndarray, bias: np.ndarray, name: str = 'conv'):
        weights = np.asarray(weights)
        if weights.ndim != 5 or weights.shape[2:] != (KERNEL, KERNEL, KERNEL):
            raise ShapeMismatch(f"Conv weights must be (out, in, 3, 3, 3), got {weights.shape}")
        if np.shape(bias) != (weights.shape[0],):
            raise ShapeMismatch(f"Conv bias must have {weights.shape[0]} entries, got {np.shape(bias)}")
        self.name = name
        self.weights = weights
        self.bias = np.asarray(bias, dtype=weights.dtype)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._x = None

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    def params(self) -> Dict[str, np.ndarray]:
        return {'weights': self.weights, 'bias': self.bias}

    def grads(self) -> Dict[str, np.ndarray]:
        return {'weights': self.grad_weights, 'bias': self.grad_bias}

    decay = ('weights',)

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        self._x = x
        return conv3d_forward(x, self)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad_x, self.grad_weights[...], self.grad_bias[...] = conv3d_backward(self._x, self, grad)
        return grad_x


def _check_conv_input(x: np.ndarray, layer: ConvLayer) -> None:
    if x.ndim != 5:
        raise ShapeMismatch(f"Expected a 5D batch, got shape {x.shape}")
    if x.shape[1] != layer.in_channels:
        raise ShapeMismatch(f"Input has {x.shape[1]} channels, layer expects {layer.in_channels}")


def conv3d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Stride-1 zero-padded cross-correlation; spatial dims are preserved."""
    _check_conv_input(x, layer)
    b, _, nx, ny, nz = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.empty((b, layer.out_channels, nx, ny, nz), dtype=np.result_type(x, layer.weights))
    out[...] = layer.bias[None, :, None, None, None]
    for dx, dy, dz in product(range(KERNEL), repeat=3):
        patch = xp[:, :, dx:dx + nx, dy:dy + ny, dz:dz + nz]
        # (b, x, y, z, out) -> (b, out, x, y, z)
        out += np.moveaxis(np.tensordot(patch, layer.weights[:, :, dx, dy, dz], axes=([1], [1])), -1, 1)
    return out


def conv3d_backward(x: np.ndarray, layer: ConvLayer,
                    grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of conv3d_forward w.r.t. input, weights and bias."""
    _check_conv_input(x, layer)
    b, _, nx, ny, nz = x.shape
    if grad_out.shape != (b, layer.out_channels, nx, ny, nz):
        raise ShapeMismatch(f"grad_out shape {grad_out.shape} does not match the forward output")

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    grad_xp = np.zeros_like(xp, dtype=np.result_type(x, grad_out))
    grad_w = np.zeros_like(layer.weights, dtype=np.result_type(layer.weights, grad_out))
    grad_b = grad_out.sum(axis=(0, 2, 3, 4))

    for dx, dy, dz in product(range(KERNEL), repeat=3):
        window = (slice(None), slice(None), slice(dx, dx + nx), slice(dy, dy + ny), slice(dz, dz + nz))
        grad_w[:, :, dx, dy, dz] = np.tensordot(grad_out, xp[window], axes=([0, 2, 3, 4], [0, 2, 3, 4]))
        grad_xp[window] += np.moveaxis(
            np.tensordot(grad_out, layer.weights[:, :, dx, dy, dz], axes=([1], [0])), -1, 1)

    return grad_xp[:, :, 1:-1, 1:-1, 1:-1], grad_w, grad_b


# ── Batch normalization ──────────────────────────────────────────────────────

class BatchNormLayer:
    """Per-channel batch normalization over (batch, x, y, z)."""

    kind = 'bn'
    decay = ()

    def __init__(self, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
                 dtype=np.float64, name: str = 'bn'):
        if not 0 < momentum <= 1:
            raise ValueError(f"momentum must be in (0, 1], got {momentum}")
        if not epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {epsilon}")
        self.name = name
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon
        self.grad_gamma = np.zeros_like(self.gamma)
        self.grad_beta = np.zeros_like(self.beta)
        self._cache = None

    def params(self) -> Dict[str, np.ndarray]:
        return {'gamma': self.gamma, 'beta': self.beta}

    def grads(self) -> Dict[str, np.ndarray]:
        return {'gamma': self.grad_gamma, 'beta': self.grad_beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {'running_mean': self.running_mean, 'running_var': self.running_var}

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        y, self._cache = batchnorm3d(x, self, mode)
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad_x, self.grad_gamma[...], self.grad_beta[...] = batchnorm3d_backward(self._cache, grad)
        return grad_x


_BN_AXES = (0, 2, 3, 4)


def _channel(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None, None]


def batchnorm3d(x: np.ndarray, layer: BatchNormLayer, mode: str) -> Tuple[np.ndarray, Tuple]:
    """
    Train mode normalizes with batch statistics and updates the running
    statistics (running_var tracks the unbiased batch variance); infer mode
    uses the running statistics.

    Raises:
        DegenerateBatch: Fewer than 2 values per channel in train mode, or a
                         channel whose variance vanishes inside the epsilon
                         guard (var + eps == eps, e.g. a constant channel).
    """
    if x.ndim != 5 or x.shape[1] != layer.gamma.shape[0]:
        raise ShapeMismatch(f"BatchNorm expects (b, {layer.gamma.shape[0]}, x, y, z), got {x.shape}")

    if mode == 'train':
        count = x.size // x.shape[1]
        if count < 2:
            raise DegenerateBatch(f"BatchNorm needs at least 2 values per channel, got {count}")
        mean = x.mean(axis=_BN_AXES)
        var = x.var(axis=_BN_AXES)
        guard = var + layer.epsilon
        if not np.all(np.isfinite(guard)) or np.any(guard == layer.epsilon):
            raise DegenerateBatch(f"BatchNorm variance underflows the epsilon guard in channel(s) "
                                  f"{np.flatnonzero(guard == layer.epsilon).tolist()}")
        m = layer.momentum
        layer.running_mean[...] = (1 - m) * layer.running_mean + m * mean
        layer.running_var[...] = (1 - m) * layer.running_var + m * var * count / (count - 1)
    elif mode == 'infer':
        mean, var = layer.running_mean, layer.running_var
    else:
        raise ValueError(f"mode must be 'train' or 'infer', got '{mode}'")

    inv_std = 1.0 / np.sqrt(var + layer.epsilon)
    x_hat = (x - _channel(mean)) * _channel(inv_std)
    y = _channel(layer.gamma) * x_hat + _channel(layer.beta)
    return y, (mode, x_hat, inv_std, layer.gamma)


def batchnorm3d_backward(cache: Tuple, grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mode, x_hat, inv_std, gamma = cache
    grad_gamma = (grad * x_hat).sum(axis=_BN_AXES)
    grad_beta = grad.sum(axis=_BN_AXES)
    g_hat = grad * _channel(gamma)
    if mode == 'infer':
        return g_hat * _channel(inv_std), grad_gamma, grad_beta

    count = grad.size // grad.shape[1]
    grad_x = _channel(inv_std / count) * (
        count * g_hat
        - _channel(g_hat.sum(axis=_BN_AXES))
        - x_hat * _channel((g_hat * x_hat).sum(axis=_BN_AXES))
    )
    return grad_x, grad_gamma, grad_beta


# ── Activation ────────────────────────────────────────────────────────────────

class Activation:
    kind = 'act'
    decay = ()

    def __init__(self, function: str = 'relu', name: str = 'act'):
        if function not in ('relu', 'identity'):
            raise InvalidSpec(f"Unknown activation '{function}'")
        self.name = name
        self.function = function
        self._mask = None

    def params(self):
        return {}

    def grads(self):
        return {}

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        if self.function == 'identity':
            return x
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self.function == 'identity':
            return grad
        return grad * self._mask


# ── Pooling ───────────────────────────────────────────────────────────────────

def _window(size, dims: Sequence[int]) -> Tuple[int, int, int]:
    """Cubic window clipped per axis to the current extent."""
    sizes = (size, size, size) if np.isscalar(size) else tuple(size)
    if len(sizes) != 3 or min(sizes) < 1:
        raise ValueError(f"Pooling size must be >= 1, got {size}")
    return tuple(min(int(s), int(n)) for s, n in zip(sizes, dims))


def _blocks(x: np.ndarray, window: Tuple[int, int, int]) -> np.ndarray:
    b, c, nx, ny, nz = x.shape
    wx, wy, wz = window
    ox, oy, oz = nx // wx, ny // wy, nz // wz
    cropped = x[:, :, :ox * wx, :oy * wy, :oz * wz]
    return (cropped.reshape(b, c, ox, wx, oy, wy, oz, wz)
            .transpose(0, 1, 2, 4, 6, 3, 5, 7)
            .reshape(b, c, ox, oy, oz, wx * wy * wz))


def _unblocks(blocks: np.ndarray, in_shape: Tuple[int, ...], window: Tuple[int, int, int]) -> np.ndarray:
    b, c, ox, oy, oz, _ = blocks.shape
    wx, wy, wz = window
    full = (blocks.reshape(b, c, ox, oy, oz, wx, wy, wz)
            .transpose(0, 1, 2, 5, 3, 6, 4, 7)
            .reshape(b, c, ox * wx, oy * wy, oz * wz))
    out = np.zeros(in_shape, dtype=blocks.dtype)
    out[:, :, :ox * wx, :oy * wy, :oz * wz] = full
    return out


def maxpool3d(x: np.ndarray, size) -> Tuple[np.ndarray, Tuple]:
    """
    Non-overlapping max pooling, stride == size, floor division for output
    dims (trailing partial windows dropped).
    """
    window = _window(size, x.shape[2:])
    blocks = _blocks(x, window)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, ('max', x.shape, window, idx)


def meanpool3d(x: np.ndarray, size) -> Tuple[np.ndarray, Tuple]:
    window = _window(size, x.shape[2:])
    return _blocks(x, window).mean(axis=-1), ('mean', x.shape, window, None)


def pool3d_backward(cache: Tuple, grad: np.ndarray) -> np.ndarray:
    """Route gradients to the argmax (max) or spread them evenly (mean)."""
    how, in_shape, window, idx = cache
    volume = window[0] * window[1] * window[2]
    if how == 'max':
        blocks = np.zeros(grad.shape + (volume,), dtype=grad.dtype)
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
    else:
        blocks = np.repeat(grad[..., None] / volume, volume, axis=-1)
    return _unblocks(blocks, in_shape, window)


class PoolLayer:
    kind = 'pool'
    decay = ()

    def __init__(self, size: int, how: str = 'max', name: str = 'pool'):
        if how not in ('max', 'mean'):
            raise InvalidSpec(f"Unknown pooling type '{how}'")
        self.name = name
        self.size = size
        self.how = how
        self._cache = None

    def params(self):
        return {}

    def grads(self):
        return {}

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        fn = maxpool3d if self.how == 'max' else meanpool3d
        y, self._cache = fn(x, self.size)
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return pool3d_backward(self._cache, grad)


# ── Flatten / dropout / fully connected ──────────────────────────────────────

class Flatten:
    kind = 'flatten'
    decay = ()

    def __init__(self, name: str = 'flatten'):
        self.name = name
        self._shape = None

    def params(self):
        return {}

    def grads(self):
        return {}

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self._shape)


def dropout(x: np.ndarray, p: float, mode: str, rng) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Inverted dropout: in train mode each element is zeroed with probability
    *p* and survivors are scaled by 1/(1-p). Infer mode and p == 0 pass the
    input through untouched.
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout p must be in [0, 1), got {p}")
    if mode not in ('train', 'infer'):
        raise ValueError(f"mode must be 'train' or 'infer', got '{mode}'")
    if p == 0 or mode == 'infer':
        return x, None
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


class DropoutLayer:
    kind = 'dropout'
    decay = ()

    def __init__(self, p: float, name: str = 'dropout'):
        self.name = name
        self.p = p
        self.rng = None
        self._mask = None

    def params(self):
        return {}

    def grads(self):
        return {}

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        y, self._mask = dropout(x, self.p, mode, self.rng)
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad if self._mask is None else grad * self._mask


def fully_connected(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map features (b, F) -> logits (b, K); weights are (F, K)."""
    if x.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeMismatch(f"Features {x.shape} do not match FC weights {weights.shape}")
    return x @ weights + bias


def fully_connected_backward(x: np.ndarray, weights: np.ndarray,
                             grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if grad.shape != (x.shape[0], weights.shape[1]):
        raise ShapeMismatch(f"grad shape {grad.shape} does not match FC output")
    return grad @ weights.T, x.T @ grad, grad.sum(axis=0)


class DenseLayer:
    kind = 'fc'
    decay = ('weights',)

    def __init__(self, weights: np.ndarray, bias: np.ndarray, name: str = 'fc'):
        self.name = name
        self.weights = weights
        self.bias = bias
        self.grad_weights = np.zeros_like(weights)
        self.grad_bias = np.zeros_like(bias)
        self._x = None

    def params(self) -> Dict[str, np.ndarray]:
        return {'weights': self.weights, 'bias': self.bias}

    def grads(self) -> Dict[str, np.ndarray]:
        return {'weights': self.grad_weights, 'bias': self.grad_bias}

    def forward(self, x: np.ndarray, mode: str) -> np.ndarray:
        self._x = x
        return fully_connected(x, self.weights, self.bias)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        grad_x, self.grad_weights[...], self.grad_bias[...] = fully_connected_backward(self._x, self.weights, grad)
        return grad_x


# ── Loss ──────────────────────────────────────────────────────────────────────

def softmax_crossentropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy of a batch of logits (b, K) against integer labels,
    in log-sum-exp form. A single logit vector is treated as a batch of one.

    Returns:
        (loss, grad_logits) with grad = (softmax - one_hot) / b.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    if single:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape[0] != logits.shape[0]:
        raise ShapeMismatch(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")

    rows = np.arange(logits.shape[0])
    log_p = log_softmax(logits, axis=1)
    loss = float(-log_p[rows, labels].mean())
    grad = softmax(logits, axis=1)
    grad[rows, labels] -= 1.0
    grad /= logits.shape[0]
    return loss, (grad[0] if single else grad)


# ── Architecture ─────────────────────────────────────────────────────────────

def insertion_schedule(total_conv_layers: int, blocks: int = 4) -> Tuple[int, ...]:
    """Extra layers per block, dealt round-robin from block 1."""
    extra = total_conv_layers - blocks
    if extra < 0:
        raise InvalidSpec(f"Need at least {blocks} conv layers, got {total_conv_layers}")
    return tuple(extra // blocks + (1 if i < extra % blocks else 0) for i in range(blocks))


def pooled_dims(input_dims: Sequence[int], pooling_sizes: Sequence[int]) -> List[Tuple[int, int, int]]:
    """Spatial dims after each pooling stage (clipped windows, floor division)."""
    dims = tuple(int(n) for n in input_dims)
    chain = []
    for size in pooling_sizes:
        window = _window(size, dims)
        dims = tuple(n // w for n, w in zip(dims, window))
        chain.append(dims)
    return chain


@dataclass(frozen=True)
class ArchitectureSpec:
    total_conv_layers: int = 4
    input_dims: Tuple[int, int, int] = (96, 96, 73)
    in_channels: int = 1
    filter_step: int = 8
    pooling_sizes: Tuple[int, ...] = (4, 3, 2, 2)
    dropout_p: float = 0.0
    num_classes: int = 2
    activation: str = 'relu'
    pooling: str = 'max'
    bn_momentum: float = 0.1
    bn_epsilon: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, 'input_dims', tuple(int(n) for n in self.input_dims))
        object.__setattr__(self, 'pooling_sizes', tuple(int(n) for n in self.pooling_sizes))

    @property
    def insertion_counts(self) -> Tuple[int, ...]:
        return insertion_schedule(self.total_conv_layers, len(self.pooling_sizes))

    def filters(self, block: int) -> int:
        """Filters of 1-based block *block*."""
        return self.filter_step * block

    def validate(self) -> None:
        if self.total_conv_layers not in VALID_DEPTHS:
            raise InvalidSpec(f"total_conv_layers must be one of {VALID_DEPTHS}, got {self.total_conv_layers}")
        if len(self.pooling_sizes) != 4 or min(self.pooling_sizes) < 1:
            raise InvalidSpec(f"pooling_sizes must be 4 positive sizes, got {self.pooling_sizes}")
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise InvalidSpec(f"input_dims must be 3 positive ints, got {self.input_dims}")
        if not 0 <= self.dropout_p <= 0.5:
            raise InvalidSpec(f"dropout_p must be in [0, 0.5], got {self.dropout_p}")
        if self.num_classes != 2:
            raise InvalidSpec(f"num_classes must be 2, got {self.num_classes}")
        if sum(self.insertion_counts) + 4 != self.total_conv_layers:
            raise InvalidSpec("insertion counts do not add up to the requested depth")

    @property
    def fc_inputs(self) -> int:
        final = pooled_dims(self.input_dims, self.pooling_sizes)[-1]
        return self.filters(len(self.pooling_sizes)) * int(np.prod(final))

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['input_dims'] = list(self.input_dims)
        data['pooling_sizes'] = list(self.pooling_sizes)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ArchitectureSpec':
        try:
            return cls(**data)
        except TypeError as e:
            raise InvalidSpec(f"Bad architecture spec: {e}")


# ── Model ─────────────────────────────────────────────────────────────────────

class Model:
    """Ordered layer chain with a per-layer addressable parameter store."""

    def __init__(self, layers: Sequence[Any] = (), spec: Optional[ArchitectureSpec] = None, rng=None):
        self.layers = list(layers)
        self.spec = spec
        self.rng = rng
        for layer in self.layers:
            if isinstance(layer, DropoutLayer):
                layer.rng = rng

    def set_rng(self, rng) -> None:
        """Stream used by dropout in train mode."""
        self.rng = rng
        for layer in self.layers:
            if isinstance(layer, DropoutLayer):
                layer.rng = rng

    @property
    def conv_layers(self) -> List[ConvLayer]:
        return [l for l in self.layers if isinstance(l, ConvLayer)]

    def parameters(self) -> 'OrderedDict[str, np.ndarray]':
        out = OrderedDict()
        for layer in self.layers:
            for key, value in layer.params().items():
                out[f"{layer.name}.{key}"] = value
        return out

    def gradients(self) -> 'OrderedDict[str, np.ndarray]':
        out = OrderedDict()
        for layer in self.layers:
            for key, value in layer.grads().items():
                out[f"{layer.name}.{key}"] = value
        return out

    def buffers(self) -> 'OrderedDict[str, np.ndarray]':
        out = OrderedDict()
        for layer in self.layers:
            if isinstance(layer, BatchNormLayer):
                for key, value in layer.buffers().items():
                    out[f"{layer.name}.{key}"] = value
        return out

    def decay_names(self) -> List[str]:
        """Multiplicative weights subject to the l2 penalty (conv and FC)."""
        return [f"{layer.name}.{key}" for layer in self.layers for key in layer.decay]

    def state_dict(self) -> 'OrderedDict[str, np.ndarray]':
        state = OrderedDict((k, v.copy()) for k, v in self.parameters().items())
        state.update((k, v.copy()) for k, v in self.buffers().items())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        targets = OrderedDict(self.parameters())
        targets.update(self.buffers())
        if set(targets) != set(state):
            missing = sorted(set(targets) ^ set(state))
            raise CheckpointMismatch(f"State keys differ from model: {missing[:5]}")
        for key, target in targets.items():
            value = np.asarray(state[key])
            if value.shape != target.shape:
                raise CheckpointMismatch(f"Shape of '{key}' is {value.shape}, model expects {target.shape}")
            target[...] = value

    def zero_grad(self) -> None:
        for grad in self.gradients().values():
            grad[...] = 0

    def forward(self, batch: np.ndarray, mode: str = 'infer') -> Tuple[np.ndarray, List[np.ndarray]]:
        """
        Run the chain. Returns logits (b, 2) and one flattened embedding
        (b, features) per conv layer, taken after its activation.
        """
        if mode not in ('train', 'infer'):
            raise ValueError(f"mode must be 'train' or 'infer', got '{mode}'")
        if self.spec is not None:
            expected = (self.spec.in_channels,) + self.spec.input_dims
            if batch.ndim != 5 or batch.shape[1:] != expected:
                raise ShapeMismatch(f"Batch shape {batch.shape} does not match (b, {expected})")

        embeddings = []
        x = batch
        pending = False
        for layer in self.layers:
            x = layer.forward(x, mode)
            if isinstance(layer, ConvLayer):
                pending = True
            elif isinstance(layer, Activation) and pending:
                embeddings.append(x.reshape(x.shape[0], -1))
                pending = False
        return x, embeddings

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        grad = grad_logits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


def forward(model: Model, batch: np.ndarray, mode: str = 'infer') -> Tuple[np.ndarray, List[np.ndarray]]:
    return model.forward(batch, mode)


def _uniform(rng, bound: float, shape: Tuple[int, ...], dtype) -> np.ndarray:
    return np.asarray(rng.uniform(-bound, bound, shape), dtype=dtype)


def build_model(spec: ArchitectureSpec, rng, dtype=np.float64) -> Model:
    """
    Build one member of the architecture family.

    Weights are drawn from the seeded stream with a fan-in-scaled uniform
    scheme: conv U(±sqrt(6 / fan_in)), FC U(±sqrt(1 / fan_in)); biases and
    BN beta start at 0, BN gamma at 1.

    Raises:
        InvalidSpec: If *spec* violates the family rules.
    """
    spec.validate()
    layers: List[Any] = []
    in_ch = spec.in_channels
    conv_no = 0

    for block, (size, extra) in enumerate(zip(spec.pooling_sizes, spec.insertion_counts), start=1):
        out_ch = spec.filters(block)
        for _ in range(1 + extra):
            fan_in = in_ch * KERNEL ** 3
            weights = _uniform(rng, math.sqrt(6.0 / fan_in), (out_ch, in_ch, KERNEL, KERNEL, KERNEL), dtype)
            layers.append(ConvLayer(weights, np.zeros(out_ch, dtype=dtype), name=f"conv{conv_no}"))
            layers.append(BatchNormLayer(out_ch, spec.bn_momentum, spec.bn_epsilon, dtype, name=f"bn{conv_no}"))
            layers.append(Activation(spec.activation, name=f"act{conv_no}"))
            in_ch = out_ch
            conv_no += 1
        layers.append(PoolLayer(size, spec.pooling, name=f"pool{block}"))

    layers.append(Flatten())
    layers.append(DropoutLayer(spec.dropout_p))
    fan_in = spec.fc_inputs
    layers.append(DenseLayer(
        _uniform(rng, math.sqrt(1.0 / fan_in), (fan_in, spec.num_classes), dtype),
        np.zeros(spec.num_classes, dtype=dtype),
    ))
    model = Model(layers, spec, rng)
    logger.debug("Built %d-CL model with %d parameters", spec.total_conv_layers, count_parameters(model))
    return model


def count_parameters(model: Model, conv_only: bool = False) -> int:
    """Learnable scalars: conv weights+biases, BN gamma+beta, FC weights+bias."""
    total = 0
    for layer in model.layers:
        if conv_only and not isinstance(layer, ConvLayer):
            continue
        total += sum(int(v.size) for v in layer.params().values())
    return total


def count_conv_stack_parameters(filters: Sequence[int], in_channels: int = 1, kernel: int = KERNEL) -> int:
    """Weights + biases of a plain stack of kernel^3 conv layers."""
    total = 0
    for out_ch in filters:
        total += in_channels * out_ch * kernel ** 3 + out_ch
        in_channels = out_ch
    return total


# ── Checkpoints ──────────────────────────────────────────────────────────────

def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode('utf-8')
    buf.write(struct.pack('<H', len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack('<B', arr.ndim))
    buf.write(struct.pack(f'<{arr.ndim}I', *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype='<f4').tobytes())


def _read_exact(buf: io.BytesIO, n: int) -> bytes:
    chunk = buf.read(n)
    if len(chunk) != n:
        raise VolumeFormatError("Truncated checkpoint")
    return chunk


def _read_tensor(buf: io.BytesIO) -> Tuple[str, np.ndarray]:
    (name_len,) = struct.unpack('<H', _read_exact(buf, 2))
    name = _read_exact(buf, name_len).decode('utf-8')
    (ndim,) = struct.unpack('<B', _read_exact(buf, 1))
    shape = struct.unpack(f'<{ndim}I', _read_exact(buf, 4 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(buf, 4 * count), dtype='<f4').reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(path: Union[str, Path], model: Model, optimizer: Optional[Dict[str, Any]] = None) -> None:
    """
    Write the architecture spec, every parameter and BN buffer, and optionally the Adam
    state ``{'t': int, 'm': {...}, 'v': {...}}``.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack('<I', CHECKPOINT_VERSION))
    spec_json = json.dumps(model.spec.to_dict(), sort_keys=True).encode('utf-8')
    buf.write(struct.pack('<I', len(spec_json)))
    buf.write(spec_json)

    state = model.state_dict()
    buf.write(struct.pack('<I', len(state)))
    for name, arr in state.items():
        _write_tensor(buf, name, arr)

    if optimizer is None:
        buf.write(struct.pack('<B', 0))
    else:
        buf.write(struct.pack('<B', 1))
        buf.write(struct.pack('<Q', int(optimizer['t'])))
        moments = [(f"m:{k}", v) for k, v in optimizer['m'].items()]
        moments += [(f"v:{k}", v) for k, v in optimizer['v'].items()]
        buf.write(struct.pack('<I', len(moments)))
        for name, arr in moments:
            _write_tensor(buf, name, arr)

    atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path: Union[str, Path],
                    expected_spec: Optional[ArchitectureSpec] = None,
                    dtype=np.float64) -> Tuple[Model, Optional[Dict[str, Any]]]:
    """
    Rebuild a model (and the optional Adam state) from a checkpoint.

    Raises:
        MissingFile:        If *path* does not exist.
        VolumeFormatError:  On a malformed container.
        CheckpointMismatch: If the stored spec differs from *expected_spec*
                            or stored tensor shapes disagree with the architecture spec.
    """
    path = Path(path)
    try:
        buf = io.BytesIO(path.read_bytes())
    except FileNotFoundError:
        raise MissingFile(f"Checkpoint not found: {path}")

    if _read_exact(buf, 4) != CHECKPOINT_MAGIC:
        raise VolumeFormatError(f"{path} is not a checkpoint")
    (version,) = struct.unpack('<I', _read_exact(buf, 4))
    if version != CHECKPOINT_VERSION:
        raise VolumeFormatError(f"Unsupported checkpoint version {version}")
    (spec_len,) = struct.unpack('<I', _read_exact(buf, 4))
    spec = ArchitectureSpec.from_dict(json.loads(_read_exact(buf, spec_len).decode('utf-8')))

    if expected_spec is not None and expected_spec.to_dict() != spec.to_dict():
        raise CheckpointMismatch(
            f"Checkpoint holds a {spec.total_conv_layers}-CL model, "
            f"expected {expected_spec.total_conv_layers}-CL ({path})")

    (count,) = struct.unpack('<I', _read_exact(buf, 4))
    state = OrderedDict(_read_tensor(buf) for _ in range(count))

    from augment import SeededRng
    model = build_model(spec, SeededRng(0), dtype=dtype)
    model.load_state_dict(state)

    optimizer = None
    (flag,) = struct.unpack('<B', _read_exact(buf, 1))
    if flag:
        (t,) = struct.unpack('<Q', _read_exact(buf, 8))
        (n,) = struct.unpack('<I', _read_exact(buf, 4))
        optimizer = {'t': int(t), 'm': OrderedDict(), 'v': OrderedDict()}
        for _ in range(n):
            name, arr = _read_tensor(buf)
            kind, key = name.split(':', 1)
            optimizer[kind][key] = arr
    return model, optimizer
