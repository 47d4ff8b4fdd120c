"""Parameter containers shared by the encoder, decoder and network assembly."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, gelu, layer_norm, matmul, parameter


def trunc_normal(shape, rng, std=0.02, dtype=np.float32):
    """Normal(0, std) samples resampled until they land within two deviations."""
    values = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    mask = np.abs(values) > bound
    while mask.any():
        values[mask] = rng.normal(0.0, std, size=int(mask.sum()))
        mask = np.abs(values) > bound
    return values.astype(dtype)


@dataclass
class Linear:
    """Right-multiplying projection ``y = x @ w + b`` over the channel axis."""

    w: Tensor
    b: Tensor | None = None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y

    @property
    def in_features(self):
        return self.w.shape[0]

    @property
    def out_features(self):
        return self.w.shape[1]


def linear(cin, cout, rng, dtype=np.float32, std=0.02, zero=False, bias=True):
    w = np.zeros((cin, cout), dtype=dtype) if zero else trunc_normal((cin, cout), rng, std, dtype)
    b = parameter(np.zeros(cout, dtype=dtype)) if bias else None
    return Linear(parameter(w), b)


@dataclass
class LayerNorm:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-6

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


def layernorm(channels, dtype=np.float32, eps=1e-6):
    return LayerNorm(parameter(np.ones(channels, dtype=dtype)),
                     parameter(np.zeros(channels, dtype=dtype)), eps)


@dataclass
class Mlp:
    """Pre-normalized two-layer perceptron with a GELU between the projections."""

    ln: LayerNorm
    fc1: Linear
    fc2: Linear

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(self.ln(x))))


def mlp(channels, expansion, rng, dtype=np.float32):
    # The second projection starts at zero so the residual branch is inert.
    return Mlp(layernorm(channels, dtype),
               linear(channels, channels * expansion, rng, dtype),
               linear(channels * expansion, channels, rng, dtype, zero=True))


def split_heads(x: Tensor, groups: int) -> Tensor:
    """[..., T, C] -> [..., G, T, C/G] with channels partitioned contiguously."""
    *lead, t, c = x.shape
    if c % groups:
        raise ValueError(f"channels {c} not divisible by groups {groups}")
    y = x.reshape(*lead, t, groups, c // groups)
    n = y.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return y.transpose(axes)


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`: [..., G, T, d] -> [..., T, G*d]."""
    *lead, g, t, d = x.shape
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return x.transpose(axes).reshape(*lead, t, g * d)


def named_tensors(obj, prefix=""):
    """Walk dataclasses/lists/dicts and yield (name, Tensor) leaves.

    Plain ndarrays are skipped (they are buffers, collected separately).
    """
    from dataclasses import fields, is_dataclass

    if isinstance(obj, Tensor):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            value = getattr(obj, f.name)
            yield from named_tensors(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_tensors(value, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, value in obj.items():
            yield from named_tensors(value, f"{prefix}.{key}" if prefix else str(key))


def named_buffers(obj, prefix=""):
    """Like :func:`named_tensors` but yields the plain-ndarray state slots."""
    from dataclasses import fields, is_dataclass

    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif is_dataclass(obj):
        for f in fields(obj):
            value = getattr(obj, f.name)
            yield from named_buffers(value, f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_buffers(value, f"{prefix}.{i}" if prefix else str(i))
    elif isinstance(obj, dict):
        for key, value in obj.items():
            yield from named_buffers(value, f"{prefix}.{key}" if prefix else str(key))
