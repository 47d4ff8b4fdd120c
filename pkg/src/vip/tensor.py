"""Dense tensor with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major numpy array (float32 or float64) and, when it
is produced by an operation, a closure that propagates gradients back to its
parents.  ``backward`` walks the implicit DAG in reverse topological order and
accumulates ``d(loss)/d(leaf)`` into each ``requires_grad`` leaf.

Gradients accumulate with ``+=``; the optimizer is responsible for clearing
them between steps.  Tensors are treated as immutable once created (only the
``grad`` slot mutates), so one graph must be used from a single thread, while
independent graphs may run concurrently.
"""

from __future__ import annotations

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ValueError):
    """Non-finite values reached an operation that requires finite input."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (double backward, detached loss, ...)."""


def _check_dtype(dtype):
    if dtype not in FLOAT_DTYPES:
        raise TypeError(f"unsupported dtype {dtype!r}; expected float32 or float64")
    return dtype


class Tensor:
    """A node in the differentiation graph holding an ndarray and its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_backward_ran")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("cannot wrap a Tensor in a Tensor")
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.type in FLOAT_DTYPES:
                dtype = data.dtype.type
            else:
                dtype = np.float32
        _check_dtype(np.dtype(dtype).type)
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self._backward_ran = False

    # ------------------------------------------------------------------ basics

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype.type

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        """The raw value array (shared, do not mutate)."""
        return self.data

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # ---------------------------------------------------------------- backward

    def backward(self):
        """Propagate gradients from this scalar to every reachable leaf."""
        if self.data.size != 1:
            raise GraphError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss is detached from the graph (requires_grad=False)")
        if self._backward_ran:
            raise GraphError("backward already ran for this tensor; rebuild the graph")
        self._backward_ran = True
        self._accumulate(np.ones_like(self.data))
        for node in reversed(tape(self)):
            if node._backward is not None:
                node._backward(node.grad)

    # -------------------------------------------------------------- arithmetic

    def _coerce(self, other):
        if isinstance(other, Tensor):
            if other.dtype != self.dtype:
                raise TypeError(f"dtype mismatch: {self.dtype} vs {other.dtype}")
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        out = _from_op(self.data + other.data, (self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_reduce_to(g, self.shape))
                if other.requires_grad:
                    other._accumulate(_reduce_to(g, other.shape))
            out._backward = bw
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = self._coerce(other)
        out = _from_op(self.data - other.data, (self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_reduce_to(g, self.shape))
                if other.requires_grad:
                    other._accumulate(_reduce_to(-g, other.shape))
            out._backward = bw
        return out

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        other = self._coerce(other)
        out = _from_op(self.data * other.data, (self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_reduce_to(g * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_reduce_to(g * self.data, other.shape))
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        out = _from_op(self.data / other.data, (self, other))
        if out.requires_grad:
            def bw(g):
                if self.requires_grad:
                    self._accumulate(_reduce_to(g / other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(
                        _reduce_to(-g * self.data / (other.data * other.data), other.shape))
            out._backward = bw
        return out

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        out = _from_op(-self.data, (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(-g)
        return out

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = _from_op(self.data ** exponent, (self,))
        if out.requires_grad:
            def bw(g):
                self._accumulate(g * exponent * self.data ** (exponent - 1))
            out._backward = bw
        return out

    # ------------------------------------------------------------ shape & view

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _from_op(self.data.reshape(shape), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.reshape(self.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inverse = np.argsort(axes)
        out = _from_op(np.ascontiguousarray(self.data.transpose(axes)), (self,))
        if out.requires_grad:
            out._backward = lambda g: self._accumulate(g.transpose(inverse))
        return out

    def __getitem__(self, index):
        out = _from_op(np.ascontiguousarray(self.data[index]), (self,))
        if out.requires_grad:
            def bw(g):
                full = np.zeros_like(self.data)
                np.add.at(full, index, g)
                self._accumulate(full)
            out._backward = bw
        return out

    def sum(self, axis=None, keepdims=False):
        out = _from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def bw(g):
                self._accumulate(_spread(g, self.shape, axis, keepdims))
            out._backward = bw
        return out

    def mean(self, axis=None, keepdims=False):
        out = _from_op(self.data.mean(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            count = self.size // max(out.size, 1)
            def bw(g):
                self._accumulate(_spread(g, self.shape, axis, keepdims) / count)
            out._backward = bw
        return out


def _from_op(data, parents):
    out = Tensor.__new__(Tensor)
    out.data = data if isinstance(data, np.ndarray) else np.asarray(data)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._prev = tuple(parents) if out.requires_grad else ()
    out._backward = None
    out._backward_ran = False
    return out


def tape(root):
    """Operations reachable from ``root`` in topological order (parents first)."""
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _reduce_to(g, shape):
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _spread(g, shape, axis, keepdims):
    """Broadcast a reduction gradient back to the input shape."""
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


# ------------------------------------------------------------------ factories

def constant(data, dtype=None):
    """A tensor that never receives gradients (positional grids, masks, ...)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


# ----------------------------------------------------------------- operations

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dimensions broadcast."""
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents disagree: {a.shape} @ {b.shape}")
    out = _from_op(np.matmul(a.data, b.data), (a, b))
    if out.requires_grad:
        def bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accumulate(_reduce_to(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_reduce_to(gb, b.shape))
        out._backward = bw
    return out


def exp(t: Tensor) -> Tensor:
    out = _from_op(np.exp(t.data), (t,))
    if out.requires_grad:
        out._backward = lambda g: t._accumulate(g * out.data)
    return out


def log(t: Tensor) -> Tensor:
    out = _from_op(np.log(t.data), (t,))
    if out.requires_grad:
        out._backward = lambda g: t._accumulate(g / t.data)
    return out


def sqrt(t: Tensor) -> Tensor:
    out = _from_op(np.sqrt(t.data), (t,))
    if out.requires_grad:
        out._backward = lambda g: t._accumulate(g * 0.5 / out.data)
    return out


def broadcast_to(t: Tensor, shape) -> Tensor:
    out = _from_op(np.ascontiguousarray(np.broadcast_to(t.data, shape)), (t,))
    if out.requires_grad:
        out._backward = lambda g: t._accumulate(_reduce_to(g, t.shape))
    return out


def concat(tensors, axis=-1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) != 1:
        raise TypeError(f"dtype mismatch in concat: {dtypes}")
    out = _from_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]
        def bw(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t._accumulate(piece)
        out._backward = bw
    return out


def pad(t: Tensor, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` is a per-axis list of (before, after) pairs."""
    pad_width = [tuple(p) for p in pad_width]
    out = _from_op(np.pad(t.data, pad_width), (t,))
    if out.requires_grad:
        index = tuple(slice(b, b + n) for (b, _), n in zip(pad_width, t.shape))
        out._backward = lambda g: t._accumulate(g[index])
    return out


def softmax_lastdim(t: Tensor) -> Tensor:
    """Row-stochastic softmax over the last dimension, max-subtracted for stability."""
    if not np.isfinite(t.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    out = _from_op(y, (t,))
    if out.requires_grad:
        def bw(g):
            inner = (g * y).sum(axis=-1, keepdims=True)
            t._accumulate(y * (g - inner))
        out._backward = bw
    return out


def layer_norm(t: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize each last-dim row to zero mean / unit variance, then affine."""
    c = t.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"affine shape {gamma.shape}/{beta.shape} does not match channels ({c},)")
    mu = t.data.mean(axis=-1, keepdims=True)
    xmu = t.data - mu
    var = (xmu * xmu).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xmu * ivar
    out = _from_op(xhat * gamma.data + beta.data, (t, gamma, beta))
    if out.requires_grad:
        def bw(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).reshape(-1, c).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g.reshape(-1, c).sum(axis=0))
            if t.requires_grad:
                dxhat = g * gamma.data
                m1 = dxhat.mean(axis=-1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
                t._accumulate(ivar * (dxhat - m1 - xhat * m2))
        out._backward = bw
    return out


_GELU_A = 0.7978845608028654  # sqrt(2/pi)
_GELU_B = 0.044715


def gelu(t: Tensor) -> Tensor:
    """Tanh-approximated Gaussian error linear unit."""
    x = t.data
    inner = _GELU_A * (x + _GELU_B * x ** 3)
    th = np.tanh(inner)
    out = _from_op(0.5 * x * (1.0 + th), (t,))
    if out.requires_grad:
        def bw(g):
            sech2 = 1.0 - th * th
            local = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_A * (1.0 + 3.0 * _GELU_B * x * x)
            t._accumulate(g * local)
        out._backward = bw
    return out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` [B, K] against integer labels [B]."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"expected logits [B, K] with labels [B], got {logits.shape} / {labels.shape}")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    logsumexp = zmax + np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    n = z.shape[0]
    picked = logp[np.arange(n), labels]
    out = _from_op(np.asarray(-picked.mean(), dtype=z.dtype), (logits,))
    if out.requires_grad:
        def bw(g):
            d = np.exp(logp)
            d[np.arange(n), labels] -= 1.0
            logits._accumulate(d * (g / n))
        out._backward = bw
    return out


def batch_norm(t: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
               momentum=0.1, eps=1e-5, training=False) -> Tensor:
    """Per-channel normalization over all leading axes of a [..., C] tensor.

    In training mode batch statistics are used and the running buffers
    (plain ndarrays) are updated in place; in eval mode the buffers are used
    and nothing is recorded for them in the graph.
    """
    c = t.shape[-1]
    flat = t.data.reshape(-1, c)
    if training:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (t.data - mu) * ivar
    out = _from_op(xhat * gamma.data + beta.data, (t, gamma, beta))
    if out.requires_grad:
        m = flat.shape[0]
        def bw(g):
            if gamma.requires_grad:
                gamma._accumulate((g * xhat).reshape(-1, c).sum(axis=0))
            if beta.requires_grad:
                beta._accumulate(g.reshape(-1, c).sum(axis=0))
            if t.requires_grad:
                dxhat = g * gamma.data
                if training:
                    s1 = dxhat.reshape(-1, c).sum(axis=0)
                    s2 = (dxhat * xhat).reshape(-1, c).sum(axis=0)
                    t._accumulate(ivar * (dxhat - s1 / m - xhat * s2 / m))
                else:
                    t._accumulate(dxhat * ivar)
        out._backward = bw
    return out


def _conv_windows(x_pad, kh, kw, stride, ho, wo):
    b, c = x_pad.shape[0], x_pad.shape[1]
    s0, s1, s2, s3 = x_pad.strides
    view = np.lib.stride_tricks.as_strided(
        x_pad, shape=(b, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    return view


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride=1, padding=0, groups=1) -> Tensor:
    """Grouped 2-D cross-correlation over [B, C_in, H, W] input."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/kernel, got {x.shape} / {weight.shape}")
    b, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups or cout % groups or cg != cin // groups:
        raise DimensionError(
            f"groups={groups} incompatible with input {x.shape} and kernel {weight.shape}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    x_pad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = np.ascontiguousarray(_conv_windows(x_pad, kh, kw, stride, ho, wo))
    col = col.reshape(b, groups, cg * kh * kw, ho * wo)
    w_r = weight.data.reshape(groups, cout // groups, cg * kh * kw)
    y = np.matmul(w_r, col).reshape(b, cout, ho, wo)
    if bias is not None:
        y += bias.data.reshape(1, cout, 1, 1)
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _from_op(y, parents)
    if out.requires_grad:
        def bw(g):
            g4 = g.reshape(b, groups, cout // groups, ho * wo)
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=(0, 2, 3)))
            if weight.requires_grad:
                gw = np.matmul(g4, np.swapaxes(col, -1, -2)).sum(axis=0)
                weight._accumulate(gw.reshape(weight.shape))
            if x.requires_grad:
                gcol = np.matmul(np.swapaxes(w_r, -1, -2), g4)
                gcol = gcol.reshape(b, cin, kh, kw, ho, wo)
                gx_pad = np.zeros_like(x_pad)
                for i in range(kh):
                    for j in range(kw):
                        gx_pad[:, :, i:i + stride * ho:stride,
                               j:j + stride * wo:stride] += gcol[:, :, i, j]
                if padding:
                    gx_pad = gx_pad[:, :, padding:padding + h, padding:padding + w]
                x._accumulate(gx_pad)
        out._backward = bw
    return out


def maxpool2d(x: Tensor, kernel=3, stride=2, padding=1) -> Tensor:
    """Max over kernel windows; gradient flows to the (first) argmax only."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-D input, got {x.shape}")
    b, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kernel > hp or kernel > wp:
        raise DimensionError(f"kernel {kernel} larger than padded input {hp}x{wp}")
    ho = (hp - kernel) // stride + 1
    wo = (wp - kernel) // stride + 1
    x_pad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=-np.inf)
    win = _conv_windows(x_pad, kernel, kernel, stride, ho, wo)
    flat = np.ascontiguousarray(win).reshape(b, c, kernel * kernel, ho, wo)
    arg = flat.argmax(axis=2)
    y = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]
    out = _from_op(y, (x,))
    if out.requires_grad:
        def bw(g):
            gx_pad = np.zeros((b, c, hp, wp), dtype=g.dtype)
            for o in range(kernel * kernel):
                i, j = divmod(o, kernel)
                gx_pad[:, :, i:i + stride * ho:stride,
                       j:j + stride * wo:stride] += g * (arg == o)
            if padding:
                gx_pad = gx_pad[:, :, padding:padding + h, padding:padding + w]
            x._accumulate(gx_pad)
        out._backward = bw
    return out


def pair_gather(t: Tensor, index) -> Tensor:
    """Gather ``out[..., a, b] = t[..., a, index[a, b]]`` along the last axis.

    ``index`` is a fixed [A, B] integer map; each row must contain distinct
    entries (true for relative-offset maps), which allows a vectorized scatter
    in the backward pass.
    """
    index = np.asarray(index)
    a_dim, b_dim = index.shape
    if t.shape[-2] != a_dim:
        raise DimensionError(f"index rows {a_dim} do not match axis -2 of {t.shape}")
    out_data = np.take_along_axis(
        t.data, index.reshape((1,) * (t.ndim - 2) + index.shape), axis=-1)
    out = _from_op(np.ascontiguousarray(out_data), (t,))
    if out.requires_grad:
        def bw(g):
            full = np.zeros_like(t.data)
            for a in range(a_dim):
                full[..., a, index[a]] += g[..., a, :]
            t._accumulate(full)
        out._backward = bw
    return out
