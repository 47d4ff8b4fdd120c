"""Positional encodings: fixed sinusoidal grids, learnable codes, and
factorized relative embeddings for windowed attention."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, constant, matmul, pair_gather, parameter
from .layers import trunc_normal

SINUSOID_TEMPERATURE = 10000.0


def sinusoidal_table(h, w, c, dtype=np.float32):
    """Raw [H*W, C] sin/cos grid: first half encodes y, second half x.

    Within each half, channel 2j is sin(pos * f_j) and 2j+1 is cos(pos * f_j)
    with f_j = temperature ** (-2j / half). Positions are 0-indexed integers,
    rows flattened row-major.
    """
    if c % 4:
        raise DimensionError(f"channels must be divisible by 4, got {c}")
    half = c // 2
    j = np.arange(half // 2, dtype=np.float64)
    freq = SINUSOID_TEMPERATURE ** (-2.0 * j / half)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    out = np.empty((h * w, c), dtype=np.float64)
    for offset, pos in ((0, ys.reshape(-1)), (half, xs.reshape(-1))):
        angle = pos[:, None] * freq[None, :]
        out[:, offset + 0:offset + half:2] = np.sin(angle)
        out[:, offset + 1:offset + half:2] = np.cos(angle)
    return out.astype(dtype)


@dataclass
class SinusoidalGrid:
    """Fixed positional grid for an H x W feature map."""

    height: int
    width: int
    channels: int
    values: Tensor

    @classmethod
    def create(cls, h, w, c, dtype=np.float32):
        return cls(h, w, c, constant(sinusoidal_table(h, w, c, dtype)))


_GRID_CACHE: dict = {}


def sinusoidal_2d(h, w, c, dtype=np.float32) -> SinusoidalGrid:
    """Cached constructor; the grid is a pure function of (H, W, C)."""
    key = (h, w, c, np.dtype(dtype).str)
    grid = _GRID_CACHE.get(key)
    if grid is None:
        grid = SinusoidalGrid.create(h, w, c, dtype)
        _GRID_CACHE[key] = grid
    return grid


@dataclass
class LearnableCodes:
    """Per-stage learnable position/prototype table of shape [N, C]."""

    role: str
    values: Tensor
    stage: int = 0


def learnable_codes(role, n, c, rng, stage=0, dtype=np.float32, std=0.02):
    return LearnableCodes(role, parameter(trunc_normal((n, c), rng, std, dtype)), stage)


@dataclass
class RelativeEmbedding:
    """Offset-indexed tables for k x k windows, factorized by axis.

    ``r_h`` and ``r_w`` each hold 2k-1 rows of C/2 channels; the embedding
    for offset (dy, dx) is their channel concatenation.
    """

    window: int
    r_h: Tensor
    r_w: Tensor

    def __post_init__(self):
        rows = 2 * self.window - 1
        if self.r_h.shape[0] != rows or self.r_w.shape[0] != rows:
            raise DimensionError(
                f"relative tables need {rows} rows for window {self.window}, "
                f"got {self.r_h.shape[0]} / {self.r_w.shape[0]}")


def relative_embedding(window, channels, rng, dtype=np.float32, std=0.02):
    if channels % 2:
        raise DimensionError(f"channels must be even, got {channels}")
    rows = 2 * window - 1
    return RelativeEmbedding(
        window,
        parameter(trunc_normal((rows, channels // 2), rng, std, dtype)),
        parameter(trunc_normal((rows, channels // 2), rng, std, dtype)))


_INDEX_CACHE: dict = {}


def offset_index_map(k):
    """[k*k, k*k] map from (query a, key b) to flat (dy, dx) table index."""
    idx = _INDEX_CACHE.get(k)
    if idx is None:
        pos = np.stack(np.meshgrid(np.arange(k), np.arange(k), indexing="ij"),
                       axis=-1).reshape(-1, 2)
        delta = pos[None, :, :] - pos[:, None, :] + (k - 1)
        idx = delta[..., 0] * (2 * k - 1) + delta[..., 1]
        _INDEX_CACHE[k] = idx
    return idx


def relative_logits(q: Tensor, emb: RelativeEmbedding) -> Tensor:
    """Position-dependent attention logits for queries on a k x k window.

    ``q`` is [..., G, k*k, d] with G*d = C; the result [..., G, k*k, k*k] adds
    to content logits before the softmax. Each (a, b) entry is the dot product
    of query a with the concatenated offset embedding of b relative to a,
    distributed over heads the same way key channels are.
    """
    k = emb.window
    *lead, g, kk, d = q.shape
    if kk != k * k:
        raise DimensionError(f"query has {kk} positions but window is {k}x{k}")
    if g * d != 2 * emb.r_h.shape[1]:
        raise DimensionError(
            f"query channels {g * d} do not match embedding channels {2 * emb.r_h.shape[1]}")
    rows = 2 * k - 1
    # Full offset table [rows*rows, C], differentiable through both halves.
    from .tensor import broadcast_to, concat
    half = emb.r_h.shape[1]
    r_y = broadcast_to(emb.r_h.reshape(rows, 1, half), (rows, rows, half))
    r_x = broadcast_to(emb.r_w.reshape(1, rows, half), (rows, rows, half))
    table = concat([r_y, r_x], axis=-1).reshape(rows * rows, g, d)
    table = table.transpose(1, 2, 0)  # [G, d, rows*rows]
    all_logits = matmul(q, table)     # [..., G, k*k, rows*rows]
    return pair_gather(all_logits, offset_index_map(k))
