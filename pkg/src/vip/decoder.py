"""Whole decoder: broadcast part information back into every pixel, then
refine within non-overlapping k x k windows of the feature map.

Maps whose sides are not multiples of k are zero-padded bottom/right; padded
keys are masked out of the window softmax and padded pixels are cropped away
when windows are re-assembled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import PartState, WholeState
from .layers import LayerNorm, Linear, Mlp, layernorm, linear, merge_heads, mlp, split_heads
from .positional import RelativeEmbedding, relative_embedding, relative_logits
from .schedule import droppath
from .tensor import DimensionError, Tensor, constant, matmul, pad, softmax_lastdim

MASK_BIAS = -1e30  # additive logit for padded keys; exp() underflows to exactly 0


@dataclass
class PatchLayout:
    """Bookkeeping for one partition of an H x W map into k x k windows."""

    window: int
    height: int
    width: int
    padded_h: int
    padded_w: int
    mask: np.ndarray  # [n_patches, k*k] True at real (non-padded) pixels

    @property
    def n_patches(self):
        return (self.padded_h // self.window) * (self.padded_w // self.window)


@dataclass
class DecoderWeights:
    groups: int
    g_q: Linear
    g_k: Linear
    g_v: Linear
    g_out: Linear
    ln_gq: LayerNorm
    ln_gkv: LayerNorm
    g_mlp: Mlp
    l_q: Linear
    l_k: Linear
    l_v: Linear
    l_out: Linear
    ln_l: LayerNorm
    rel: RelativeEmbedding
    l_mlp: Mlp


def decoder_weights(channels, groups, window, rng, dtype=np.float32):
    if channels % groups:
        raise DimensionError(f"channels {channels} not divisible by groups {groups}")
    return DecoderWeights(
        groups=groups,
        g_q=linear(channels, channels, rng, dtype),
        g_k=linear(channels, channels, rng, dtype),
        g_v=linear(channels, channels, rng, dtype),
        g_out=linear(channels, channels, rng, dtype, zero=True),
        ln_gq=layernorm(channels, dtype),
        ln_gkv=layernorm(channels, dtype),
        g_mlp=mlp(channels, 3, rng, dtype),
        l_q=linear(channels, channels, rng, dtype),
        l_k=linear(channels, channels, rng, dtype),
        l_v=linear(channels, channels, rng, dtype),
        l_out=linear(channels, channels, rng, dtype, zero=True),
        ln_l=layernorm(channels, dtype),
        rel=relative_embedding(window, channels, rng, dtype),
        l_mlp=mlp(channels, 3, rng, dtype))


def global_decode(x: WholeState, p: PartState, d_w: Tensor, d_d: Tensor,
                  w: DecoderWeights, drop_rate=0.0, training=False, rng=None,
                  attn_sink=None) -> WholeState:
    """Every pixel attends over the N parts; ``p`` is read but never modified."""
    c = x.channels
    if p.channels != c:
        raise DimensionError(f"whole/part channels disagree: {c} vs {p.channels}")
    g = w.groups
    qh = split_heads(w.g_q(w.ln_gq(x.values + d_w)), g)
    kh = split_heads(w.g_k(w.ln_gkv(p.values + d_d)), g)
    vh = split_heads(w.g_v(w.ln_gkv(p.values)), g)
    scale = 1.0 / np.sqrt(c // g)
    attn = softmax_lastdim(matmul(qh, kh.transpose(0, 1, 3, 2)) * scale)
    if attn_sink is not None:
        attn_sink.append(("global", attn))
    out = w.g_out(merge_heads(matmul(attn, vh)))
    x_g = x.values + droppath(out, drop_rate, training, rng)
    x_hat = x_g + droppath(w.g_mlp(x_g), drop_rate, training, rng)
    return WholeState(x_hat, x.height, x.width, x.stage)


def patch_partition(x: WholeState, window: int) -> tuple[Tensor, PatchLayout]:
    """Split [B, L, C] into [B, n_patches, k*k, C] windows, zero-padding
    bottom/right to multiples of k. The inverse reconstructs ``x`` exactly."""
    if window < 1:
        raise DimensionError(f"window must be >= 1, got {window}")
    b = x.values.shape[0]
    h, w, c = x.height, x.width, x.channels
    k = window
    ph = (k - h % k) % k
    pw = (k - w % k) % k
    hp, wp = h + ph, w + pw
    grid = x.values.reshape(b, h, w, c)
    if ph or pw:
        grid = pad(grid, [(0, 0), (0, ph), (0, pw), (0, 0)])
    gh, gw = hp // k, wp // k
    patches = (grid.reshape(b, gh, k, gw, k, c)
                   .transpose(0, 1, 3, 2, 4, 5)
                   .reshape(b, gh * gw, k * k, c))
    valid = np.zeros((hp, wp), dtype=bool)
    valid[:h, :w] = True
    mask = (valid.reshape(gh, k, gw, k)
                 .transpose(0, 2, 1, 3)
                 .reshape(gh * gw, k * k))
    return patches, PatchLayout(k, h, w, hp, wp, mask)


def patch_merge(patches: Tensor, layout: PatchLayout) -> Tensor:
    """Reassemble windows into [B, L, C], cropping the padding."""
    b = patches.shape[0]
    k, hp, wp = layout.window, layout.padded_h, layout.padded_w
    gh, gw = hp // k, wp // k
    c = patches.shape[-1]
    grid = (patches.reshape(b, gh, gw, k, k, c)
                   .transpose(0, 1, 3, 2, 4, 5)
                   .reshape(b, hp, wp, c))
    grid = grid[:, :layout.height, :layout.width, :]
    return grid.reshape(b, layout.height * layout.width, c)


def local_attention(patches: Tensor, rel: RelativeEmbedding, layout: PatchLayout,
                    w: DecoderWeights, drop_rate=0.0, training=False, rng=None,
                    attn_sink=None) -> WholeState:
    """Self-attention within each window with relative-offset key logits,
    followed by the residual feed-forward over the re-assembled map."""
    if rel.window != layout.window:
        raise DimensionError(
            f"embedding window {rel.window} does not match layout {layout.window}")
    c = patches.shape[-1]
    g = w.groups
    normed = w.ln_l(patches)
    qh = split_heads(w.l_q(normed), g)  # [B, Np, G, k*k, d]
    kh = split_heads(w.l_k(normed), g)
    vh = split_heads(w.l_v(normed), g)
    scale = 1.0 / np.sqrt(c // g)
    logits = (matmul(qh, kh.transpose(0, 1, 2, 4, 3)) + relative_logits(qh, rel)) * scale
    key_bias = np.where(layout.mask, 0.0, MASK_BIAS)[None, :, None, None, :]
    attn = softmax_lastdim(logits + constant(key_bias, dtype=patches.dtype))
    if attn_sink is not None:
        attn_sink.append(("local", attn))
    out = w.l_out(merge_heads(matmul(attn, vh)))
    refined = patches + droppath(out, drop_rate, training, rng)
    merged = patch_merge(refined, layout)
    final = merged + droppath(w.l_mlp(merged), drop_rate, training, rng)
    return WholeState(final, layout.height, layout.width)
