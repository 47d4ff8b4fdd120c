"""Part encoder: condense the whole feature map into part vectors by
cross-attention, mix information across parts, then gate the result.

All operations run on batched states: parts [B, N, C], wholes [B, L, C].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import LayerNorm, Linear, Mlp, layernorm, linear, merge_heads, mlp, split_heads
from .schedule import droppath
from .tensor import DimensionError, Tensor, gelu, matmul, softmax_lastdim


@dataclass
class PartState:
    """Part-level representation: ``values`` [B, N, C] plus stage metadata."""

    values: Tensor
    stage: int = 0
    block: int = 0

    @property
    def count(self):
        return self.values.shape[-2]

    @property
    def channels(self):
        return self.values.shape[-1]


@dataclass
class WholeState:
    """Whole-level representation: ``values`` [B, L, C] with L = height*width."""

    values: Tensor
    height: int
    width: int
    stage: int = 0

    def __post_init__(self):
        if self.values.shape[-2] != self.height * self.width:
            raise DimensionError(
                f"L={self.values.shape[-2]} does not factor as "
                f"{self.height}x{self.width}")

    @property
    def channels(self):
        return self.values.shape[-1]


@dataclass
class AffinityTensor:
    """Per-head part-to-pixel attention weights [B, G, N, L], rows summing to 1."""

    values: Tensor
    logits: Tensor | None = None
    stage: int = 0
    block: int = 0
    height: int = 0
    width: int = 0


@dataclass
class EncoderWeights:
    """Projections for one encoder pass.

    ``mlp`` may be None for the classification-head encoder, whose gating
    branch is a plain GELU instead of the two-layer perceptron.
    """

    groups: int
    q: Linear
    k: Linear
    v: Linear
    out: Linear
    ln_q: LayerNorm
    ln_kv: LayerNorm
    w_p: Tensor
    ln_r: LayerNorm
    mlp: Mlp | None


def encoder_weights(channels, parts, groups, rng, dtype=np.float32, with_mlp=True):
    if channels % groups:
        raise DimensionError(f"channels {channels} not divisible by groups {groups}")
    from .tensor import parameter
    return EncoderWeights(
        groups=groups,
        q=linear(channels, channels, rng, dtype),
        k=linear(channels, channels, rng, dtype),
        v=linear(channels, channels, rng, dtype),
        out=linear(channels, channels, rng, dtype, zero=True),
        ln_q=layernorm(channels, dtype),
        ln_kv=layernorm(channels, dtype),
        w_p=parameter(np.zeros((parts, parts), dtype=dtype)),
        ln_r=layernorm(channels, dtype),
        mlp=mlp(channels, 1, rng, dtype) if with_mlp else None)


def affinity(p: PartState, x: WholeState, d_e: Tensor, d_w: Tensor,
             w: EncoderWeights) -> AffinityTensor:
    """Row-stochastic part-to-pixel weights.

    Per head g the pre-softmax logits are
    ``q_g(LN(p + d_e)) @ k_g(LN(x + d_w))^T / sqrt(C/G)``,
    normalized over the pixel axis.
    """
    c = p.channels
    if x.channels != c:
        raise DimensionError(f"part/whole channels disagree: {c} vs {x.channels}")
    g = w.groups
    if c % g:
        raise DimensionError(f"channels {c} not divisible by groups {g}")
    qh = split_heads(w.q(w.ln_q(p.values + d_e)), g)
    kh = split_heads(w.k(w.ln_kv(x.values + d_w)), g)
    scale = 1.0 / np.sqrt(c // g)
    logits = matmul(qh, kh.transpose(0, 1, 3, 2)) * scale
    return AffinityTensor(values=softmax_lastdim(logits), logits=logits,
                          stage=x.stage, block=p.block,
                          height=x.height, width=x.width)


def attend_whole_to_parts(aff: AffinityTensor, x: WholeState,
                          w: EncoderWeights) -> Tensor:
    """Weighted average of pixel values per part; caller adds the residual."""
    vh = split_heads(w.v(w.ln_kv(x.values)), w.groups)
    return w.out(merge_heads(matmul(aff.values, vh)))


def part_reasoning(p_hat: Tensor, w_p: Tensor, ln: LayerNorm,
                   drop_rate=0.0, training=False, rng=None) -> Tensor:
    """Residual mixing across the part axis: ``p + W_p @ LN(p)``."""
    n = p_hat.shape[-2]
    if w_p.shape != (n, n):
        raise DimensionError(f"mixing matrix {w_p.shape} does not match {n} parts")
    branch = matmul(w_p, ln(p_hat))
    return p_hat + droppath(branch, drop_rate, training, rng)


def part_mlp(p_hat_r: Tensor, w: EncoderWeights,
             drop_rate=0.0, training=False, rng=None) -> Tensor:
    """Residual gating of the parts; plain GELU when no perceptron is present."""
    branch = w.mlp(p_hat_r) if w.mlp is not None else gelu(p_hat_r)
    return p_hat_r + droppath(branch, drop_rate, training, rng)


def encode(p_prev: PartState, x_prev: WholeState, d_e: Tensor, d_w: Tensor,
           w: EncoderWeights, drop_rate=0.0, training=False, rng=None
           ) -> tuple[PartState, AffinityTensor]:
    """One full encoder pass; ``x_prev`` is read but never modified."""
    aff = affinity(p_prev, x_prev, d_e, d_w, w)
    attended = attend_whole_to_parts(aff, x_prev, w)
    p_hat = p_prev.values + droppath(attended, drop_rate, training, rng)
    p_hat_r = part_reasoning(p_hat, w.w_p, w.ln_r, drop_rate, training, rng)
    p_new = part_mlp(p_hat_r, w, drop_rate, training, rng)
    return PartState(p_new, stage=x_prev.stage, block=p_prev.block + 1), aff
