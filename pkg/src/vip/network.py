"""Backbone assembly: stem, per-stage patch embeddings, encoder/decoder
blocks, and the classification heads, for every model variant."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .decoder import DecoderWeights, decoder_weights, global_decode, local_attention, patch_partition
from .encoder import (AffinityTensor, EncoderWeights, PartState, WholeState,
                      encode, encoder_weights)
from .layers import LayerNorm, Linear, layernorm, linear, named_buffers, named_tensors, trunc_normal
from .positional import LearnableCodes, learnable_codes, sinusoidal_2d
from .schedule import droppath_rates
from .tensor import (DimensionError, Tensor, batch_norm, broadcast_to, constant,
                     conv2d, matmul, maxpool2d, parameter)


@dataclass(frozen=True)
class VariantSpec:
    """Four-stage configuration: channels, part counts, attention groups and
    block depths per stage, plus the window sizes and classification head."""

    name: str
    channels: tuple[int, int, int, int]
    parts: tuple[int, int, int, int]
    groups: tuple[int, int, int, int]
    blocks: tuple[int, int, int, int]
    windows: tuple[int, int, int, int] = (8, 7, 7, 7)
    head: str = "parts"
    stem_width: int = 64
    classes: int = 1000

    def validate(self):
        problems = []
        for name in ("channels", "parts", "groups", "blocks", "windows"):
            if len(getattr(self, name)) != 4:
                problems.append(f"{name} must list 4 stages, got {getattr(self, name)}")
        for s, (c, g) in enumerate(zip(self.channels, self.groups)):
            if c % g:
                problems.append(f"stage {s}: channels {c} not divisible by groups {g}")
            if c % 4:
                problems.append(f"stage {s}: channels {c} not divisible by 4")
        if any(v < 1 for v in self.parts + self.blocks + self.windows):
            problems.append("parts, blocks and windows must be positive")
        if self.head not in ("parts", "wholes"):
            problems.append(f"head must be 'parts' or 'wholes', got {self.head!r}")
        if self.classes < 2:
            problems.append(f"need at least 2 classes, got {self.classes}")
        if self.stem_width < 1:
            problems.append(f"stem width must be positive, got {self.stem_width}")
        if problems:
            raise DimensionError("invalid variant spec: " + "; ".join(problems))
        return self

    @property
    def total_blocks(self):
        return sum(self.blocks)

    def to_dict(self):
        return {"name": self.name, "channels": list(self.channels),
                "parts": list(self.parts), "groups": list(self.groups),
                "blocks": list(self.blocks), "windows": list(self.windows),
                "head": self.head, "stem_width": self.stem_width,
                "classes": self.classes}

    @classmethod
    def from_dict(cls, d):
        return cls(name=d["name"], channels=tuple(d["channels"]),
                   parts=tuple(d["parts"]), groups=tuple(d["groups"]),
                   blocks=tuple(d["blocks"]), windows=tuple(d.get("windows", (8, 7, 7, 7))),
                   head=d.get("head", "parts"), stem_width=d.get("stem_width", 64),
                   classes=d.get("classes", 1000)).validate()


PRESETS = {
    "vip-mo": VariantSpec("vip-mo", (48, 96, 192, 384), (16, 16, 16, 32),
                          (1, 2, 4, 8), (1, 1, 1, 1)),
    "vip-ti": VariantSpec("vip-ti", (64, 128, 256, 512), (32, 16, 32, 32),
                          (1, 2, 4, 8), (1, 1, 2, 1)),
    "vip-s": VariantSpec("vip-s", (96, 192, 384, 768), (64, 16, 64, 64),
                         (1, 2, 12, 24), (1, 1, 3, 1)),
    "vip-m": VariantSpec("vip-m", (96, 192, 384, 768), (64, 16, 64, 64),
                         (1, 2, 12, 24), (1, 1, 8, 1), head="wholes"),
    "vip-b": VariantSpec("vip-b", (128, 256, 512, 1024), (64, 16, 128, 128),
                         (1, 2, 16, 32), (1, 1, 8, 1), head="wholes"),
    "vip-nano": VariantSpec("vip-nano", (8, 16, 32, 64), (4, 4, 4, 4),
                            (1, 2, 4, 8), (1, 1, 1, 1), classes=10),
}


def preset(name, classes=None):
    if name not in PRESETS:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(PRESETS)}")
    spec = PRESETS[name]
    if classes is not None and classes != spec.classes:
        spec = replace(spec, classes=classes)
    return spec


@dataclass
class Conv:
    w: Tensor
    b: Tensor


def _conv(cout, cin_per_group, kh, kw, rng, dtype, std=0.02):
    return Conv(parameter(trunc_normal((cout, cin_per_group, kh, kw), rng, std, dtype)),
                parameter(np.zeros(cout, dtype=dtype)))


@dataclass
class StemWeights:
    conv: Conv
    ln: LayerNorm


@dataclass
class PatchEmbedWeights:
    dw: Conv                       # depthwise 3x3, stride 1 (stage 1) or 2
    pw: Conv                       # pointwise 1x1 to the stage width
    ln: LayerNorm
    proto: Tensor | None = None    # stage-1 initial part prototypes [N, C]
    align: Linear | None = None    # part channel alignment C_prev -> C_s
    resample: Tensor | None = None  # part-count change [N_s, N_prev]


@dataclass
class StageCodes:
    d_e: LearnableCodes
    d_d: LearnableCodes


@dataclass
class BlockWeights:
    enc: EncoderWeights
    dec: DecoderWeights


@dataclass
class StageWeights:
    embed: PatchEmbedWeights
    codes: StageCodes
    blocks: list[BlockWeights]


@dataclass
class PartsHead:
    enc: EncoderWeights  # gating branch is a bare GELU (mlp=None)
    fc: Linear


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class WholesHead:
    fc1: Linear
    bn: BatchNormParams
    fc: Linear


@dataclass
class Model:
    spec: VariantSpec
    dtype: type
    stem: StemWeights
    stages: list[StageWeights]
    head: PartsHead | WholesHead

    def named_parameters(self):
        return dict(named_tensors(self, ""))

    def named_buffers(self):
        return dict(named_buffers(self, ""))

    def forward(self, images, training=False, rng=None, droppath_max=0.0,
                attn_sink=None):
        return forward(self, images, training=training, rng=rng,
                       droppath_max=droppath_max, attn_sink=attn_sink)


def build(spec: VariantSpec, dtype=np.float32, seed=0, init="normal") -> Model:
    """Instantiate all weights for ``spec``.

    ``init="zeros"`` skips random sampling (useful for pure cost queries and
    for loading checkpoints into a fresh skeleton).
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    if init == "zeros":
        class _ZeroRng:
            def normal(self, loc, scale, size=None):
                return np.zeros(size if size is not None else ())
        rng = _ZeroRng()
    elif init != "normal":
        raise ValueError(f"unknown init mode {init!r}")

    stem = StemWeights(_conv(spec.stem_width, 3, 7, 7, rng, dtype),
                       layernorm(spec.stem_width, dtype))
    stages = []
    prev_c = spec.stem_width
    prev_n = None
    for s in range(4):
        c, n, g, depth = (spec.channels[s], spec.parts[s], spec.groups[s],
                          spec.blocks[s])
        embed = PatchEmbedWeights(
            dw=_conv(prev_c, 1, 3, 3, rng, dtype),
            pw=_conv(c, prev_c, 1, 1, rng, dtype),
            ln=layernorm(c, dtype))
        if s == 0:
            embed.proto = parameter(trunc_normal((n, c), rng, 0.02, dtype))
        else:
            embed.align = linear(prev_c, c, rng, dtype)
            if n != prev_n:
                embed.resample = parameter(trunc_normal((n, prev_n), rng, 0.02, dtype))
        codes = StageCodes(
            d_e=learnable_codes("encoder-part", n, c, rng, stage=s, dtype=dtype),
            d_d=learnable_codes("decoder-part", n, c, rng, stage=s, dtype=dtype))
        blocks = [BlockWeights(encoder_weights(c, n, g, rng, dtype),
                               decoder_weights(c, g, spec.windows[s], rng, dtype))
                  for _ in range(depth)]
        stages.append(StageWeights(embed, codes, blocks))
        prev_c, prev_n = c, n

    c4, n4, g4 = spec.channels[3], spec.parts[3], spec.groups[3]
    if spec.head == "parts":
        head = PartsHead(encoder_weights(c4, n4, g4, rng, dtype, with_mlp=False),
                         linear(c4, spec.classes, rng, dtype))
    else:
        head = WholesHead(
            fc1=linear(c4, c4, rng, dtype),
            bn=BatchNormParams(parameter(np.ones(c4, dtype=dtype)),
                               parameter(np.zeros(c4, dtype=dtype)),
                               np.zeros(c4, dtype=dtype),
                               np.ones(c4, dtype=dtype)),
            fc=linear(c4, spec.classes, rng, dtype))
    return Model(spec, np.dtype(dtype).type, stem, stages, head)


def _to_grid(x: WholeState) -> Tensor:
    """[B, L, C] -> [B, C, H, W] for convolution."""
    b, _, c = x.values.shape
    return x.values.reshape(b, x.height, x.width, c).transpose(0, 3, 1, 2)


def patch_embed(x: WholeState, p: PartState | None, w: PatchEmbedWeights,
                stage: int) -> tuple[WholeState, PartState]:
    """Stage-boundary embedding: separable downsampling conv + normalization
    on the whole; channel alignment (and part-count resampling) on the parts."""
    grid = _to_grid(x)
    cin = grid.shape[1]
    stride = 1 if stage == 0 else 2
    y = conv2d(grid, w.dw.w, w.dw.b, stride=stride, padding=1, groups=cin)
    y = conv2d(y, w.pw.w, w.pw.b)
    b, c, h, wd = y.shape
    flat = y.transpose(0, 2, 3, 1).reshape(b, h * wd, c)
    whole = WholeState(w.ln(flat), h, wd, stage)
    if stage == 0:
        n, cs = w.proto.shape
        part_values = broadcast_to(w.proto.reshape(1, n, cs), (b, n, cs))
        part = PartState(part_values, stage=stage)
    else:
        if p is None:
            raise DimensionError(f"stage {stage} embedding needs incoming parts")
        values = w.align(p.values)
        if w.resample is not None:
            values = matmul(w.resample, values)
        part = PartState(values, stage=stage, block=p.block)
    return whole, part


def _stem(model: Model, images: Tensor) -> WholeState:
    x = conv2d(images, model.stem.conv.w, model.stem.conv.b, stride=2, padding=3)
    b, c, h, w = x.shape
    flat = x.transpose(0, 2, 3, 1).reshape(b, h * w, c)
    flat = model.stem.ln(flat)
    x = flat.reshape(b, h, w, c).transpose(0, 3, 1, 2)
    x = maxpool2d(x, kernel=3, stride=2, padding=1)
    b, c, h, w = x.shape
    return WholeState(x.transpose(0, 2, 3, 1).reshape(b, h * w, c), h, w, 0)


def forward(model: Model, images, training=False, rng=None, droppath_max=0.0,
            attn_sink=None) -> tuple[Tensor, list[AffinityTensor]]:
    """Run the backbone; returns class logits and the per-block affinities."""
    if not isinstance(images, Tensor):
        images = constant(np.asarray(images), dtype=model.dtype)
    elif images.dtype != model.dtype:
        raise TypeError(f"input dtype {images.dtype} does not match model {model.dtype}")
    if images.ndim != 4 or images.shape[1] != 3:
        raise DimensionError(f"expected images [B, 3, H, W], got {images.shape}")
    if images.shape[2] < 32 or images.shape[3] < 32:
        raise DimensionError(f"input {images.shape[2]}x{images.shape[3]} too small "
                             "for the stem; need at least 32x32")

    rates = droppath_rates(model.spec.total_blocks, droppath_max)
    x_state = _stem(model, images)
    p_state = None
    affinities = []
    block_index = 0
    for s, stage in enumerate(model.stages):
        x_state, p_state = patch_embed(x_state, p_state, stage.embed, s)
        c = model.spec.channels[s]
        d_w = sinusoidal_2d(x_state.height, x_state.width, c, model.dtype).values
        d_e = stage.codes.d_e.values
        d_d = stage.codes.d_d.values
        for block in stage.blocks:
            rate = rates[block_index]
            p_state, aff = encode(p_state, x_state, d_e, d_w, block.enc,
                                  rate, training, rng)
            aff.stage, aff.block = s, block_index
            affinities.append(aff)
            x_state = global_decode(x_state, p_state, d_w, d_d, block.dec,
                                    rate, training, rng, attn_sink)
            patches, layout = patch_partition(x_state, model.spec.windows[s])
            x_state = local_attention(patches, block.dec.rel, layout, block.dec,
                                      rate, training, rng, attn_sink)
            x_state.stage = s
            block_index += 1

    if isinstance(model.head, PartsHead):
        stage4 = model.stages[3]
        d_w = sinusoidal_2d(x_state.height, x_state.width,
                            model.spec.channels[3], model.dtype).values
        p_state, aff = encode(p_state, x_state, stage4.codes.d_e.values, d_w,
                              model.head.enc)
        aff.stage, aff.block = 3, block_index
        affinities.append(aff)
        pooled = p_state.values.mean(axis=1)
        logits = model.head.fc(pooled)
    else:
        y = model.head.fc1(x_state.values)
        y = batch_norm(y, model.head.bn.gamma, model.head.bn.beta,
                       model.head.bn.running_mean, model.head.bn.running_var,
                       training=training)
        logits = model.head.fc(y.mean(axis=1))
    return logits, affinities
