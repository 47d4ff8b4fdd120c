"""Analytic parameter and multiply-accumulate counters.

Parameters are counted exactly by walking the learnable arrays.  MACs follow
the convention used when comparing backbone costs: one multiply-accumulate is
one FLOP; convolutions and projections count ``output_size * fan_in``;
attention counts logits plus the weighted sum; normalizations, activations,
poolings and biases are free.  Windowed attention is charged for padded
positions, since the computation processes them.
"""

from __future__ import annotations

from dataclasses import dataclass

from .layers import named_tensors
from .network import Model, PartsHead


@dataclass
class CostReport:
    params: int
    macs: int
    breakdown: dict  # module name -> (params, macs)


def count_params(model: Model) -> int:
    """Number of learnable scalars, positional codes and norm affines included."""
    return sum(t.size for _, t in named_tensors(model))


def _module_params(obj) -> int:
    return sum(t.size for _, t in named_tensors(obj))


def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _padded(size, window):
    return size + (window - size % window) % window


def _attention_macs(c, nq, nk):
    # q/k/v/out projections + logits + weighted sum, summed over heads.
    return nq * c * c + 2 * nk * c * c + nq * c * c + 2 * nq * nk * c


def _encoder_macs(c, n, l, with_mlp=True):
    macs = _attention_macs(c, n, l) + n * n * c
    if with_mlp:
        macs += 2 * n * c * c
    return macs


def _global_macs(c, n, l):
    return _attention_macs(c, l, n) + 6 * l * c * c


def _local_macs(c, h, w, window):
    lp = _padded(h, window) * _padded(w, window)
    macs = 4 * lp * c * c            # q/k/v/out over padded windows
    macs += 2 * lp * window * window * c   # content + relative logits
    macs += lp * window * window * c       # weighted sum
    macs += 6 * h * w * c * c        # feed-forward on the cropped map
    return macs


def cost_report(model: Model, height: int, width: int) -> CostReport:
    spec = model.spec
    breakdown: dict[str, tuple[int, int]] = {}

    h = _conv_out(height, 7, 2, 3)
    w = _conv_out(width, 7, 2, 3)
    stem_macs = h * w * 49 * 3 * spec.stem_width
    breakdown["stem"] = (_module_params(model.stem), stem_macs)
    h = _conv_out(h, 3, 2, 1)
    w = _conv_out(w, 3, 2, 1)

    prev_c = spec.stem_width
    prev_n = None
    for s, stage in enumerate(model.stages):
        c, n = spec.channels[s], spec.parts[s]
        if s > 0:
            h = _conv_out(h, 3, 2, 1)
            w = _conv_out(w, 3, 2, 1)
        l = h * w
        embed_macs = l * 9 * prev_c + l * prev_c * c
        if s > 0:
            embed_macs += prev_n * prev_c * c
            if stage.embed.resample is not None:
                embed_macs += n * prev_n * c
        breakdown[f"stage{s}.embed"] = (_module_params(stage.embed), embed_macs)
        breakdown[f"stage{s}.codes"] = (_module_params(stage.codes), 0)
        for i, block in enumerate(stage.blocks):
            macs = (_encoder_macs(c, n, l)
                    + _global_macs(c, n, l)
                    + _local_macs(c, h, w, spec.windows[s]))
            breakdown[f"stage{s}.block{i}"] = (_module_params(block), macs)
        prev_c, prev_n = c, n

    c4, n4 = spec.channels[3], spec.parts[3]
    l4 = h * w
    if isinstance(model.head, PartsHead):
        head_macs = _encoder_macs(c4, n4, l4, with_mlp=False) + c4 * spec.classes
    else:
        head_macs = l4 * c4 * c4 + c4 * spec.classes
    breakdown["head"] = (_module_params(model.head), head_macs)

    params = sum(p for p, _ in breakdown.values())
    macs = sum(m for _, m in breakdown.values())
    return CostReport(params=params, macs=macs, breakdown=breakdown)


def count_flops(model: Model, height: int, width: int) -> int:
    """Multiply-accumulate count of one forward pass at the given input size."""
    return cost_report(model, height, width).macs
