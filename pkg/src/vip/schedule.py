"""Learning-rate schedule and stochastic depth."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, constant


def lr_at(step, peak, warmup_steps, total_steps):
    """Linear warmup from 0 to ``peak``, then half-cosine decay to 0.

    Continuous at the warmup/cosine joint and non-negative everywhere.
    """
    if step < 0:
        raise ValueError(f"negative step {step}")
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min((step - warmup_steps) / span, 1.0)
    return 0.5 * peak * (1.0 + math.cos(math.pi * progress))


def droppath_rates(num_blocks, max_rate):
    """Per-block drop rates rising linearly from 0 to ``max_rate``."""
    if num_blocks <= 1:
        return [0.0] * num_blocks
    return [max_rate * i / (num_blocks - 1) for i in range(num_blocks)]


def droppath(x: Tensor, rate, training=False, rng=None) -> Tensor:
    """Randomly zero the residual branch per sample, rescaling kept samples.

    Identity in eval mode or at rate 0. The first axis of ``x`` is the sample
    axis; kept samples are scaled by 1/(1-rate) so the expectation is
    preserved.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"drop rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode droppath needs a random generator")
    keep = 1.0 - rate
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.dtype) / keep
    return x * constant(mask, dtype=x.dtype)
