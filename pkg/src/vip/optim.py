"""AdamW with decoupled weight decay and decay-exempt parameter groups."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError, Tensor

_MAX_STEP = 2 ** 62


def decay_exempt(name: str) -> bool:
    """Biases, norm affines, positional codes and prototypes skip weight decay."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf in ("b", "gamma", "beta", "proto"):
        return True
    return ".codes." in name or ".rel." in name


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict.

    Moments live in plain float arrays of the parameter dtype; ``step``
    applies the bias-corrected update in place. Gradients must be populated
    by a prior ``backward`` and are not cleared automatically.
    """

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0, exempt=decay_exempt):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.exempt = exempt
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr):
        if self.step_count >= _MAX_STEP:
            raise OverflowError("optimizer step counter overflow")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise DimensionError(
                    f"gradient shape {g.shape} does not match parameter "
                    f"{name} {p.data.shape}")
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and not self.exempt(name):
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self):
        """Moment/step state as named arrays for checkpointing."""
        out = {"optim/step": np.array([self.step_count], dtype=np.int64)}
        for name in self.params:
            out[f"optim/m/{name}"] = self.m[name]
            out[f"optim/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays):
        self.step_count = int(arrays["optim/step"][0])
        for name in self.params:
            self.m[name] = np.array(arrays[f"optim/m/{name}"],
                                    dtype=self.m[name].dtype, copy=True)
            self.v[name] = np.array(arrays[f"optim/v/{name}"],
                                    dtype=self.v[name].dtype, copy=True)
