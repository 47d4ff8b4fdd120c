"""Shared test utilities: relative error and finite-difference gradients."""

import numpy as np


def rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_diff(f, arr, indices=None, h_scale=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. entries of ``arr``.

    ``arr`` is perturbed in place and restored. Returns a dict mapping flat
    index -> derivative estimate. The step is scaled by the entry magnitude.
    """
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grads = {}
    for idx in indices:
        original = flat[idx]
        h = h_scale * max(1.0, abs(float(original)))
        flat[idx] = original + h
        f_plus = f()
        flat[idx] = original - h
        f_minus = f()
        flat[idx] = original
        grads[idx] = (f_plus - f_minus) / (2.0 * h)
    return grads


def check_grad(f, tensors, rng, samples_per_tensor=3, tol=1e-4):
    """Compare analytic gradients against finite differences.

    ``f`` builds the graph and returns the scalar loss Tensor; ``tensors`` is
    a dict of name -> parameter Tensor (float64 for meaningful tolerances).
    Returns the worst relative error seen.
    """
    loss = f()
    loss.backward()
    analytic = {}
    for name, t in tensors.items():
        analytic[name] = (np.zeros_like(t.data) if t.grad is None
                          else t.grad.copy())
    worst = 0.0
    for name, t in tensors.items():
        size = t.data.size
        count = min(samples_per_tensor, size)
        indices = rng.choice(size, size=count, replace=False)
        fd = finite_diff(lambda: float(f().data), t.data, indices)
        for idx, estimate in fd.items():
            got = analytic[name].reshape(-1)[idx]
            err = rel_err(got, estimate)
            worst = max(worst, err)
            assert err < tol, (f"gradient mismatch for {name}[{idx}]: "
                               f"analytic {got:.6e} vs fd {estimate:.6e} (rel {err:.2e})")
    return worst
