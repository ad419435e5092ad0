"""Central finite-difference gradient checks for the autodiff engine."""

import numpy as np

from .core import Tensor


def numeric_grad(fn, inputs, index, eps=1e-5, entries=None):
    """Central differences of scalar ``fn(*inputs)`` w.r.t. ``inputs[index]``.

    ``entries`` restricts the sweep to a subset of flat positions.
    """
    x = inputs[index].data
    flat = x.reshape(-1)
    positions = range(flat.size) if entries is None else entries
    out = np.zeros(flat.size)
    for k in positions:
        orig = flat[k]
        flat[k] = orig + eps
        fp = float(fn(*inputs).data)
        flat[k] = orig - eps
        fm = float(fn(*inputs).data)
        flat[k] = orig
        out[k] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def check_gradients(fn, inputs, eps=1e-5, rtol=1e-3, atol=1e-7, max_entries=None, seed=0):
    """Compare analytic and numeric gradients for every ``requires_grad`` input.

    Returns ``(ok, worst)`` where ``worst`` is the largest elementwise ratio
    ``|a - n| / (rtol * max(|a|, |n|) + atol)``; the check passes when it is
    at most 1.
    """
    for t in inputs:
        t.grad = None
    loss = fn(*inputs)
    loss.backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        entries = None
        if max_entries is not None and t.size > max_entries:
            entries = rng.choice(t.size, size=max_entries, replace=False)
        num = numeric_grad(fn, inputs, i, eps=eps, entries=entries)
        ana = np.zeros(t.shape) if analytic[i] is None else analytic[i]
        a = ana.reshape(-1)
        n = num.reshape(-1)
        sel = np.arange(a.size) if entries is None else np.asarray(entries)
        ratio = np.abs(a[sel] - n[sel]) / (rtol * np.maximum(np.abs(a[sel]), np.abs(n[sel])) + atol)
        worst = max(worst, float(ratio.max()) if ratio.size else 0.0)
    return worst <= 1.0, worst


def random_tensor(shape, rng, scale=1.0, requires_grad=True):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=requires_grad, dtype=np.float64)
