"""Finite-difference gradient checking for the autodiff engine."""
import numpy as np

from mae3d.autodiff import Tensor
from oracles import central_diff


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_grad(fn, *arrays, eps=1e-4, seed=0):
    """Compare analytic and central-difference gradients of ``fn``.

    ``fn`` takes Tensors and returns a Tensor; non-scalar outputs are reduced
    with fixed random weights. Returns the worst relative error over inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    weights = np.random.default_rng(seed).normal(size=out.shape)

    def scalar(out_t):
        return out_t if out_t.size == 1 else (out_t * weights).sum()

    scalar(out).backward()

    worst = 0.0
    for t, arr in zip(tensors, arrays):
        def f():
            with_data = [Tensor(a) for a in arrays]
            return float(np.sum(scalar(fn(*with_data)).data))

        numeric = central_diff(f, arr, eps)
        analytic = t.grad if t.grad is not None else np.zeros_like(arr)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def check_module_grad(loss_fn, module, fraction=1.0, eps=1e-4, seed=0, max_entries=None):
    """Finite-difference check of ``loss_fn()`` against a sample of ``module``'s parameters."""
    module.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    analytic, numeric = [], []
    entries = []
    for name, p in module.named_parameters():
        flat = np.arange(p.size)
        k = max(1, int(round(fraction * p.size)))
        entries += [(p, i) for i in rng.choice(flat, size=min(k, p.size), replace=False)]
    if max_entries is not None and len(entries) > max_entries:
        entries = [entries[i] for i in rng.choice(len(entries), size=max_entries, replace=False)]
    for p, i in entries:
        idx = np.unravel_index(i, p.shape)
        analytic.append(0.0 if p.grad is None else p.grad[idx])
        old = p.data[idx]
        p.data[idx] = old + eps
        fp = float(loss_fn().data)
        p.data[idx] = old - eps
        fm = float(loss_fn().data)
        p.data[idx] = old
        numeric.append((fp - fm) / (2 * eps))
    return rel_error(np.array(analytic), np.array(numeric)), len(entries)
