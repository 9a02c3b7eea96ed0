"""Central finite-difference checks for the autodiff tape."""
import numpy as np

from .tensor import no_grad


def numerical_grad(fn, inputs, h=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. each tensor in ``inputs``.

    ``fn`` must rebuild its graph from the tensors' current ``data`` on every
    call; entries are perturbed in place and restored.
    """
    grads = []
    with no_grad():
        for t in inputs:
            g = np.zeros_like(t.data)
            flat, gflat = t.data.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = fn().item()
                flat[i] = orig - h
                fm = fn().item()
                flat[i] = orig
                gflat[i] = (fp - fm) / (2 * h)
            grads.append(g)
    return grads


def analytic_grad(fn, inputs):
    for t in inputs:
        t.zero_grad()
    fn().backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def relative_error(analytic, numeric, floor=1e-6):
    """Elementwise |a - n| / max(|a|, |n|, floor); the floor guards exact zeros."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def max_relative_error(fn, inputs, h=1e-5, floor=1e-6):
    worst = 0.0
    for a, n in zip(analytic_grad(fn, inputs), numerical_grad(fn, inputs, h)):
        if a.size:
            worst = max(worst, float(relative_error(a, n, floor).max()))
    return worst
