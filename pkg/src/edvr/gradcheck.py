"""Finite-difference gradient checks.

The relative error reported everywhere is ``|a - n| / max(|a|, |n|)`` taken
over the whole gradient array with the 2-norm, where ``a`` is the analytic and
``n`` the central-difference gradient.
"""
import numpy as np

from . import tensor as T


def rel_error(a, n):
    a = np.asarray(a, dtype=np.float64).ravel()
    n = np.asarray(n, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def _scalar(fn, proj):
    with T.no_grad():
        return float(np.sum(fn().data * proj))


def analytic_gradients(fn, inputs, proj):
    for t in inputs.values():
        t.grad = None
    out = fn()
    out.backward(np.asarray(proj, dtype=out.dtype))
    return {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy()) for name, t in inputs.items()}


def check_gradients(fn, inputs, proj, eps=1e-6):
    """Elementwise central differences of ``sum(fn() * proj)`` for every input.

    Args:
        fn: Zero-argument callable returning a Tensor; it must read the
            current ``.data`` of the tensors in ``inputs``.
        inputs (dict[str, Tensor]): float64 tensors to differentiate.
        proj (ndarray): Fixed projection turning the output into a scalar.

    Returns:
        dict[str, float]: Relative error per input.
    """
    analytic = analytic_gradients(fn, inputs, proj)
    errors = {}
    for name, t in inputs.items():
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = _scalar(fn, proj)
            flat[i] = orig - eps
            fm = _scalar(fn, proj)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        errors[name] = rel_error(analytic[name], numeric)
    return errors


def directional_derivatives(fn, inputs, proj, rng, eps=1e-7, n_dirs=1):
    """Analytic and central-difference derivatives along random directions.

    One random direction per tensor (``n_dirs`` times); every element of each
    tensor participates through the direction. Returns ``{name: (analytic
    list, numeric list)}``.
    """
    analytic = analytic_gradients(fn, inputs, proj)
    out = {}
    for name, t in inputs.items():
        a_vals, n_vals = [], []
        for _ in range(n_dirs):
            d = rng.standard_normal(t.shape)
            orig = t.data.copy()
            t.data[...] = orig + eps * d
            fp = _scalar(fn, proj)
            t.data[...] = orig - eps * d
            fm = _scalar(fn, proj)
            t.data[...] = orig
            a_vals.append(float(np.sum(analytic[name] * d)))
            n_vals.append((fp - fm) / (2 * eps))
        out[name] = (a_vals, n_vals)
    return out


def check_directional(fn, inputs, proj, rng, eps=1e-7, n_dirs=1):
    """Per-tensor relative error of directional derivatives.

    Cheaper than :func:`check_gradients` for large parameter sets. A tensor
    with a tiny directional derivative is dominated by rounding noise here;
    :func:`pooled_directional_error` avoids that.
    """
    return {name: rel_error(a, n) for name, (a, n) in directional_derivatives(fn, inputs, proj, rng, eps, n_dirs).items()}


def pooled_directional_error(fn, inputs, proj, rng, eps=1e-7, n_dirs=1):
    """Relative error over the vector of all tensors' directional derivatives."""
    derivs = directional_derivatives(fn, inputs, proj, rng, eps, n_dirs)
    a = [v for pair in derivs.values() for v in pair[0]]
    n = [v for pair in derivs.values() for v in pair[1]]
    return rel_error(a, n)
