"""Central finite differences as an independent gradient oracle."""

import numpy as np

from .autodiff import Tape, Tensor


def finite_diff_grad(f, x, h=1e-5, indices=None):
    """Central-difference estimate of ``d f(x) / d x``.

    ``f`` maps a Tensor to a scalar Tensor (or float) and is evaluated
    without a tape. ``x.data`` is perturbed in place and restored. When
    ``indices`` (flat positions) is given only those entries are estimated
    and the rest of the result is NaN.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    flat = x.data.reshape(-1)
    grad = np.full(flat.shape, np.nan if indices is not None else 0.0, dtype=np.float64)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(np.asarray(_value(f(x))))
        flat[i] = orig - h
        fm = float(np.asarray(_value(f(x))))
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


def _value(y):
    return y.data if isinstance(y, Tensor) else y


def analytic_grads(f, inputs):
    """Gradients of scalar ``f(*inputs)`` w.r.t. every input via the tape."""
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = f(*inputs)
    tape.backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]


def relative_error(analytic, numeric, floor=1e-10):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(f, inputs, h=1e-5, max_entries=None, rng=None, floor=1e-10):
    """Compare tape gradients against finite differences for each input.

    Returns a list of relative errors, one per input. With ``max_entries``
    each input is checked on a random subset of that many entries.
    ``floor`` bounds the denominator from below; raise it when some
    gradients are exactly zero by symmetry and the numeric side is only
    rounding noise.
    """
    grads = analytic_grads(f, inputs)
    errors = []
    for k, (t, g) in enumerate(zip(inputs, grads)):
        if max_entries is not None and t.size > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        else:
            idx = None

        def fk(x, _k=k):
            args = list(inputs)
            args[_k] = x
            return f(*args)

        num = finite_diff_grad(fk, t, h=h, indices=idx)
        if idx is None:
            errors.append(relative_error(g, num, floor))
        else:
            errors.append(relative_error(g.ravel()[idx], num.ravel()[idx], floor))
    return errors
