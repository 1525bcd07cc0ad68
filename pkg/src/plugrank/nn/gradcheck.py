"""Finite-difference gradient verification.

The analytic gradient comes from one reverse-mode pass at the probe point's
own precision. The reference is a central difference evaluated in float64,
which gives the single-precision path enough headroom to be meaningful. The
error reported is max over checked coordinates of
``|analytic - fd| / max(|analytic|, |fd|, 1e-8)``.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import GradCheckError
from .tensor import Tensor, no_grad


def _scalar(out):
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise GradCheckError("grad_check target must return a scalar tensor")
    val = out.data.item()
    if not np.isfinite(val):
        raise GradCheckError(f"non-finite function value: {val}")
    return val


def grad_check(f, point, h=1e-5, indices=None):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a tensor to a scalar tensor and must be evaluable at nearby
    points. ``indices`` restricts the flat coordinates probed (all by default).
    """
    probe = Tensor(point.data.copy(), requires_grad=True)
    out = f(probe)
    _scalar(out)
    out.backward()
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad
    analytic = analytic.astype(np.float64).ravel()

    base = point.data.astype(np.float64)
    if indices is None:
        indices = range(base.size)

    worst = 0.0
    flat = base.ravel()
    for i in indices:
        saved = flat[i]
        flat[i] = saved + h
        with no_grad():
            fp = _scalar(f(Tensor(base)))
        flat[i] = saved - h
        with no_grad():
            fm = _scalar(f(Tensor(base)))
        flat[i] = saved
        fd = (fp - fm) / (2.0 * h)
        a = analytic[i]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        worst = max(worst, err)
    return worst


@contextmanager
def bind_params(params, vec):
    """Temporarily view each parameter as a slice of one flat vector tensor.

    Lets a whole-model loss be treated as a function of a single point, so the
    model's gradients flow into (and finite differences probe) ``vec``.
    """
    saved = [p.tensor for p in params]
    offset = 0
    try:
        from . import tensor as T

        for p in params:
            size = p.tensor.data.size
            p.tensor = T.reshape(T.narrow(vec, 0, offset, size), p.tensor.data.shape)
            offset += size
        if offset != vec.data.size:
            raise GradCheckError(f"vector size {vec.data.size} != total parameter size {offset}")
        yield
    finally:
        for p, t in zip(params, saved):
            p.tensor = t


def pack_params(params):
    """Concatenate parameter values into one flat float array (copy)."""
    return np.concatenate([p.tensor.data.ravel() for p in params])


def grad_check_params(loss_fn, params, h=1e-4, n_coords=None, rng=None, magnitude_floor=1e-4):
    """Gradient-check a model loss with respect to all given parameters.

    ``loss_fn`` takes no arguments and evaluates the loss through the
    parameters' current tensors. For large models only ``n_coords`` sampled
    coordinates are probed; coordinates whose analytic gradient is below
    ``magnitude_floor * max|grad|`` are excluded from sampling because a
    single-precision reference there is dominated by rounding noise, not
    by the derivative being verified.
    """
    params = list(params)
    point = Tensor(pack_params(params))

    def f(vec):
        with bind_params(params, vec):
            return loss_fn()

    if n_coords is None:
        return grad_check(f, point, h=h)

    probe = Tensor(point.data.copy(), requires_grad=True)
    with bind_params(params, probe):
        out = loss_fn()
    _scalar(out)
    out.backward()
    analytic = np.abs(probe.grad.astype(np.float64).ravel())
    gmax = analytic.max()
    if gmax == 0.0:
        eligible = np.arange(analytic.size)
    else:
        eligible = np.nonzero(analytic >= magnitude_floor * gmax)[0]
    rng = rng or np.random.default_rng(0)
    if eligible.size > n_coords:
        chosen = rng.choice(eligible, size=n_coords, replace=False)
    else:
        chosen = eligible
    return grad_check(f, point, h=h, indices=sorted(int(i) for i in chosen))
