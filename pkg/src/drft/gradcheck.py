"""Central finite-difference oracle for analytic gradients."""

import numpy as np

from .autograd import no_grad


class DeterminismError(RuntimeError):
    """The scalar function returned different values for identical inputs."""


def _value(fn):
    with no_grad():
        out = fn()
    return float(np.asarray(out.data if hasattr(out, "data") else out).reshape(()))


def grad_check(build_scalar_fn, params, epsilon=1e-4, max_coords=16, rng=None):
    """Compare backprop against central differences.

    ``build_scalar_fn()`` must rebuild the graph from the current parameter
    values and return a scalar Tensor. At most ``max_coords`` coordinates per
    parameter are probed (all of them when ``max_coords`` is None).

    Returns the max over probed coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    params = list(params)
    rng = rng if rng is not None else np.random.default_rng(0)

    first, second = _value(build_scalar_fn), _value(build_scalar_fn)
    if first != second:
        raise DeterminismError(f"scalar function is not deterministic: {first!r} != {second!r}")

    for p in params:
        p.grad = None
    loss = build_scalar_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = _value(build_scalar_fn)
            flat[i] = orig - epsilon
            f_minus = _value(build_scalar_fn)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(ga.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
