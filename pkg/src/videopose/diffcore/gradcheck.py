"""Finite-difference verification of tape gradients."""

from __future__ import annotations

from collections.abc import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward

Params = Mapping[str, Tensor]


def _eval_scalar(fn: Callable[[Params], Tensor], params: Params) -> float:
    out = fn(params)
    return out.item()


def finite_difference_check(
    fn: Callable[[Params], Tensor],
    params: Params,
    step: float = 1e-5,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    return_details: bool = False,
):
    """Compare tape gradients of fn against central finite differences.

    fn maps a parameter dict to a scalar Tensor and must be deterministic;
    two forward evaluations that disagree are rejected.  Returns the max over
    all checked coordinates of |analytic - numeric| / max(1, |analytic|,
    |numeric|), or (max, per-parameter dict) when return_details is set.

    max_coords_per_param caps the coordinates probed per parameter (sampled
    without replacement from the given generator); by default every
    coordinate is probed.
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    if _eval_scalar(fn, params) != _eval_scalar(fn, params):
        raise ValueError("fn is not deterministic: two evaluations differ")

    with Tape() as tape:
        loss = fn(params)
    grads = backward(tape, loss)
    analytic = {name: grads[p].data if p in grads else np.zeros(p.shape) for name, p in params.items()}

    if max_coords_per_param is not None and rng is None:
        rng = np.random.default_rng(0)

    worst = 0.0
    details: dict[str, float] = {}
    base = dict(params)
    for name, p in params.items():
        flat = p.data.ravel()
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        else:
            coords = np.arange(n)
        a_flat = analytic[name].ravel()
        param_worst = 0.0
        for idx in coords:
            bumped = flat.copy()
            bumped[idx] = flat[idx] + step
            base[name] = Tensor(bumped.reshape(p.shape))
            f_plus = _eval_scalar(fn, base)
            bumped[idx] = flat[idx] - step
            base[name] = Tensor(bumped.reshape(p.shape))
            f_minus = _eval_scalar(fn, base)
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(a_flat[idx])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            param_worst = max(param_worst, err)
        base[name] = p
        details[name] = param_worst
        worst = max(worst, param_worst)

    if return_details:
        return worst, details
    return worst
