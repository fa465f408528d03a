"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    select: Callable[[int, Tensor], Sequence[int]] | None = None,
) -> float:
    """Max relative error between autograd and central-difference gradients.

    ``f`` takes no arguments and reads ``params`` by closure; it must return a
    scalar tensor. Relative error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    ``select(k, param)`` may return the flat indices to probe in the k-th
    parameter; by default every element is probed.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for k, (p, a) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        af = a.reshape(-1)
        coords = range(flat.size) if select is None else select(k, p)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(num - af[i]) / max(abs(num), abs(af[i]), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
