"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Largest relative gradient error over ``inputs``.

    ``f(*inputs)`` must return a scalar tensor. For each input the analytic
    gradient ``a`` and the central difference ``n`` are compared as
    ``||a - n|| / max(||a||, ||n||, floor)``. ``max_entries`` limits the
    number of perturbed entries per input (chosen at random with ``seed``).
    Inputs should be float64.
    """
    for t in inputs:
        t.data = np.ascontiguousarray(t.data)
        t.grad = None
        t.requires_grad = True
    loss = f(*inputs)
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            picks = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            picks = np.arange(flat.size)
        num = np.empty(len(picks))
        with no_grad():
            for k, i in enumerate(picks):
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(*inputs).data.sum())
                flat[i] = orig - step
                fm = float(f(*inputs).data.sum())
                flat[i] = orig
                num[k] = (fp - fm) / (2.0 * step)
        a = analytic.reshape(-1)[picks]
        denom = max(np.linalg.norm(a), np.linalg.norm(num), floor)
        worst = max(worst, float(np.linalg.norm(a - num) / denom))
    return worst
