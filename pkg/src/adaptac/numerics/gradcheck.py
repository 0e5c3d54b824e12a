from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def finite_diff_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
    max_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Max over parameter entries of |analytic - numeric| / max(1, |numeric|).

    ``f`` rebuilds the scalar loss from the current parameter values and must
    be deterministic.  ``max_per_param`` caps the probed entries per tensor
    (chosen with a seeded generator) to keep big layers cheap.
    """
    for p in params.values():
        p.grad = None
    loss = f()
    T.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}
    rng = np.random.default_rng(seed)
    worst = 0.0
    with T.no_grad():
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_param is not None and flat.size > max_per_param:
                idx = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))
            a_flat = analytic[name].reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                num = (up - down) / (2.0 * eps)
                worst = max(worst, abs(a_flat[i] - num) / max(1.0, abs(num)))
    return worst
