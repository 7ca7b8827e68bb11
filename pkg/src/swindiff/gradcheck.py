"""Central finite-difference check of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def _value(f: Callable[[], Tensor | float]) -> float:
    with no_grad():
        out = f()
    return float(out.data) if isinstance(out, Tensor) else float(out)


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
    jitter: float = 0.0,
    floor: float = 1e-12,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` is re-evaluated with the parameters perturbed in place, so it must
    read the current parameter values on every call. With ``samples`` set, that
    many (parameter, index) entries are drawn uniformly over all entries;
    otherwise every entry is checked. ``jitter`` > 0 moves every parameter by a
    uniform random offset of that size first, which steps off measure-zero kinks
    such as ``|x|`` at 0.

    The error per entry is ``|a - n| / (|a| + |n| + floor)``. Entries whose
    true gradient is zero (a bias feeding a normalization, say) have a numeric
    gradient that is pure round-off, roughly ``eps * |f| / step``; pick ``floor``
    well above that so they are judged on absolute error.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = rng or np.random.default_rng(0)
    if jitter > 0:
        for p in params:
            p.data = p.data + rng.uniform(-jitter, jitter, size=p.shape)

    for p in params:
        p.grad = None
    loss = f()
    if loss.requires_grad:
        loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    if samples is None:
        entries = [(i, j) for i, n in enumerate(sizes) for j in range(n)]
    else:
        flat = rng.choice(int(sizes.sum()), size=min(samples, int(sizes.sum())), replace=False)
        bounds = np.cumsum(sizes)
        entries = []
        for k in np.sort(flat):
            i = int(np.searchsorted(bounds, k, side="right"))
            entries.append((i, int(k - (bounds[i - 1] if i else 0))))

    worst = 0.0
    for i, j in entries:
        p = params[i]
        flat_view = p.data.reshape(-1)
        orig = flat_view[j]
        flat_view[j] = orig + step
        up = _value(f)
        flat_view[j] = orig - step
        down = _value(f)
        flat_view[j] = orig
        numeric = (up - down) / (2.0 * step)
        a = analytic[i].reshape(-1)[j]
        err = abs(a - numeric) / (abs(a) + abs(numeric) + floor)
        worst = max(worst, err)
    return worst
