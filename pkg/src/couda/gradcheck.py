"""Central finite-difference checks against reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class GradCheckResult:
    worst_rel: float
    worst_abs: float
    failures: list[tuple[int, int, float, float]]

    @property
    def ok(self) -> bool:
        return not self.failures


def finite_difference(loss_fn: Callable[[], Tensor], param: Tensor, index: int, h: float = 1e-6) -> float:
    flat = param.data.reshape(-1)
    orig = flat[index]
    with ad.no_grad():
        flat[index] = orig + h
        up = loss_fn().item()
        flat[index] = orig - h
        down = loss_fn().item()
    flat[index] = orig
    return (up - down) / (2 * h)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    n_coords: int = 20,
    rng: np.random.Generator | None = None,
    h: float = 1e-6,
    rel_tol: float = 1e-4,
    abs_tol: float = 1e-7,
    small: float = 1e-3,
    analytic: dict | None = None,
) -> GradCheckResult:
    """Compare reverse-mode and central differences on ``n_coords`` random coordinates.

    Relative error is used unless the gradient magnitude is below ``small``,
    where the absolute tolerance applies instead. ``analytic`` supplies
    gradients computed elsewhere (e.g. after routing); otherwise ``loss_fn``
    is differentiated.
    """
    rng = rng or np.random.default_rng(0)
    if analytic is None:
        with ad.new_tape():
            grads = ad.backward(loss_fn(), params)
    else:
        grads = analytic
    sizes = np.array([p.data.size for p in params])
    picks = rng.choice(int(sizes.sum()), size=min(n_coords, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    failures = []
    worst_rel = worst_abs = 0.0
    for flat_idx in picks:
        which = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        local = int(flat_idx - offsets[which])
        p = params[which]
        analytic = float(grads[p].reshape(-1)[local])
        numeric = finite_difference(loss_fn, p, local, h)
        err = abs(analytic - numeric)
        scale = max(abs(analytic), abs(numeric))
        if scale < small:
            worst_abs = max(worst_abs, err)
            bad = err > abs_tol
        else:
            rel = err / scale
            worst_rel = max(worst_rel, rel)
            bad = rel > rel_tol
        if bad:
            failures.append((which, local, analytic, numeric))
    return GradCheckResult(worst_rel, worst_abs, failures)
