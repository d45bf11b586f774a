"""Reference solvers on the same model: mean-field and projected subgradient LP."""

from __future__ import annotations

import numpy as np

from .energy import kernel_sum
from .model import EnergyModel, as_scores
from .proxlp import ProxTrace, conditional_gradient, project_simplex, record_state

MF5_ITERS = 5


def _start(model, y0):
    y = as_scores(y0, feasible=True)
    if y.shape != model.unaries.shape:
        raise ValueError(f"initial scores {y.shape} do not match unaries {model.unaries.shape}")
    return y.copy()


def mean_field(model: EnergyModel, y0, iters: int = 50, levels: int = 10, tol: float = 0.0):
    """Plain (undamped) mean-field updates ``y_a ∝ exp(-phi_a + sum_{b != a} K_ab y_b)``.

    Under Potts, ``sum_j mu(i, j) y_bj = 1 - y_bi``; the constant drops out in
    the normalization.  Stops early once no score moves by more than ``tol``.
    """
    y = _start(model, y0)
    trace = ProxTrace()
    record_state(trace, "init", 0, 0, model, y, levels, model.m)
    self_weight = sum(model.weights)  # k(f, f) = 1 for every kernel
    for it in range(1, iters + 1):
        message = kernel_sum(model, y) - self_weight * y
        logits = message - model.unaries
        logits -= logits.max(axis=1, keepdims=True)
        new = np.exp(logits)
        new /= new.sum(axis=1, keepdims=True)
        change = np.abs(new - y).max()
        y = new
        record_state(trace, "mf", it, 0, model, y, levels, model.m)
        if change <= tol:
            break
    return y, trace


def mean_field5(model: EnergyModel, y0, levels: int = 10):
    return mean_field(model, y0, MF5_ITERS, levels)


def sg_lp(model: EnergyModel, y0, iters: int = 100, levels: int = 10, eta0: float = 0.01):
    """Projected subgradient descent on the LP objective with steps ``eta0 / (1 + t)``.

    The pairwise subgradient ``sum_b K_ab sign(y_a - y_b)`` is ``-A s`` from
    the conditional gradient.
    """
    y = _start(model, y0)
    trace = ProxTrace()
    record_state(trace, "init", 0, 0, model, y, levels, model.m)
    for t in range(iters):
        grad = model.unaries - conditional_gradient(model, y, levels)
        y = project_simplex(y - eta0 / (1.0 + t) * grad)
        record_state(trace, "sglp", t + 1, 0, model, y, levels, model.m)
    return y, trace
