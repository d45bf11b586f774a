"""Integer, LP and proximal energies of a dense Potts model.

Pairwise sums go through the same (ordered) filters the solver uses, so
energies and solver gradients share one kernel approximation.  Models built
with ``exact=True`` use dense kernels and exact score comparisons instead.
"""

from __future__ import annotations

import numpy as np

from .model import EnergyModel, as_scores, is_feasible, is_integral
from .permutohedral import dense_ordered_filter, filter, ordered_filter_pair


def kernel_sum(model: EnergyModel, values: np.ndarray) -> np.ndarray:
    """``sum_b K_ab v_b`` over all kernels, self term included."""
    values = np.asarray(values, dtype=np.float64)
    if model.exact:
        return model.kernel_matrix() @ values
    out = np.zeros_like(values)
    for w, lat in zip(model.weights, model.lattices):
        if w:
            out += w * filter(lat, values)
    return out


def ordered_sums(model: EnergyModel, values, scores, levels: int):
    """Return ``(geq, leq)``: ``sum_b K_ab v_b [s_a >= s_b]`` and the ``<=`` counterpart.

    ``scores`` has one column per value channel.
    """
    values = np.asarray(values, dtype=np.float64)
    if model.exact:
        K = model.kernel_matrix()
        return (
            dense_ordered_filter(K, values, scores, "geq"),
            dense_ordered_filter(K, values, scores, "leq"),
        )
    geq = np.zeros_like(values)
    leq = np.zeros_like(values)
    for w, lat in zip(model.weights, model.lattices):
        if w:
            g, l = ordered_filter_pair(lat, values, scores, levels)
            geq += w * g
            leq += w * l
    return geq, leq


def unary_energy(model: EnergyModel, y: np.ndarray) -> float:
    return float(np.sum(model.unaries * y))


def ip_pairwise(model: EnergyModel, y: np.ndarray) -> float:
    # sum_a sum_i y_ai sum_b K_ab (1 - y_bi); the b = a term vanishes for integral y
    full = kernel_sum(model, np.ones((model.n, 1)))
    same = kernel_sum(model, y)
    return float(np.sum(y * (full - same)))


def ip_energy(model: EnergyModel, y: np.ndarray) -> float:
    """Potts energy of an integral labelling (one-hot rows)."""
    y = as_scores(y)
    if not is_integral(y):
        raise ValueError("ip_energy needs an integral labelling")
    _check_shape(model, y)
    return unary_energy(model, y) + ip_pairwise(model, y)


def lp_pairwise(model: EnergyModel, y: np.ndarray, levels: int = 10) -> float:
    """``sum_{a, b != a} sum_i K_ab |y_ai - y_bi| / 2``.

    ``|y_a - y_b|`` splits into ``(y_a - y_b)[y_a >= y_b] + (y_b - y_a)[y_a <= y_b]``;
    each ordered sum is one filter pass, and pairs with equal scores cancel.
    """
    ones = np.ones_like(y)
    geq_w, leq_w = ordered_sums(model, np.hstack([ones, y]), np.hstack([y, y]), levels)
    m = y.shape[1]
    total = np.sum(y * geq_w[:, :m] - geq_w[:, m:]) + np.sum(leq_w[:, m:] - y * leq_w[:, :m])
    return float(total) / 2.0


def lp_energy(model: EnergyModel, y: np.ndarray, levels: int = 10) -> float:
    """LP relaxation objective at a feasible ``y``."""
    y = as_scores(y)
    if not is_feasible(y):
        raise ValueError("lp_energy needs rows on the probability simplex")
    _check_shape(model, y)
    return unary_energy(model, y) + lp_pairwise(model, y, levels)


def proximal_objective(model: EnergyModel, y, y_prev, lam: float, levels: int = 10) -> float:
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    y = as_scores(y)
    y_prev = as_scores(y_prev)
    if y.shape != y_prev.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_prev.shape}")
    return lp_energy(model, y, levels) + float(np.sum((y - y_prev) ** 2)) / (2.0 * lam)


def _check_shape(model, y):
    if y.shape != model.unaries.shape:
        raise ValueError(f"labelling shape {y.shape} does not match unaries {model.unaries.shape}")
