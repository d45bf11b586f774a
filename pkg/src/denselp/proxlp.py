"""Proximal minimization of the LP relaxation with a dual Frank-Wolfe inner loop.

Each outer step minimizes ``LP(y) + |y - y_k|^2 / (2 lam)`` through its dual.
Only ``alpha_tilde = A alpha`` is stored (O(nm)); ``beta`` and ``gamma`` are
re-solved in closed form / by a small per-pixel QP before every conditional
gradient step, and the primal is read off the duals.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .energy import ip_energy, lp_energy, ordered_sums
from .model import EnergyModel, SolverConfig, argmax_round, as_scores

MU_EPS = 1e-10  # keeps multiplicative updates able to leave zero
STEP_DENOM_TOL = 1e-12
POLISH_EVERY = 10

TRACE_COLUMNS = (
    "phase",
    "k",
    "t",
    "wall_ms",
    "lp_energy",
    "ip_energy",
    "active_labels",
    "uncertain_pixels",
)


@dataclass
class DualState:
    alpha_tilde: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray

    @classmethod
    def zeros(cls, n: int, m: int) -> "DualState":
        return cls(np.zeros((n, m)), np.zeros(n), np.zeros((n, m)))


@dataclass
class ProxTrace:
    """Per-step log of a solve; ``duals`` holds ``(k, t, g)`` from the inner loop."""

    rows: list = field(default_factory=list)
    duals: list = field(default_factory=list)
    _start: float = field(default_factory=time.perf_counter, repr=False)

    def record(self, phase, k, t, lp, ip, active_labels, uncertain_pixels):
        self.rows.append(
            {
                "phase": phase,
                "k": int(k),
                "t": int(t),
                "wall_ms": (time.perf_counter() - self._start) * 1e3,
                "lp_energy": float(lp),
                "ip_energy": float(ip),
                "active_labels": int(active_labels),
                "uncertain_pixels": int(uncertain_pixels),
            }
        )

    def extend(self, other: "ProxTrace") -> None:
        self.rows.extend(other.rows)
        self.duals.extend(other.duals)

    def to_csv(self, timing: bool = False) -> str:
        """CSV text; ``wall_ms`` is left blank unless ``timing`` so seeded runs are reproducible."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for row in self.rows:
            out = dict(row)
            out["wall_ms"] = f"{row['wall_ms']:.3f}" if timing else ""
            out["lp_energy"] = repr(row["lp_energy"])
            out["ip_energy"] = repr(row["ip_energy"])
            writer.writerow([out[c] for c in TRACE_COLUMNS])
        return buf.getvalue()

    @staticmethod
    def parse_csv(text: str) -> list[dict]:
        rows = []
        for row in csv.DictReader(io.StringIO(text)):
            rows.append(
                {
                    "phase": row["phase"],
                    "k": int(row["k"]),
                    "t": int(row["t"]),
                    "wall_ms": float(row["wall_ms"]) if row["wall_ms"] else None,
                    "lp_energy": float(row["lp_energy"]),
                    "ip_energy": float(row["ip_energy"]),
                    "active_labels": int(row["active_labels"]),
                    "uncertain_pixels": int(row["uncertain_pixels"]),
                }
            )
        return rows


def record_state(trace, phase, k, t, model, y, levels, active_labels, uncertain_threshold=0.95):
    """Log energies of ``y`` and of its argmax rounding."""
    trace.record(
        phase,
        k,
        t,
        lp_energy(model, y, levels),
        ip_energy(model, argmax_round(y)),
        active_labels,
        int(np.count_nonzero(y.max(axis=1) < uncertain_threshold)),
    )


# --- dual blocks -----------------------------------------------------------


def _center(x):
    return x - x.mean(axis=1, keepdims=True)


def solve_beta(alpha_tilde, gamma, phi) -> np.ndarray:
    """Minimizer of the dual over ``beta``: makes every recovered row sum to one."""
    return -np.mean(alpha_tilde + gamma - phi, axis=1)


def recover_primal(alpha_tilde, beta, gamma, phi, y_k, lam) -> np.ndarray:
    return lam * (alpha_tilde + beta[:, None] + gamma - phi) + y_k


def dual_objective(alpha_tilde, beta, gamma, phi, y_k, lam, offset: float = 0.0) -> float:
    """Dual value from stored state; ``offset`` carries constants from fixed source pixels."""
    w = alpha_tilde + beta[:, None] + gamma - phi
    return float(0.5 * lam * np.sum(w * w) + np.sum(w * y_k) - np.sum(beta) + offset)


def gamma_qp_terms(alpha_tilde, phi, y_k, lam):
    """Per-pixel QP ``min_{g >= 0} g'Qg / 2 - h'g`` with ``Q = lam (I - 11'/m)``; returns h."""
    return -(lam * _center(alpha_tilde - phi) + y_k)


def gamma_qp_objective(gamma, h, lam) -> np.ndarray:
    return 0.5 * lam * np.sum(gamma * _center(gamma), axis=1) - np.sum(h * gamma, axis=1)


def solve_gamma(
    alpha_tilde,
    phi,
    y_k,
    lam: float,
    qp_max_iters: int = 100,
    qp_tol: float = 1e-8,
    gamma0=None,
) -> np.ndarray:
    """Solve the per-pixel nonnegative QPs by multiplicative updates.

    Every ``POLISH_EVERY`` iterations the support suggested by the current
    iterate is tried as an exact active set; pixels whose guess satisfies the
    KKT conditions are finished at once.  Remaining pixels stop when their
    objective changes by less than ``qp_tol`` relatively, or at
    ``qp_max_iters``.  All products with Q cost O(m).
    """
    h = gamma_qp_terms(alpha_tilde, phi, y_k, lam)
    n, m = h.shape
    u = y_k + lam * (alpha_tilde - phi)
    h_pos = np.maximum(h, 0.0)
    h_neg = np.maximum(-h, 0.0)
    gamma = np.zeros((n, m)) if gamma0 is None else np.array(gamma0, dtype=np.float64)
    gamma = np.maximum(gamma, 0.0) + MU_EPS
    q_off = lam / m  # magnitude of Q's off-diagonal entries
    q_diag_abs = lam * abs(1.0 - 1.0 / m) - q_off  # |Q| gamma = q_diag_abs * g + q_off * sum(g)

    active = np.arange(n)
    last_obj = gamma_qp_objective(gamma, h, lam)
    for it in range(qp_max_iters + 1):
        if it % POLISH_EVERY == 0 or it == qp_max_iters:
            done = _polish(gamma, active, u, h, lam)
            active = active[~done]
            if active.size == 0 or it == qp_max_iters:
                break
            obj = gamma_qp_objective(gamma[active], h[active], lam)
            if it > 0:
                change = np.abs(obj - last_obj[active])
                settled = change < qp_tol * np.maximum(np.abs(obj), 1e-12)
                active = active[~settled]
                obj = obj[~settled]
                if active.size == 0:
                    break
            last_obj[active] = obj
        g = gamma[active]
        s = g.sum(axis=1, keepdims=True)
        num = 2.0 * q_off * (s - g) + h_pos[active] + MU_EPS
        den = q_diag_abs * g + q_off * s + h_neg[active] + MU_EPS
        gamma[active] = g * num / den
    return gamma


def _polish(gamma, active, u, h, lam) -> np.ndarray:
    """Try the support implied by ``gamma[active]``; write exact solutions in place."""
    g = gamma[active]
    grad = lam * _center(g) - h[active]
    support = lam * g > grad
    free = ~support
    n_free = free.sum(axis=1)
    ua = u[active]
    theta = (np.where(free, ua, 0.0).sum(axis=1) - 1.0) / np.maximum(n_free, 1)
    cand = np.where(support, (theta[:, None] - ua) / lam, 0.0)
    ok = (
        (n_free > 0)
        & np.all(cand >= 0.0, axis=1)
        & np.all(np.where(free, ua - theta[:, None], 0.0) >= 0.0, axis=1)
    )
    gamma[active[ok]] = cand[ok]
    return ok


# --- conditional gradient and step ---------------------------------------


def conditional_gradient(model: EnergyModel, y_tilde: np.ndarray, levels: int = 10) -> np.ndarray:
    """``A s`` for the vertex ``s`` minimizing the linearized dual.

    Per label channel: ``-sum_b K_ab ([y_a >= y_b] - [y_a <= y_b])``, i.e. minus
    the difference of two ordered filters of the all-ones signal.
    """
    geq, leq = ordered_sums(model, np.ones_like(y_tilde), y_tilde, levels)
    return leq - geq


def optimal_step(alpha_tilde, As, y_tilde, lam: float, offset: float = 0.0) -> float:
    """Exact line minimizer of the dual along ``As - alpha_tilde``, clipped to [0, 1].

    ``offset`` is the change in source-pixel constants, ``E(alpha) - E(s)``.
    """
    direction = alpha_tilde - As
    denom = lam * float(np.sum(direction * direction))
    if denom < STEP_DENOM_TOL:
        return 0.0
    raw = (float(np.sum(direction * y_tilde)) + offset) / denom
    return min(max(raw, 0.0), 1.0)


def project_simplex(y: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto the probability simplex (sort based)."""
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("cannot project non-finite scores")
    m = y.shape[1]
    srt = -np.sort(-y, axis=1)
    css = np.cumsum(srt, axis=1) - 1.0
    ks = np.arange(1, m + 1)
    rho = np.count_nonzero(srt - css / ks > 0, axis=1)
    theta = css[np.arange(y.shape[0]), rho - 1] / rho
    return np.maximum(y - theta[:, None], 0.0)


# --- accelerations --------------------------------------------------------


def prune_labels(y: np.ndarray, threshold: float) -> np.ndarray:
    """Labels whose best score over all pixels reaches ``threshold`` (never empty)."""
    best = np.asarray(y).max(axis=0)
    keep = np.flatnonzero(best >= threshold)
    if keep.size == 0:
        keep = np.array([int(np.argmax(best))])
    return keep


def select_uncertain(y: np.ndarray, threshold: float, cap_fraction: float) -> np.ndarray:
    """Pixels with best score below ``threshold``, least certain first, at most ceil(cap * n)."""
    best = np.asarray(y).max(axis=1)
    cand = np.flatnonzero(best < threshold)
    cand = cand[np.argsort(best[cand], kind="stable")]
    return cand[: math.ceil(cap_fraction * best.size)]


class _Subproblem:
    """One proximal step, optionally restricted to some labels and some pixels.

    Pixels outside ``free`` keep their scores and act as fixed sources in the
    pairwise sums.
    """

    def __init__(self, model, y_k, levels, labels=None, free=None):
        self.model = model
        self.levels = levels
        y = y_k if labels is None else y_k[:, labels]
        phi = model.unaries if labels is None else model.unaries[:, labels]
        self.free = free
        if free is None:
            self.y_k, self.phi = y, phi
        else:
            self.y_k, self.phi = y[free], phi[free]
            self.frozen = y.copy()
            self.frozen[free] = 0.0
            self.scores = y.copy()

    def gradient(self, y_tilde):
        """Return ``(A s, E(s))``; ``E`` collects constants from the fixed sources."""
        if self.free is None:
            return conditional_gradient(self.model, y_tilde, self.levels), 0.0
        m = y_tilde.shape[1]
        self.scores[self.free] = y_tilde
        values = np.hstack([np.ones_like(self.frozen), self.frozen])
        geq, leq = ordered_sums(self.model, values, np.hstack([self.scores, self.scores]), self.levels)
        geq, leq = geq[self.free], leq[self.free]
        As = leq[:, :m] - geq[:, :m]
        return As, float(np.sum(geq[:, m:] - leq[:, m:]))


def _proximal_step(problem: _Subproblem, cfg: SolverConfig, trace=None, k=0) -> np.ndarray:
    lam = cfg.lam
    phi, y_k = problem.phi, problem.y_k
    alpha = np.zeros_like(y_k)
    energy_const = 0.0
    gamma = None
    for t in range(cfg.fw_steps + 1):
        gamma = solve_gamma(alpha, phi, y_k, lam, cfg.qp_max_iters, cfg.qp_tol, gamma)
        beta = solve_beta(alpha, gamma, phi)
        if trace is not None:
            trace.duals.append((k, t, dual_objective(alpha, beta, gamma, phi, y_k, lam, energy_const)))
        y_tilde = recover_primal(alpha, beta, gamma, phi, y_k, lam)
        if t == cfg.fw_steps:
            break
        As, energy_s = problem.gradient(y_tilde)
        delta = optimal_step(alpha, As, y_tilde, lam, energy_const - energy_s)
        alpha = (1.0 - delta) * alpha + delta * As
        energy_const = (1.0 - delta) * energy_const + delta * energy_s
    return project_simplex(y_tilde)


def _check_start(model, y0):
    y = as_scores(y0, feasible=True)
    if y.shape != model.unaries.shape:
        raise ValueError(f"initial scores {y.shape} do not match unaries {model.unaries.shape}")
    return y.copy()


def prox_solve(model: EnergyModel, y0, cfg: SolverConfig | None = None):
    """Run ``cfg.outer_steps`` proximal steps from ``y0``; returns ``(y, trace)``."""
    cfg = cfg or SolverConfig()
    y = _check_start(model, y0)
    trace = ProxTrace()
    record_state(trace, "init", 0, 0, model, y, cfg.levels, model.m, cfg.uncertain_threshold)
    for k in range(1, cfg.outer_steps + 1):
        y = _proximal_step(_Subproblem(model, y, cfg.levels), cfg, trace, k)
        record_state(trace, "proxlp", k, cfg.fw_steps, model, y, cfg.levels, model.m, cfg.uncertain_threshold)
    return y, trace


VARIANTS = {"labels_only": "proxlp_l", "labels_and_pixels": "proxlp_acc"}


def prox_solve_accelerated(model: EnergyModel, y0, cfg: SolverConfig | None = None, variant="labels_only"):
    """Proximal solve restricted to significant labels and, optionally, uncertain pixels.

    Labels scoring below ``label_prune_threshold`` everywhere are dropped
    before each outer step.  With ``labels_and_pixels``, after
    ``switch_after`` steps only the least certain pixels are optimized; the
    rest stay fixed and enter the pairwise sums as sources.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    cfg = cfg or SolverConfig()
    phase = VARIANTS[variant]
    y = _check_start(model, y0)
    trace = ProxTrace()
    record_state(trace, "init", 0, 0, model, y, cfg.levels, model.m, cfg.uncertain_threshold)
    for k in range(1, cfg.outer_steps + 1):
        labels = prune_labels(y, cfg.label_prune_threshold)
        if labels.size < model.m:
            y = _restrict_labels(y, labels)
            label_arg = labels
        else:
            label_arg = None
        free = None
        if variant == "labels_and_pixels" and k > cfg.switch_after:
            free = select_uncertain(y, cfg.uncertain_threshold, cfg.uncertain_fraction_cap)
            if free.size == 0:
                record_state(trace, phase, k, 0, model, y, cfg.levels, labels.size, cfg.uncertain_threshold)
                break
        sub = _proximal_step(_Subproblem(model, y, cfg.levels, label_arg, free), cfg, trace, k)
        if free is None:
            y[:, labels] = sub
        else:
            y[np.ix_(free, labels)] = sub
        record_state(trace, phase, k, cfg.fw_steps, model, y, cfg.levels, labels.size, cfg.uncertain_threshold)
    return y, trace


def _restrict_labels(y, labels):
    """Zero the pruned columns and renormalize; rows left empty become uniform on ``labels``."""
    out = np.zeros_like(y)
    out[:, labels] = y[:, labels]
    total = out.sum(axis=1, keepdims=True)
    empty = total[:, 0] <= 0
    out[~empty] /= total[~empty]
    out[np.ix_(np.flatnonzero(empty), labels)] = 1.0 / labels.size
    return out
