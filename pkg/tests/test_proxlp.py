import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from denselp.energy import ip_energy, kernel_sum, lp_energy
from denselp.fixtures import synthetic_problem
from denselp.model import EnergyModel, FeatureField, GaussianKernel, SolverConfig, argmax_round, labels_to_scores, uniform_scores
from denselp.permutohedral import dense_ordered_filter, lattice_kernel_matrix
from denselp.proxlp import (
    ProxTrace,
    conditional_gradient,
    dual_objective,
    gamma_qp_objective,
    gamma_qp_terms,
    optimal_step,
    project_simplex,
    prox_solve,
    prox_solve_accelerated,
    prune_labels,
    recover_primal,
    select_uncertain,
    solve_beta,
    solve_gamma,
)


def unary_only(phi):
    phi = np.asarray(phi, dtype=np.float64)
    return EnergyModel(phi, [0.0], [np.zeros((phi.shape[0], 2))])


def projected_gradient_qp(h, lam, iters=20_000):
    """Reference solver for min_{g >= 0} g'Qg/2 - h'g with Q = lam (I - 11'/m).

    The step is 1/L with L = lam, the largest eigenvalue of Q; much smaller
    fixed steps crawl along Q's flat all-ones direction.
    """
    step = 1.0 / lam
    g = np.zeros_like(h)
    for _ in range(iters):
        grad = lam * (g - g.mean(axis=1, keepdims=True)) - h
        g = np.maximum(g - step * grad, 0.0)
    return g


def vertex_minimum(K, y_tilde):
    """min over vertices of C of <A s, y> for one label channel, by enumeration."""
    n = len(y_tilde)
    pairs = [(a, b) for a in range(n) for b in range(n) if a != b]
    best = np.inf
    for choice in itertools.product((0, 1), repeat=len(pairs)):
        As = np.zeros(n)
        for (a, b), first in zip(pairs, choice):
            half = K[a, b] / 2.0
            # alpha^1 = K/2 moves mass from a to b; alpha^2 the other way
            sign = 1.0 if first else -1.0
            As[b] += sign * half
            As[a] -= sign * half
        best = min(best, float(As @ y_tilde))
    return best


# --- beta ----------------------------------------------------------------------


def test_beta_examples():
    phi = np.array([[1.0, 3.0]])
    zeros = np.zeros((1, 2))
    # the minimizer makes the recovered row sum to one: beta = mean(phi) here
    np.testing.assert_allclose(solve_beta(zeros, zeros, phi), [2.0])
    y = recover_primal(zeros, solve_beta(zeros, zeros, phi), zeros, phi, np.array([[0.5, 0.5]]), 0.1)
    assert y.sum() == pytest.approx(1.0)
    np.testing.assert_array_equal(solve_beta(np.zeros((3, 4)), np.zeros((3, 4)), np.zeros((3, 4))), 0.0)


@settings(max_examples=25)
@given(st.integers(0, 2**31))
def test_beta_is_stationary(seed):
    rng = np.random.default_rng(seed)
    n, m, lam = 5, int(rng.integers(2, 6)), 0.1
    alpha, gamma, phi = rng.normal(size=(3, n, m))
    gamma = np.abs(gamma)
    y_k = rng.dirichlet(np.ones(m), n)
    beta = solve_beta(alpha, gamma, phi)
    h = 1e-5
    grad = np.empty(n)
    for a in range(n):
        e = np.zeros(n)
        e[a] = h
        up = dual_objective(alpha, beta + e, gamma, phi, y_k, lam)
        down = dual_objective(alpha, beta - e, gamma, phi, y_k, lam)
        grad[a] = (up - down) / (2 * h)
    assert np.linalg.norm(grad) < 1e-6


# --- gamma ----------------------------------------------------------------------


def test_gamma_qp_matrix_two_labels():
    Q = np.array([[0.05, -0.05], [-0.05, 0.05]])
    rng = np.random.default_rng(0)
    g, h = rng.random((2, 4, 2))
    expected = 0.5 * np.einsum("ni,ij,nj->n", g, Q, g) - (h * g).sum(axis=1)
    np.testing.assert_allclose(gamma_qp_objective(g, h, 0.1), expected, rtol=1e-12)


def test_gamma_linear_terms_match_dense_q():
    rng = np.random.default_rng(1)
    m, lam = 4, 0.3
    alpha, phi = rng.normal(size=(2, 3, m))
    y_k = rng.dirichlet(np.ones(m), 3)
    Q = lam * (np.eye(m) - np.ones((m, m)) / m)
    linear = (alpha - phi) @ Q.T + y_k
    np.testing.assert_allclose(gamma_qp_terms(alpha, phi, y_k, lam), -linear, rtol=1e-12)


def test_gamma_zero_when_linear_term_nonnegative():
    # y_k >= 0 and alpha = phi gives a nonnegative linear coefficient
    rng = np.random.default_rng(2)
    phi = rng.normal(size=(10, 3))
    y_k = rng.dirichlet(np.ones(3), 10)
    gamma = solve_gamma(phi.copy(), phi, y_k, 0.1)
    assert np.linalg.norm(gamma, axis=1).max() <= 1e-6


def test_gamma_matches_projected_gradient():
    rng = np.random.default_rng(3)
    n, m, lam = 40, 3, 0.1
    alpha = rng.normal(scale=5.0, size=(n, m))
    phi = rng.normal(scale=5.0, size=(n, m))
    y_k = rng.dirichlet(np.ones(m), n)
    gamma = solve_gamma(alpha, phi, y_k, lam, qp_max_iters=20_000, qp_tol=0.0)
    h = gamma_qp_terms(alpha, phi, y_k, lam)
    ref = projected_gradient_qp(h, lam)
    np.testing.assert_allclose(
        gamma_qp_objective(gamma, h, lam), gamma_qp_objective(ref, h, lam), atol=1e-4
    )
    grad = lam * (gamma - gamma.mean(axis=1, keepdims=True)) - h
    assert np.all(gamma >= 0)
    assert np.abs(np.minimum(gamma, grad)).max() <= 1e-8


def test_gamma_default_stopping_is_accurate_and_nonnegative():
    rng = np.random.default_rng(4)
    alpha, phi = rng.normal(size=(2, 200, 5))
    y_k = rng.dirichlet(np.ones(5), 200)
    gamma = solve_gamma(alpha, phi, y_k, 0.1)
    h = gamma_qp_terms(alpha, phi, y_k, 0.1)
    exact = solve_gamma(alpha, phi, y_k, 0.1, qp_max_iters=20_000, qp_tol=0.0)
    assert np.all(gamma >= 0)
    np.testing.assert_allclose(gamma_qp_objective(gamma, h, 0.1), gamma_qp_objective(exact, h, 0.1), atol=1e-6)


# --- conditional gradient -----------------------------------------------------------


def test_equal_channel_has_zero_gradient():
    problem = synthetic_problem(0, 16, 16)
    model = problem.model()
    y = np.random.default_rng(0).random((model.n, model.m))
    y[:, 2] = 0.4
    assert np.abs(conditional_gradient(model, y)[:, 2]).max() <= 1e-5


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_conditional_gradient_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    n = 3
    model = EnergyModel(np.zeros((n, 2)), [rng.uniform(0.1, 3.0)], [rng.normal(size=(n, 2))], exact=True)
    y_tilde = rng.normal(size=(n, 2))
    As = conditional_gradient(model, y_tilde)
    K = model.kernel_matrix()
    for i in range(2):
        assert As[:, i] @ y_tilde[:, i] <= vertex_minimum(K, y_tilde[:, i]) + 1e-9
        # distinct scores give a unique minimizing vertex, so A s itself must agree
        brute = np.zeros(n)
        for a in range(n):
            for b in range(n):
                if a != b:
                    brute[a] -= K[a, b] * np.sign(y_tilde[a, i] - y_tilde[b, i])
        np.testing.assert_allclose(As[:, i], brute, atol=1e-6)


def test_conditional_gradient_against_dense_kernels():
    problem = synthetic_problem(1, 15, 20)
    model = problem.model()
    rng = np.random.default_rng(1)
    # scores on the level values 0, 1/9, ..., 1 bin exactly, so only the kernel is approximated
    y = rng.integers(0, 10, (model.n, model.m)) / 9.0
    y[:2] = [[0.0] * 4, [1.0] * 4]
    As = conditional_gradient(model, y)

    # normalized by each kernel's own row sums: on image data the 5-D lattice
    # underestimates total kernel mass, which is not what this checks
    exact_model = problem.model(exact=True)
    exact = conditional_gradient(exact_model, y) / exact_model.kernel_matrix().sum(axis=1)[:, None]
    approx = As / kernel_sum(model, np.ones((model.n, 1)))
    assert np.abs(approx - exact).max() <= 0.10 * np.abs(exact).max()

    K = sum(w * lattice_kernel_matrix(lat) for w, lat in zip(model.weights, model.lattices))
    ones = np.ones_like(y)
    binned = dense_ordered_filter(K, ones, y, "leq", 10) - dense_ordered_filter(K, ones, y, "geq", 10)
    np.testing.assert_allclose(As, binned, rtol=1e-9, atol=1e-9)


def test_frank_wolfe_gap_nonnegative():
    rng = np.random.default_rng(5)
    model = EnergyModel(np.zeros((8, 3)), [1.0], [rng.normal(size=(8, 2))], exact=True)
    # any convex combination of vertices lies in C
    weights = rng.dirichlet(np.ones(4))
    alpha = sum(w * conditional_gradient(model, rng.normal(size=(8, 3))) for w in weights)
    for _ in range(10):
        y_tilde = rng.normal(size=(8, 3))
        As = conditional_gradient(model, y_tilde)
        assert np.sum((alpha - As) * y_tilde) >= -1e-6


# --- step size ----------------------------------------------------------------------


def test_step_examples():
    alpha = np.array([[1.0, 1.0]])
    As = np.zeros((1, 2))
    assert optimal_step(alpha, As, np.array([[0.15, 0.15]]), 0.1) == 1.0
    assert optimal_step(alpha, As, np.array([[0.02, 0.01]]), 0.1) == pytest.approx(0.15)
    assert optimal_step(alpha, As, np.array([[-0.15, 0.0]]), 0.1) == 0.0
    assert optimal_step(alpha, alpha.copy(), np.ones((1, 2)), 0.1) == 0.0


@settings(max_examples=30)
@given(st.integers(0, 2**31))
def test_step_minimizes_dual_along_the_segment(seed):
    rng = np.random.default_rng(seed)
    n, m, lam = 6, 3, 0.1
    alpha, As, phi = rng.normal(size=(3, n, m))
    gamma = np.abs(rng.normal(size=(n, m)))
    y_k = rng.dirichlet(np.ones(m), n)
    beta = solve_beta(alpha, gamma, phi)
    y_tilde = recover_primal(alpha, beta, gamma, phi, y_k, lam)
    delta = optimal_step(alpha, As, y_tilde, lam)

    def g(d):
        return dual_objective(alpha + d * (As - alpha), beta, gamma, phi, y_k, lam)

    best = g(delta)
    for d in rng.random(100):
        assert best <= g(d) + 1e-8


# --- primal recovery and projection -------------------------------------------------


def test_recover_primal():
    rng = np.random.default_rng(6)
    y_k = rng.dirichlet(np.ones(3), 4)
    zeros = np.zeros((4, 3))
    np.testing.assert_array_equal(recover_primal(zeros, np.zeros(4), zeros, zeros, y_k, 0.1), y_k)

    alpha, gamma, phi = rng.normal(size=(3, 4, 3))
    beta = rng.normal(size=4)
    out = recover_primal(alpha, beta, gamma, phi, y_k, 0.1)
    for a in range(4):
        for i in range(3):
            term = 0.1 * alpha[a, i] + 0.1 * beta[a] + 0.1 * gamma[a, i] - 0.1 * phi[a, i] + y_k[a, i]
            assert out[a, i] == pytest.approx(term, rel=1e-13, abs=1e-15)


def test_projection_examples():
    np.testing.assert_allclose(project_simplex(np.array([[0.3, 0.7]])), [[0.3, 0.7]])
    np.testing.assert_allclose(project_simplex(np.array([[0.5, 0.7]])), [[0.4, 0.6]])
    np.testing.assert_array_equal(project_simplex(np.array([[-1.0, 0.0]])), [[0.0, 1.0]])


def bisection_projection(row):
    lo, hi = row.min() - 1.0, row.max()
    for _ in range(200):
        mid = (lo + hi) / 2
        if np.maximum(row - mid, 0).sum() > 1:
            lo = mid
        else:
            hi = mid
    return np.maximum(row - (lo + hi) / 2, 0)


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 8)), elements=st.floats(-10, 10)))
def test_projection_properties(y):
    p = project_simplex(y)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(project_simplex(p), p, atol=1e-12)
    for row, got in zip(y, p):
        np.testing.assert_allclose(got, bisection_projection(row), atol=1e-9)


# --- acceleration helpers -----------------------------------------------------------


def test_prune_labels():
    np.testing.assert_array_equal(prune_labels(uniform_scores(5, 4), 0.01), [0, 1, 2, 3])
    y = np.full((4, 3), 0.005)
    y[:, 0] = 0.5
    y[:, 1] = 0.495
    np.testing.assert_array_equal(prune_labels(y, 0.01), [0, 1])
    np.testing.assert_array_equal(prune_labels(labels_to_scores([0, 2, 2], 4), 0.01), [0, 2])
    np.testing.assert_array_equal(prune_labels(uniform_scores(3, 4), 0.9), [0])


def test_select_uncertain():
    assert select_uncertain(labels_to_scores([0, 1, 1], 2), 0.95, 0.1).size == 0
    assert select_uncertain(uniform_scores(100, 4), 0.95, 0.1).size == 10
    y = labels_to_scores(np.zeros(100, dtype=int), 2)
    y[[7, 42, 90]] = [[0.6, 0.4], [0.9, 0.1], [0.5, 0.5]]
    np.testing.assert_array_equal(select_uncertain(y, 0.95, 1.0), [90, 7, 42])


# --- solvers ------------------------------------------------------------------------


def test_unary_only_single_step_is_a_projection():
    rng = np.random.default_rng(7)
    phi = rng.normal(size=(30, 4))
    y0 = rng.dirichlet(np.ones(4), 30)
    y, _ = prox_solve(unary_only(phi), y0, SolverConfig(outer_steps=1))
    np.testing.assert_allclose(y, project_simplex(y0 - 0.1 * phi), atol=1e-8)


def test_unary_only_converges_to_argmin():
    rng = np.random.default_rng(8)
    phi = rng.normal(size=(30, 4))
    phi[np.arange(30), rng.integers(0, 4, 30)] -= 3.0  # a clear winner per pixel
    y, _ = prox_solve(unary_only(phi), uniform_scores(30, 4), SolverConfig(outer_steps=200))
    np.testing.assert_allclose(y, labels_to_scores(phi.argmin(axis=1), 4), atol=1e-6)


def test_unary_optimum_is_a_fixed_point():
    rng = np.random.default_rng(9)
    phi = rng.normal(size=(20, 3))
    y0 = labels_to_scores(phi.argmin(axis=1), 3)
    _, trace = prox_solve(unary_only(phi), y0, SolverConfig(outer_steps=5))
    for variant in ("labels_only", "labels_and_pixels"):
        y, acc_trace = prox_solve_accelerated(unary_only(phi), y0, SolverConfig(outer_steps=5, switch_after=0), variant)
        np.testing.assert_allclose(y, y0, atol=1e-6)
        assert all(row["uncertain_pixels"] == 0 for row in acc_trace.rows)
    y, _ = prox_solve(unary_only(phi), y0, SolverConfig(outer_steps=5))
    np.testing.assert_allclose(y, y0, atol=1e-6)
    assert len({row["lp_energy"] for row in trace.rows}) == 1


def test_strong_smoothness_makes_pixels_agree():
    phi = np.array([[0.0, 1.0], [1.5, 0.0]])
    image = FeatureField(2, 1, np.zeros((2, 3)))
    model = EnergyModel.from_image(phi, image, [GaussianKernel(5.0, "spatial", (1.0,))], exact=True)
    energies = {
        labels: ip_energy(model, labels_to_scores(labels, 2)) for labels in itertools.product(range(2), repeat=2)
    }
    best = min(energies, key=energies.get)
    assert best == (1, 1)  # the label with the lower mean unary
    y, _ = prox_solve(model, uniform_scores(2, 2), SolverConfig(outer_steps=30))
    assert tuple(argmax_round(y).argmax(axis=1)) == best


def test_prox_solve_rejects_infeasible_start():
    model = unary_only(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        prox_solve(model, np.full((3, 2), 0.9))
    with pytest.raises(ValueError):
        prox_solve(model, uniform_scores(4, 2))
    with pytest.raises(ValueError):
        prox_solve_accelerated(model, uniform_scores(3, 2), variant="fast")


@pytest.fixture(scope="module")
def fixture_run():
    problem = synthetic_problem(0)
    model = problem.model()
    y, trace = prox_solve(model, uniform_scores(model.n, model.m))
    return model, y, trace


def test_dual_never_increases_within_a_step(fixture_run):
    _, _, trace = fixture_run
    for (k1, _, g1), (k2, _, g2) in zip(trace.duals, trace.duals[1:]):
        if k1 == k2:
            assert g2 <= g1 + 1e-6


def test_outer_steps_decrease_lp_energy(fixture_run):
    model, y, trace = fixture_run
    lp = [row["lp_energy"] for row in trace.rows]
    assert len(lp) == 11
    for before, after in zip(lp, lp[1:]):
        assert after <= before + 1e-3 * abs(before)
    assert trace.rows[-1]["lp_energy"] == lp_energy(model, y)


def test_zero_pruning_threshold_reproduces_prox_solve(fixture_run):
    model, y, trace = fixture_run
    cfg = SolverConfig(label_prune_threshold=0.0)
    y_l, trace_l = prox_solve_accelerated(model, uniform_scores(model.n, model.m), cfg, "labels_only")
    np.testing.assert_array_equal(y_l, y)
    assert [r["lp_energy"] for r in trace_l.rows] == [r["lp_energy"] for r in trace.rows]


def test_label_pruning_stays_close_to_full_solve(fixture_run):
    model, y, _ = fixture_run
    y_l, trace_l = prox_solve_accelerated(model, uniform_scores(model.n, model.m), SolverConfig(), "labels_only")
    full = ip_energy(model, argmax_round(y))
    assert abs(ip_energy(model, argmax_round(y_l)) - full) <= 0.05 * abs(full)
    assert {r["phase"] for r in trace_l.rows} == {"init", "proxlp_l"}


def test_pixel_restriction_keeps_frozen_rows():
    model = synthetic_problem(2, 32, 32).model()
    y0 = uniform_scores(model.n, model.m)
    y1, _ = prox_solve_accelerated(model, y0, SolverConfig(outer_steps=1), "labels_and_pixels")
    y2, trace = prox_solve_accelerated(model, y0, SolverConfig(outer_steps=2, switch_after=1), "labels_and_pixels")
    labels = prune_labels(y1, 0.01)
    assert labels.size == model.m  # no pruning, so step 2 starts from y1 itself
    free = select_uncertain(y1, 0.95, 0.10)
    frozen = np.setdiff1d(np.arange(model.n), free)
    assert 0 < free.size <= int(np.ceil(0.1 * model.n))
    np.testing.assert_array_equal(y2[frozen], y1[frozen])
    assert not np.array_equal(y2[free], y1[free])
    np.testing.assert_allclose(y2.sum(axis=1), 1.0, atol=1e-9)
    assert [r["phase"] for r in trace.rows] == ["init", "proxlp_acc", "proxlp_acc"]


# --- trace --------------------------------------------------------------------------


def test_trace_csv_round_trip():
    trace = ProxTrace()
    trace.record("init", 0, 0, 1234.5678901234567, -0.1 / 3, 4, 17)
    trace.record("proxlp", 1, 5, 1e-300, 2.0**60, 3, 0)
    text = trace.to_csv()
    assert text.splitlines()[0] == "phase,k,t,wall_ms,lp_energy,ip_energy,active_labels,uncertain_pixels"
    rows = ProxTrace.parse_csv(text)
    for parsed, original in zip(rows, trace.rows):
        assert parsed["wall_ms"] is None
        assert {k: v for k, v in parsed.items() if k != "wall_ms"} == {
            k: v for k, v in original.items() if k != "wall_ms"
        }
    timed = ProxTrace.parse_csv(trace.to_csv(timing=True))
    assert timed[1]["wall_ms"] >= timed[0]["wall_ms"] >= 0
