import math

import numpy as np
import pytest
from scipy import sparse
from scipy.optimize import minimize

from rmiso.exceptions import ConfigurationError, DomainError
from rmiso.inner_solvers import InnerTolerance, NonnegRowBall, nnls_l1, nnls_l1_objective
from rmiso.problems import (LogRegProblem, NmfProblem, QuadProblem, dense_logreg,
                            desk_logreg, logreg_value_grad, nmf_component_surrogate,
                            nmf_dictionary_update, regularizer, regularizer_grad,
                            shard_by_label, synthetic_nmf, synthetic_quadratic)
from rmiso.sampling import IndexSpace, Sampler, Cyclic
from rmiso.solver import Solver, SolverConfig, Variant
from rmiso.surrogate import VariationalNmfSurrogate, make_average, replace

TIGHT = InnerTolerance(grad_tol=1e-12, max_iters=100_000)


# -- quadratics ------------------------------------------------------------------

def test_quadratic_optimum_is_weighted_mean():
    rng = np.random.default_rng(0)
    centers = rng.normal(size=(6, 3))
    w = rng.dirichlet(np.ones(6))
    prob = QuadProblem(centers, np.full(6, 1.7), weights=w)
    assert np.allclose(prob.optimum, w @ centers, atol=1e-12)
    assert np.linalg.norm(prob.gradient(prob.optimum)) <= 1e-12


def test_quadratic_rejects_bad_inputs():
    with pytest.raises(ConfigurationError):
        QuadProblem(np.zeros(3))
    with pytest.raises(ConfigurationError):
        QuadProblem(np.zeros((2, 2)), [1.0, -1.0])
    with pytest.raises(ConfigurationError):
        QuadProblem(np.zeros((2, 2)), surrogate_scale=0.5)


def test_quadratic_surrogates_majorize():
    prob = synthetic_quadratic(5, 4, seed=1)
    rng = np.random.default_rng(1)
    for v in range(5):
        a = rng.normal(size=4)
        rec = prob.surrogate(v, a)
        for _ in range(20):
            x = rng.normal(size=4) * 3
            assert rec.value(x) >= prob.component_value(v, x) - 1e-12


# -- logistic regression ---------------------------------------------------------

def test_regularizer_examples_and_bounds():
    for p in (1, 5, 60):
        assert regularizer(np.ones(p)) == pytest.approx(0.005 * p)
    rng = np.random.default_rng(2)
    for _ in range(200):
        t = rng.normal(size=7) * 10 ** rng.uniform(-3, 3)
        assert 0.0 <= regularizer(t) <= 0.01 * 7
    assert np.array_equal(regularizer_grad(np.zeros(4)), np.zeros(4))
    t = rng.normal(size=5)
    assert np.allclose(regularizer_grad(t), 0.02 * t / (1 + t * t) ** 2)


def test_logistic_value_at_origin():
    prob = desk_logreg(200, 20, batch=40, seed=3)
    for v in range(prob.n_components):
        val, grad = logreg_value_grad(prob, v, np.zeros(prob.dim))
        assert val == pytest.approx(math.log(2), abs=1e-15)


def test_logistic_gradient_matches_finite_differences():
    prob = desk_logreg(300, 25, batch=50, seed=4)
    rng = np.random.default_rng(4)
    h = 1e-6
    for v in range(prob.n_components):
        t = rng.normal(size=prob.dim)
        _, g = logreg_value_grad(prob, v, t)
        fd = np.array([(prob.component_value(v, t + h * e) - prob.component_value(v, t - h * e))
                       / (2 * h) for e in np.eye(prob.dim)])
        assert np.linalg.norm(g - fd) <= 1e-5 * max(1.0, np.linalg.norm(g))


def test_logistic_dimension_mismatch():
    prob = desk_logreg(100, 20, batch=50, seed=0)
    with pytest.raises(DomainError):
        prob.component_value(0, np.zeros(3))


def test_logistic_smoothness_estimate_holds():
    prob = dense_logreg(5, 6, rows_per=30, seed=5)
    rng = np.random.default_rng(5)
    for v in range(5):
        L = prob.row_smoothness[v]
        for _ in range(50):
            a, b = rng.normal(size=(2, 6)) * 2
            ga = logreg_value_grad(prob, v, a)[1]
            gb = logreg_value_grad(prob, v, b)[1]
            assert np.linalg.norm(ga - gb) <= L * np.linalg.norm(a - b) + 1e-12


def test_logistic_validation():
    X = sparse.csr_matrix(np.eye(4))
    with pytest.raises(ConfigurationError):
        LogRegProblem(X, [1, 0, 1, -1], [[0, 1], [2, 3]])
    with pytest.raises(ConfigurationError):
        LogRegProblem(X, [1, 1, -1, -1], [[0, 1, 2], []])
    with pytest.raises(ConfigurationError):
        LogRegProblem(X, [1, -1, -1, -1], [[0, 1], [2, 3]], heterogeneous=True)


# -- sharding --------------------------------------------------------------------

def test_shard_single_label_remainder():
    shards = shard_by_label(np.zeros(250), 100)
    assert [len(s) for s in shards] == [100, 100, 50]


def test_shard_two_labels():
    labels = np.repeat([3, 7], 100)
    shards = shard_by_label(labels, 100, num_vertices=2)
    assert len(shards) == 2
    assert all(len(np.unique(labels[s])) == 1 for s in shards)


def test_shard_permutation_invariance():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 3, size=333)
    ids = rng.permutation(333)
    base = shard_by_label(labels, 40, key=ids)
    perm = rng.permutation(333)
    shuffled = shard_by_label(labels[perm], 40, key=ids[perm])
    assert [len(s) for s in base] == [len(s) for s in shuffled]
    for a, b in zip(base, shuffled):
        assert np.array_equal(ids[a], ids[perm][b])


def test_shard_errors():
    with pytest.raises(DomainError):
        shard_by_label([], 10)
    with pytest.raises(ConfigurationError):
        shard_by_label([0, 1, 2], 10, num_vertices=2)
    with pytest.raises(ConfigurationError):
        shard_by_label(np.zeros(30), 10, num_vertices=2)
    with pytest.raises(ConfigurationError):
        shard_by_label([0, 1], 0)


# -- NMF --------------------------------------------------------------------------

def _dict_update(A, B, rho):
    # p = r = d = 1 with H = sqrt(A) gives H H^T = A and X H^T = B
    h = math.sqrt(A)
    rec = VariationalNmfSurrogate(np.array([[B / h]]), np.array([[h]]), 0.0, np.array([[0.3]]))
    return nmf_dictionary_update(make_average([rec]), np.array([[0.3]]), rho=rho, tol=TIGHT)


def test_dictionary_update_interior():
    assert _dict_update(1.0, 0.5, rho=0.0)[0, 0] == pytest.approx(0.5, abs=1e-9)


def test_dictionary_update_active_cap():
    assert _dict_update(1.0, 2.0, rho=0.0)[0, 0] == pytest.approx(1.0, abs=1e-9)


def test_dictionary_update_needs_one_of_rho_or_radius():
    prob = NmfProblem([np.ones((2, 3))], rank=1)
    rec = prob.surrogate(0, prob.initial_point())
    with pytest.raises(ConfigurationError):
        nmf_dictionary_update(make_average([rec]), rec.anchor)
    with pytest.raises(ConfigurationError):
        nmf_dictionary_update(make_average([rec]), rec.anchor, rho=1.0, radius=1.0)


def test_dictionary_update_matches_grid_oracle():
    rng = np.random.default_rng(7)
    fset = NonnegRowBall()
    for _ in range(5):
        X = rng.random((1, 8))
        W0 = fset.project(rng.random((1, 2)))
        prob = NmfProblem([X], rank=2, alpha=0.05, tol=TIGHT)
        agg = make_average([prob.surrogate(0, W0)])
        W = nmf_dictionary_update(agg, W0, rho=0.5, tol=TIGHT)

        def obj(w):
            w = w.reshape(1, 2)
            return agg.value(w) + 0.25 * np.sum((w - W0) ** 2)

        g = np.linspace(0, 1, 400)
        G = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
        G = G[np.einsum("ij,ij->i", G, G) <= 1]
        best = G[np.argmin([obj(x) for x in G])]
        res = minimize(obj, best, method="SLSQP", bounds=[(0, None)] * 2,
                       constraints=[{"type": "ineq", "fun": lambda w: 1 - w @ w}],
                       options={"ftol": 1e-14})
        assert np.linalg.norm(W.ravel() - res.x) <= 1e-3
        assert obj(W.ravel()) <= obj(res.x) + 1e-9


def test_nmf_surrogate_exact_fit():
    rng = np.random.default_rng(8)
    W = NonnegRowBall().project(rng.random((6, 2)))
    X = W @ rng.random((2, 9))
    prob = NmfProblem([X], rank=2, alpha=0.0, tol=TIGHT)
    rec = nmf_component_surrogate(prob, 0, W)
    assert rec.value(W) == pytest.approx(0.0, abs=1e-8)
    assert prob.codes[0] is rec.H


def test_nmf_surrogates_majorize_resolved_objective():
    shards, _ = synthetic_nmf(n_shards=3, p=6, d=8, rank=2, seed=9)
    prob = NmfProblem(shards, rank=2, alpha=0.05, tol=TIGHT)
    fset = prob.feasible_set
    rng = np.random.default_rng(9)
    W0 = prob.initial_point(9)
    recs = [prob.surrogate(v, W0) for v in range(3)]
    for v, rec in enumerate(recs):
        assert rec.value(W0) >= prob.component_value(v, W0) - 1e-9
    for _ in range(100):
        W = fset.project(rng.random((6, 2)) * 1.5)
        for v, rec in enumerate(recs):
            H = nnls_l1(shards[v], W, 0.05, TIGHT)
            assert rec.value(W) >= nnls_l1_objective(shards[v], W, H, 0.05) - 1e-9


def test_nmf_replacement_matches_full_recompute():
    shards, _ = synthetic_nmf(n_shards=4, p=5, d=6, rank=2, seed=10)
    prob = NmfProblem(shards, rank=2)
    W = prob.initial_point(10)
    avg = make_average([prob.surrogate(v, W) for v in range(4)])
    rng = np.random.default_rng(10)
    for _ in range(30):
        v = int(rng.integers(4))
        W = prob.feasible_set.project(W + 0.1 * rng.normal(size=W.shape))
        replace(avg, v, prob.surrogate(v, W))
    full = avg.recomputed()
    assert np.allclose(avg.A, full.A, rtol=0, atol=1e-12)
    assert np.allclose(avg.B, full.B, rtol=0, atol=1e-12)


def test_nmf_validation():
    with pytest.raises(ConfigurationError):
        NmfProblem([-np.ones((2, 2))], rank=1)
    with pytest.raises(ConfigurationError):
        NmfProblem([np.ones((2, 2)), np.ones((3, 2))], rank=1)
    with pytest.raises(ConfigurationError):
        NmfProblem([np.ones((2, 2))], rank=0)
    with pytest.raises(ConfigurationError):
        NmfProblem([], rank=1)


@pytest.mark.slow
@pytest.mark.parametrize("variant", list(Variant))
def test_nmf_objective_decreases(variant):
    for seed in range(10):
        shards, _ = synthetic_nmf(n_shards=5, p=12, d=20, rank=3, seed=seed)
        prob = NmfProblem(shards, rank=3)
        W0 = prob.initial_point(seed)
        f0 = prob.value(W0)
        rho = 0.0 if variant is Variant.MISO else 50.0
        cfg = SolverConfig(variant, rho=rho, max_iters=500, seed=seed, record_every=500,
                           invariant_checks=False)
        solver = Solver(prob, cfg, Sampler(Cyclic(), IndexSpace.uniform(5), seed), theta0=W0)
        summary = solver.run()
        assert prob.value(summary.theta) < f0
