import time

import numpy as np
import pytest

from scipy.stats import multivariate_normal

from conftest import dense_K, mixed_instance, regression_instance
from fedmogp.elbo import GlobalPrior
from fedmogp.errors import InputError
from fedmogp.kernels import KernelSpec
from fedmogp.mogp import CLASSIFICATION, REGRESSION, Task, TaskLayout
from fedmogp.pg_inference import (
    PGState,
    factor_prior,
    initial_state,
    mean_field_sweep,
    predict,
    site_matrices,
)
from fedmogp.sparse import (
    InducingSet,
    bind,
    initial_sparse_state,
    propagate,
    select_inducing,
    sparse_elbo_terms,
    sparse_mean_field_sweep,
    sparse_predict,
    sparse_site_matrices,
    sparse_update_q,
)

UNIT = GlobalPrior([KernelSpec("rbf", 1.0, 1.0)], None, [[1.0]], [0.1])


def scalar():
    return TaskLayout([Task("r", REGRESSION, [0.0], [1.0])])


def test_select_inducing_contracts():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 10, 20)
    layout = TaskLayout([Task("r", REGRESSION, x, np.zeros(20))])
    full = select_inducing(layout, 50, seed=1)
    assert sorted(full.points[:, 0]) == sorted(x)
    half = select_inducing(layout, 10, seed=1)
    assert half.M == 10 and len(set(half.points[:, 0])) == 10 and set(half.points[:, 0]) <= set(x)
    assert np.array_equal(select_inducing(layout, 10, seed=1).points, half.points)
    # nested by prefix for a shared seed
    assert np.array_equal(select_inducing(layout, 5, seed=1).points, half.points[:5])
    with pytest.raises(InputError):
        select_inducing(layout, 0, seed=1)
    with pytest.raises(InputError):
        select_inducing(TaskLayout([Task("r", REGRESSION, np.zeros((0, 1)))]), 3, seed=1)


def test_scalar_sites_and_update():
    layout = scalar()
    ind = bind(select_inducing(layout, 1, 0), layout, UNIT)
    H, v = sparse_site_matrices(PGState.prior(0), [0.1], ind, layout)
    assert H[0, 0] == pytest.approx(10.0, rel=1e-12) and v[0] == pytest.approx(10.0, rel=1e-12)
    post = sparse_update_q(H, v, ind.factor)
    assert post.Sigma[0, 0] == pytest.approx(1 / 11, abs=1e-6)
    assert post.m[0] == pytest.approx(10 / 11, abs=1e-6)


def test_prior_recovery_without_data_weight():
    rng = np.random.default_rng(1)
    layout = TaskLayout([Task("r", REGRESSION, rng.uniform(0, 5, 6), rng.standard_normal(6))])
    ind = bind(select_inducing(layout, 3, 0), layout, UNIT)
    H, v = sparse_site_matrices(PGState.prior(0), [1e12], ind, layout)
    post = sparse_update_q(H, v, ind.factor)
    np.testing.assert_allclose(post.Sigma, ind.K_mm, atol=1e-9)


def test_empty_task_contributes_empty_blocks():
    layout = TaskLayout([Task("r", REGRESSION, [0.0, 1.0], [0.3, -0.2]),
                         Task("c", CLASSIFICATION, np.zeros((0, 1)), np.zeros(0))])
    prior = GlobalPrior([KernelSpec("rbf", 1.0, 0.5)], None, [[1.0], [0.5]], [0.1])
    ind = bind(select_inducing(layout, 2, 0), layout, prior)
    H, v = sparse_site_matrices(PGState.prior(0), [0.1], ind, layout)
    assert np.all(H[2:, :] == 0) and np.all(H[:, 2:] == 0) and np.all(v[2:] == 0)


def _converged(layout, prior, M=None, iters=6):
    F = factor_prior(dense_K(layout, prior))
    pg, post = initial_state(layout, F)
    pg, post = mean_field_sweep(pg, post, layout, prior.sigma2, F, iters)
    return F, pg, post


def test_dense_equivalence_at_full_inducing_set():
    rng = np.random.default_rng(2)
    for _ in range(5):
        n = int(rng.integers(2, 7))
        layout, prior = mixed_instance(rng, n, n, shared_inputs=True)
        F, pg_d, post_d = _converged(layout, prior)
        ind = bind(select_inducing(layout, n, seed=3), layout, prior)
        pg_s, post_s = initial_sparse_state(layout, ind)
        pg_s, post_s = sparse_mean_field_sweep(pg_s, post_s, layout, prior.sigma2, ind, 6)
        # map the inducing posterior onto the data ordering
        P = np.zeros((layout.n_total, 2 * n))
        for i in range(2):
            P[layout.block(i), ind.block(i)] = ind.maps[i]
        np.testing.assert_allclose(P @ post_s.m, post_d.m, atol=1e-6)
        np.testing.assert_allclose(P @ post_s.Sigma @ P.T, post_d.Sigma, atol=1e-6)
        # the natural-parameter vector equals the dense H v
        sites = site_matrices(pg_d, prior.sigma2, layout)
        H, v = sparse_site_matrices(pg_d, prior.sigma2, ind, layout)
        np.testing.assert_allclose(P @ v, sites.natural, atol=1e-6)
        np.testing.assert_allclose(P @ H @ P.T, sites.H, atol=1e-6)


def test_predict_at_inducing_point_and_far_field():
    rng = np.random.default_rng(4)
    layout, prior = mixed_instance(rng, 5, 5, shared_inputs=True)
    ind = bind(select_inducing(layout, 3, seed=0), layout, prior)
    pg, post = initial_sparse_state(layout, ind)
    pg, post = sparse_mean_field_sweep(pg, post, layout, prior.sigma2, ind, 3)
    for i in range(2):
        mu, _ = sparse_predict(post, ind, prior, i, ind.points[1:2])
        assert mu[0] == pytest.approx(post.m[ind.block(i)][1], abs=1e-9)
        mu, var = sparse_predict(post, ind, prior, i, [[1e4]])
        kss = np.sum(prior.W[i] ** 2 * np.array([k.phi0 for k in prior.kernels]))
        assert abs(mu[0]) < 1e-12 and var[0] == pytest.approx(kss + ind.factor.jitter, rel=1e-12)
    with pytest.raises(InputError):
        sparse_predict(post, InducingSet(ind.points), prior, 0, [[0.0]])


def test_sparse_elbo_equals_projected_model_evidence():
    # with f = A f(Z) the regression model is y ~ N(0, A K_mm A^T + sigma2 I)
    rng = np.random.default_rng(9)
    for _ in range(5):
        layout, prior = regression_instance(rng, max_points=10, n_tasks=1)
        n = layout.n_total
        for M in range(1, n + 1):
            ind = bind(select_inducing(layout, M, seed=7), layout, prior)
            pg, post = initial_sparse_state(layout, ind)
            pg, post = sparse_mean_field_sweep(pg, post, layout, prior.sigma2, ind, 1)
            A = ind.maps[0]
            cov = A @ ind.K_mm @ A.T + prior.sigma2[0] * np.eye(n)
            ref = multivariate_normal(np.zeros(n), cov, allow_singular=True).logpdf(layout.y)
            assert sparse_elbo_terms(post, pg, prior, layout, ind).total == pytest.approx(ref, abs=1e-6)


@pytest.mark.xfail(strict=True, reason="the deterministic projection makes the sparse bound the evidence of a "
                   "projected model, which is not monotone in the number of inducing points")
def test_elbo_monotone_in_nested_inducing_sets():
    rng = np.random.default_rng(5)
    violations = []
    for _ in range(10):
        n = int(rng.integers(4, 9))
        layout, prior = mixed_instance(rng, n, n, shared_inputs=True)
        vals = []
        for M in range(1, n + 1):
            ind = bind(select_inducing(layout, M, seed=7), layout, prior)
            pg, post = initial_sparse_state(layout, ind)
            pg, post = sparse_mean_field_sweep(pg, post, layout, prior.sigma2, ind, 30)
            vals.append(sparse_elbo_terms(post, pg, prior, layout, ind).total)
        violations.append(max(0.0, max(a - b for a, b in zip(vals, vals[1:]))))
    assert max(violations) <= 1e-6, violations


def test_propagate_matches_dense_moments_at_full_set():
    rng = np.random.default_rng(6)
    layout, prior = mixed_instance(rng, 4, 4, shared_inputs=True)
    ind = bind(select_inducing(layout, 4, seed=0), layout, prior)
    pg, post = initial_sparse_state(layout, ind)
    mean, second = propagate(post, ind, layout)
    assert np.allclose(mean, 0.0)
    F = factor_prior(dense_K(layout, prior))
    np.testing.assert_allclose(second, np.diag(F.K), atol=1e-9)


def test_sweep_cost_subquadratic_in_n():
    rng = np.random.default_rng(8)
    times = []
    for n in (100, 200, 400):
        x = np.sort(rng.uniform(0, 100, n))
        layout = TaskLayout([Task("r", REGRESSION, x, rng.standard_normal(n)),
                             Task("c", CLASSIFICATION, x, np.sign(rng.standard_normal(n)) + (x == 0))])
        prior = GlobalPrior([KernelSpec("rbf", 1.0, 0.02), KernelSpec("rbf", 2.0, 0.01)], None,
                            [[0.6, 0.4], [0.4, 0.6]], [0.1])
        ind = bind(select_inducing(layout, 20, seed=0), layout, prior)
        pg, post = initial_sparse_state(layout, ind)
        best = np.inf
        for _ in range(3):
            t0 = time.perf_counter()
            sparse_mean_field_sweep(pg, post, layout, prior.sigma2, ind, 2)
            best = min(best, time.perf_counter() - t0)
        times.append(best)
    assert times[2] / times[0] < 16.0, times
