"""Inducing-point client inference.

All tasks share the same M inducing locations, sampled uniformly from the
client's own inputs.  Latent values at the data are replaced by the
conditional mean of the inducing outputs of the same task,
``f_i(X_i) = A_i f_i(Z)`` with ``A_i = K_i(X_i, Z) K_i(Z, Z)^-1``, which turns
every site into a Gaussian factor on the ``T*M`` inducing outputs.  Per
iteration the cost is ``O((T M)^3 + N M^2)``; no N x N matrix is formed.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve

from .elbo import ELBOBreakdown, compose, gaussian_kl, likelihood_terms
from .errors import InputError
from .kernels import _as_points, stabilized_cholesky
from .mogp import cross_matrix
from .pg_inference import (
    GaussianPosterior,
    PGState,
    VARIANCE_FLOOR,
    coincidence,
    factor_prior,
    gaussian_update,
    pg_from_moments,
    prior_variance,
)


class SparsePosterior(GaussianPosterior):
    """q(f(Z)) = N(m, Sigma) over the stacked inducing outputs, task-major."""


@dataclass(frozen=True, eq=False)
class InducingSet:
    """Shared inducing inputs plus, once bound to a prior, the matrices built on them.

    ``K_mm`` is the (T*M) x (T*M) inducing covariance including jitter,
    ``K_mn[i]`` the M x N_i cross covariance of task ``i`` (with the jitter as
    nugget on coincident points) and ``maps[i]`` the N_i x M projection ``A_i``.
    """

    points: np.ndarray
    n_tasks: int | None = None
    factor: object = None
    K_mn: tuple | None = None
    maps: tuple | None = None

    @property
    def M(self):
        return self.points.shape[0]

    @property
    def K_mm(self):
        return None if self.factor is None else self.factor.K

    @property
    def bound(self):
        return self.factor is not None

    def block(self, i):
        return slice(i * self.M, (i + 1) * self.M)

    def task_cov(self, i):
        blk = self.block(i)
        return self.factor.K[blk, blk]


def select_inducing(layout, M, seed):
    """Uniformly sample ``M`` distinct inputs from the client's data.

    ``M`` is clamped to the smallest non-empty task; sets drawn with the same
    seed are nested in ``M``.
    """
    if M < 1:
        raise InputError("number of inducing points must be at least 1")
    if layout.n_total == 0:
        raise InputError("cannot select inducing points from an empty dataset")
    pool = np.unique(layout.X, axis=0)
    sizes = [n for n in layout.sizes if n > 0]
    M = min(int(M), min(sizes), pool.shape[0])
    order = np.random.default_rng(seed).permutation(pool.shape[0])
    return InducingSet(pool[order[:M]].copy())


def bind(inducing, layout, prior):
    """Build the covariance matrices of ``inducing`` under ``prior``."""
    Z = inducing.points
    M, T = Z.shape[0], layout.n_tasks
    if Z.shape[1] != layout.input_dim:
        raise InputError("inducing points and data differ in input dimension")
    tasks_z = np.repeat(np.arange(T), M)
    Zs = np.tile(Z, (T, 1))
    K_mm = cross_matrix(prior.W, prior.kernels, tasks_z, Zs, tasks_z, Zs, prior.feature_maps)
    F = factor_prior(0.5 * (K_mm + K_mm.T), name="inducing covariance K_mm")
    K_mn, maps = [], []
    for i in range(T):
        X_i = layout.tasks[i].X
        k = cross_matrix(prior.W, prior.kernels, np.full(M, i), Z, np.full(X_i.shape[0], i), X_i,
                         prior.feature_maps)
        k = k + F.jitter * coincidence(Z, X_i)
        blk = slice(i * M, (i + 1) * M)
        Kii = F.K[blk, blk]
        try:
            Li = np.linalg.cholesky(Kii)
        except np.linalg.LinAlgError:
            Li, _ = stabilized_cholesky(Kii, name=f"inducing block of task {i}")
        K_mn.append(k)
        maps.append(cho_solve((Li, True), k).T)
    return replace(inducing, n_tasks=T, factor=F, K_mn=tuple(K_mn), maps=tuple(maps))


def initial_sparse_state(layout, inducing):
    F = inducing.factor
    post = SparsePosterior(np.zeros(F.K.shape[0]), F.K.copy(), F.logdet)
    return PGState.prior(int(layout.cls_mask.sum())), post


def propagate(posterior, inducing, layout):
    """Mean and second moment of the data latents implied by q(f(Z))."""
    mean = np.empty(layout.n_total)
    second = np.empty(layout.n_total)
    for i in range(layout.n_tasks):
        A = inducing.maps[i]
        blk_z, rows = inducing.block(i), layout.block(i)
        mu = A @ posterior.m[blk_z]
        var = np.einsum("ij,ij->i", A @ posterior.Sigma[blk_z, blk_z], A)
        mean[rows] = mu
        second[rows] = var + mu * mu
    return mean, second


def sparse_update_q_omega(posterior, inducing, layout, diagnostics=None):
    _, second = propagate(posterior, inducing, layout)
    return pg_from_moments(second[layout.cls_mask], diagnostics)


def sparse_site_matrices(pg, sigma2, inducing, layout, y=None):
    """Block-diagonal site precision ``H_xm`` and natural vector ``v_xm`` on the inducing outputs."""
    y = layout.y if y is None else np.asarray(y, dtype=float)
    noise = layout.noise_per_row(sigma2)
    if np.any(noise <= 0):
        raise InputError("noise variances must be positive")
    TM = inducing.n_tasks * inducing.M
    H = np.zeros((TM, TM))
    v = np.zeros(TM)
    d = np.empty(layout.n_total)
    t = np.empty(layout.n_total)
    d[layout.reg_mask] = 1.0 / noise
    t[layout.reg_mask] = y[layout.reg_mask] / noise
    y_c = y[layout.cls_mask]
    if not np.all(np.isin(y_c, (-1.0, 1.0))):
        raise InputError("classification labels must be -1 or +1")
    d[layout.cls_mask] = pg.omega_mean
    t[layout.cls_mask] = 0.5 * y_c
    for i in range(layout.n_tasks):
        A, rows, blk = inducing.maps[i], layout.block(i), inducing.block(i)
        H[blk, blk] = A.T @ (d[rows, None] * A)
        v[blk] = A.T @ t[rows]
    return 0.5 * (H + H.T), v


def sparse_update_q(H_xm, v_xm, K_mm):
    F = K_mm if hasattr(K_mm, "L") else factor_prior(K_mm, name="inducing covariance K_mm")
    post = gaussian_update(F, H_xm, v_xm)
    return SparsePosterior(post.m, post.Sigma, post.logdet)


def sparse_mean_field_sweep(pg, posterior, layout, sigma2, inducing, n_iters, diagnostics=None):
    if n_iters < 1:
        raise InputError("n_iters must be at least 1")
    y = layout.y
    for _ in range(n_iters):
        pg = sparse_update_q_omega(posterior, inducing, layout, diagnostics)
        H, v = sparse_site_matrices(pg, sigma2, inducing, layout, y)
        posterior = sparse_update_q(H, v, inducing.factor)
    return pg, posterior


def sparse_elbo_terms(posterior, pg, prior, layout, inducing, y=None):
    """ELBO terms with data moments propagated through the inducing projection.

    The inducing matrices are always rebuilt under ``prior``.
    """
    inducing = bind(InducingSet(inducing.points), layout, prior)
    mean, second = propagate(posterior, inducing, layout)
    a, b, c = likelihood_terms(mean, second, pg, layout, prior.sigma2, y)
    d = gaussian_kl(posterior.m, posterior.Sigma, inducing.factor, posterior.logdet)
    return ELBOBreakdown.from_terms(a, b, c, d)


def sparse_predict(posterior, inducing, prior, i, x_star, diagnostics=None):
    x_star = _as_points(x_star)
    if not inducing.bound:
        raise InputError("inducing set is not bound to a prior")
    if not 0 <= i < inducing.n_tasks:
        raise InputError(f"task index {i} out of range")
    Z, M = inducing.points, inducing.M
    F = inducing.factor
    k = cross_matrix(prior.W, prior.kernels, np.full(M, i), Z, np.full(x_star.shape[0], i), x_star,
                     prior.feature_maps)
    k = k + F.jitter * coincidence(Z, x_star)
    Kii = inducing.task_cov(i)
    try:
        Li = np.linalg.cholesky(Kii)
    except np.linalg.LinAlgError:
        Li, _ = stabilized_cholesky(Kii, name=f"inducing block of task {i}")
    a = cho_solve((Li, True), k)
    blk = inducing.block(i)
    mu = a.T @ posterior.m[blk]
    kss = prior_variance(prior, i, x_star) + F.jitter
    var = np.einsum("ij,ij->j", a, posterior.Sigma[blk, blk] @ a) + kss - np.einsum("ij,ij->j", k, a)
    bad = var <= 0
    if np.any(bad):
        if diagnostics is not None:
            diagnostics.clamped_variances += int(bad.sum())
        var = np.where(bad, VARIANCE_FLOOR, var)
    return mu, var


@dataclass(eq=False)
class SparseObjective:
    """Sparse counterpart of :class:`fedmogp.elbo.DenseObjective`."""

    layout: object
    inducing: InducingSet
    posterior: SparsePosterior
    pg: PGState
    local: object = None

    def breakdown(self, prior):
        return sparse_elbo_terms(self.posterior, self.pg, compose(prior, self.local), self.layout,
                                 self.inducing)

    def elbo(self, prior):
        return self.breakdown(prior).total

    def moments(self):
        return propagate(self.posterior, self.inducing, self.layout)
