"""Client-side mean-field inference with Polya-Gamma augmentation.

Each classification sample carries an auxiliary ``omega ~ PG(1, c)``.  Given
Gaussian moments of the latent ``f``, the optimal ``q(omega)`` has
``c = sqrt(E[f^2])``; given ``E[omega]``, the classification likelihood
becomes a Gaussian site with precision ``E[omega]`` and pseudo-target
``y / (2 E[omega])``, so ``q(f)`` is the conjugate Gaussian update
``Sigma = (H + K^-1)^-1``, ``m = Sigma H v``.

The prior covariance always enters as ``K + jitter * I`` where the jitter is
the one chosen by :func:`stabilized_cholesky`.  Predictions treat that
jitter as a white nugget process: it adds to the prior variance at every test
input and to the covariance between bitwise-equal inputs of the same task, so
predictions at training inputs reproduce the posterior marginals.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import InputError, NumericError
from .kernels import _as_points, kernel_matrix, stabilized_cholesky
from .mogp import cross_matrix

log = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12
PG_TRUNCATION = 200


@dataclass
class Diagnostics:
    clamped_second_moments: int = 0
    clamped_variances: int = 0
    skipped_steps: int = 0
    line_search_halvings: int = 0

    def as_dict(self):
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# Polya-Gamma moments
# ---------------------------------------------------------------------------

def pg_expectation(b, c):
    """Mean of PG(b, c): ``b / (2c) * tanh(c / 2)``, ``b / 4`` at ``c = 0``."""
    if np.any(np.asarray(b) <= 0):
        raise InputError("Polya-Gamma shape b must be positive")
    c = np.abs(np.asarray(c, dtype=float))
    if np.any(np.isnan(c)):
        raise NumericError("NaN Polya-Gamma tilt")
    small = c < 1e-4
    safe = np.where(small, 1.0, c)
    # series b/4 * (1 - c^2/12 + c^4/120) below the cutoff
    out = np.where(small, 0.25 * (1.0 - c * c / 12.0 + c ** 4 / 120.0),
                   np.tanh(0.5 * safe) / (2.0 * safe))
    out = np.asarray(b, dtype=float) * out
    return float(out) if out.ndim == 0 else out


def pg_sample(b, c, seed, size=None, truncation=PG_TRUNCATION, chunk=10_000):
    """Draw from PG(b, c) through its truncated sum-of-Gammas representation.

    ``omega = 1/(2 pi^2) * sum_k g_k / ((k - 1/2)^2 + c^2 / (4 pi^2))`` with
    ``g_k ~ Gamma(b, 1)``.
    """
    if int(b) != b or b not in (1, 2, 3):
        raise InputError("pg_sample supports b in {1, 2, 3}")
    if truncation < 200:
        raise InputError("truncation must keep at least 200 terms")
    rng = np.random.default_rng(seed)
    k = np.arange(1, truncation + 1)
    denom = (k - 0.5) ** 2 + c * c / (4.0 * math.pi ** 2)
    n = 1 if size is None else int(size)
    out = np.empty(n)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        g = rng.gamma(b, 1.0, size=(stop - start, truncation))
        out[start:stop] = (g / denom).sum(axis=1) / (2.0 * math.pi ** 2)
    return float(out[0]) if size is None else out


# ---------------------------------------------------------------------------
# Variational state
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class PGState:
    """q(omega) over classification samples, in stacked classification order."""

    tilt: np.ndarray
    omega_mean: np.ndarray

    @classmethod
    def prior(cls, n):
        return cls(np.zeros(n), np.full(n, 0.25))

    @classmethod
    def from_tilt(cls, tilt):
        tilt = np.asarray(tilt, dtype=float)
        return cls(tilt, np.asarray(pg_expectation(1.0, tilt), dtype=float).reshape(tilt.shape))

    def __len__(self):
        return self.tilt.size


@dataclass(eq=False)
class GaussianPosterior:
    """q(f) = N(m, Sigma) over the stacked latent vector.

    ``logdet`` caches ``log|Sigma|`` when the update that produced the
    posterior knows it more accurately than a fresh factorization would.
    """

    m: np.ndarray
    Sigma: np.ndarray
    logdet: float | None = None

    @property
    def var(self):
        return np.diag(self.Sigma).copy()

    @property
    def second_moment(self):
        return np.diag(self.Sigma) + self.m ** 2


@dataclass(eq=False)
class SiteMatrices:
    """Diagonal site precisions ``h`` (the diagonal of H) and pseudo-targets ``v``."""

    h: np.ndarray
    v: np.ndarray

    @property
    def H(self):
        return np.diag(self.h)

    @property
    def natural(self):
        return self.h * self.v


@dataclass(eq=False)
class PriorFactor:
    """``K + jitter * I`` together with its lower Cholesky factor."""

    K: np.ndarray
    L: np.ndarray
    jitter: float = field(default=0.0)

    @property
    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, B):
        return cho_solve((self.L, True), B)


def factor_prior(K, name="prior covariance K"):
    K = np.asarray(K, dtype=float)
    L, jitter = stabilized_cholesky(K, name=name)
    return PriorFactor(K + jitter * np.eye(K.shape[0]), L, jitter)


def _as_factor(K):
    return K if isinstance(K, PriorFactor) else factor_prior(K)


def initial_state(layout, K):
    """Start from the prior: ``m = 0``, ``Sigma = K``, ``q(omega) = PG(1, 0)``."""
    F = _as_factor(K)
    post = GaussianPosterior(np.zeros(layout.n_total), F.K.copy(), F.logdet)
    return PGState.prior(int(layout.cls_mask.sum())), post


# ---------------------------------------------------------------------------
# Coordinate updates
# ---------------------------------------------------------------------------

def pg_from_moments(second_moment, diagnostics=None):
    second_moment = np.asarray(second_moment, dtype=float)
    if np.any(np.isnan(second_moment)):
        raise NumericError("NaN second moment in q(omega) update")
    neg = second_moment < 0
    if np.any(neg):
        if diagnostics is not None:
            diagnostics.clamped_second_moments += int(neg.sum())
        second_moment = np.where(neg, 0.0, second_moment)
    return PGState.from_tilt(np.sqrt(second_moment))


def update_q_omega(posterior, layout, diagnostics=None):
    if posterior.m.shape[0] != layout.n_total:
        raise InputError(f"posterior has {posterior.m.shape[0]} entries, layout has {layout.n_total}")
    return pg_from_moments(posterior.second_moment[layout.cls_mask], diagnostics)


def canonical_labels(y):
    """Map {0, 1} labels to {-1, +1}; leave {-1, +1} labels alone."""
    y = np.asarray(y, dtype=float)
    vals = set(np.unique(y).tolist())
    if vals <= {-1.0, 1.0}:
        return y
    if vals <= {0.0, 1.0}:
        return np.where(y > 0, 1.0, -1.0)
    raise InputError(f"classification labels must be in {{-1, +1}} or {{0, 1}}, got {sorted(vals)}")


def site_matrices(pg, sigma2, layout, y=None):
    y = layout.y if y is None else np.asarray(y, dtype=float)
    if y.shape[0] != layout.n_total:
        raise InputError(f"expected {layout.n_total} targets, got {y.shape[0]}")
    noise = layout.noise_per_row(sigma2)
    if np.any(~np.isfinite(noise)) or np.any(noise <= 0):
        raise InputError("noise variances must be positive")
    y_c = y[layout.cls_mask]
    if not np.all(np.isin(y_c, (-1.0, 1.0))):
        raise InputError("classification labels must be -1 or +1")
    if len(pg) != y_c.size:
        raise InputError(f"q(omega) has {len(pg)} entries for {y_c.size} classification samples")
    h = np.empty(layout.n_total)
    v = np.empty(layout.n_total)
    h[layout.reg_mask] = 1.0 / noise
    v[layout.reg_mask] = y[layout.reg_mask]
    h[layout.cls_mask] = pg.omega_mean
    v[layout.cls_mask] = y_c / (2.0 * pg.omega_mean)
    return SiteMatrices(h, v)


def gaussian_update(F, H, natural):
    """Posterior of ``N(0, F.K)`` times sites with precision ``H`` and natural mean ``natural``.

    Uses ``Sigma = L (I + L^T H L)^-1 L^T`` so ``K`` is never inverted.
    """
    L = F.L
    n = L.shape[0]
    C = np.eye(n) + L.T @ H @ L
    C = 0.5 * (C + C.T)
    try:
        Lc = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        Lc, _ = stabilized_cholesky(C, name="posterior precision (I + L^T H L)")
    R = solve_triangular(Lc, L.T, lower=True)
    Sigma = R.T @ R
    Sigma = 0.5 * (Sigma + Sigma.T)
    logdet = F.logdet - 2.0 * float(np.sum(np.log(np.diag(Lc))))
    return GaussianPosterior(Sigma @ natural, Sigma, logdet)


def update_q_f(sites, K):
    F = _as_factor(K)
    if sites.h.shape[0] != F.K.shape[0]:
        raise InputError("site matrices and prior covariance disagree in size")
    if np.any(sites.h <= 0):
        raise InputError("site precisions must be positive")
    return gaussian_update(F, np.diag(sites.h), sites.natural)


def mean_field_sweep(pg, posterior, layout, sigma2, K, n_iters, diagnostics=None):
    """Alternate the q(omega) and q(f) updates ``n_iters`` times."""
    if n_iters < 1:
        raise InputError("n_iters must be at least 1")
    F = _as_factor(K)
    y = layout.y
    for _ in range(n_iters):
        pg = update_q_omega(posterior, layout, diagnostics)
        posterior = update_q_f(site_matrices(pg, sigma2, layout, y), F)
    return pg, posterior


# ---------------------------------------------------------------------------
# Prediction
# ---------------------------------------------------------------------------

def coincidence(X1, X2):
    """Indicator of bitwise-equal points, used to place the jitter nugget."""
    X1, X2 = _as_points(X1), _as_points(X2)
    return (X1[:, None, :] == X2[None, :, :]).all(axis=-1).astype(float)


def prior_variance(prior, i, x_star):
    x_star = _as_points(x_star)
    W = np.asarray(prior.W, dtype=float)
    fmaps = prior.feature_maps
    out = np.zeros(x_star.shape[0])
    for b, k in enumerate(prior.kernels):
        Z = fmaps[b].apply(x_star)
        diag = np.array([kernel_matrix(k, None, z[None, :], z[None, :])[0, 0] for z in Z])
        out += W[i, b] ** 2 * diag
    return out


def predict(posterior, K, layout, prior, i, x_star, joint=False, diagnostics=None):
    """Predictive mean and variance of latent task ``i`` at ``x_star``.

    By default conditions on task ``i``'s own training latents, using the
    task-``i`` blocks of ``K`` and ``Sigma``.  ``joint=True`` conditions on the
    whole stacked vector instead, letting the other tasks inform the mean.
    """
    F = _as_factor(K)
    x_star = _as_points(x_star)
    if not 0 <= i < layout.n_tasks:
        raise InputError(f"task index {i} out of range for {layout.n_tasks} tasks")
    if x_star.shape[1] != layout.input_dim:
        raise InputError(f"x_star has dimension {x_star.shape[1]}, expected {layout.input_dim}")
    n_star = x_star.shape[0]
    kss = prior_variance(prior, i, x_star) + F.jitter
    if joint:
        rows = np.arange(layout.n_total)
        X_rows, t_rows = layout.X, layout.task_index
    else:
        rows = np.arange(layout.n_total)[layout.block(i)]
        X_rows, t_rows = layout.X[rows], layout.task_index[rows]
    if rows.size == 0:
        mu, var = np.zeros(n_star), kss
    else:
        k = cross_matrix(prior.W, prior.kernels, t_rows, X_rows, np.full(n_star, i), x_star,
                         prior.feature_maps)
        same_task = (t_rows == i)[:, None]
        k = k + F.jitter * coincidence(X_rows, x_star) * same_task
        K_rows = F.K[np.ix_(rows, rows)]
        if joint:
            A = F.solve(k)
        else:
            try:
                Lb = np.linalg.cholesky(K_rows)
            except np.linalg.LinAlgError:
                Lb, _ = stabilized_cholesky(K_rows, name=f"task {i} covariance block")
            A = cho_solve((Lb, True), k)
        mu = A.T @ posterior.m[rows]
        reduction = K_rows - posterior.Sigma[np.ix_(rows, rows)]
        var = kss - np.einsum("ij,ij->j", A, reduction @ A)
    bad = var <= 0
    if np.any(bad):
        if diagnostics is not None:
            diagnostics.clamped_variances += int(bad.sum())
        var = np.where(bad, VARIANCE_FLOOR, var)
    return mu, var


def class_probability(mu, var):
    """``sigmoid(mu / sqrt(1 + pi var / 8))``, kept strictly inside (0, 1)."""
    mu = np.asarray(mu, dtype=float)
    z = mu / np.sqrt(1.0 + math.pi * np.asarray(var, dtype=float) / 8.0)
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    tiny = np.finfo(float).eps
    return np.clip(p, tiny, 1.0 - tiny)
