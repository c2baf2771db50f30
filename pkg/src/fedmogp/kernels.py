"""Base kernels, the feature-map hook and jitter-stabilized Cholesky.

A basis kernel is the composition ``k_phi(eta_theta(x), eta_theta(x'))`` of a
base family with hyperparameters ``phi = (phi0, phi1)`` and an input
transformation ``eta_theta``.  Families:

    rbf      phi0 * exp(-phi1/2 * ||x - x'||_2^2)
    laplace  phi0 * exp(-phi1/2 * ||x - x'||_1)
    cauchy   1 / (phi1 * ||x - x'||_2^2 + 1)
    linear   <x/||x||, x'/||x'||>

Cauchy has no output scale and linear uses neither parameter; both are kept
on the KernelSpec so every family shares one parameter layout.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError, SingularMatrixError

FAMILIES = ("rbf", "linear", "laplace", "cauchy")
FEATURE_MAPS = ("identity", "affine")

DEFAULT_JITTER = 1e-6
MAX_ESCALATIONS = 6


@dataclass(frozen=True)
class KernelSpec:
    family: str = "rbf"
    phi0: float = 1.0
    phi1: float = 1.0

    def __post_init__(self):
        fam = str(self.family).lower()
        if fam not in FAMILIES:
            raise InputError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        object.__setattr__(self, "family", fam)
        for name in ("phi0", "phi1"):
            val = float(getattr(self, name))
            if not np.isfinite(val) or val <= 0:
                raise InputError(f"{name} must be a positive finite number, got {val}")
            object.__setattr__(self, name, val)

    def with_phi(self, phi0, phi1):
        return KernelSpec(self.family, phi0, phi1)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Input transformation applied before the base kernel.

    ``identity`` has no parameters.  ``affine`` maps ``x -> A x + c`` with
    ``A`` of shape (latent_dim, input_dim); ``params`` holds ``A`` row-major
    followed by ``c``.
    """

    kind: str = "identity"
    input_dim: int | None = None
    latent_dim: int | None = None
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        kind = str(self.kind).lower()
        if kind not in FEATURE_MAPS:
            raise InputError(f"unknown feature map {self.kind!r}; expected one of {FEATURE_MAPS}")
        object.__setattr__(self, "kind", kind)
        params = np.array(self.params, dtype=float).ravel()
        if kind == "identity":
            if params.size:
                raise InputError("identity feature map takes no parameters")
            object.__setattr__(self, "latent_dim", self.input_dim)
        else:
            if self.input_dim is None or self.latent_dim is None:
                raise InputError("affine feature map needs input_dim and latent_dim")
            n = self.latent_dim * self.input_dim + self.latent_dim
            if params.size == 0:
                params = np.concatenate([np.eye(self.latent_dim, self.input_dim).ravel(),
                                         np.zeros(self.latent_dim)])
            if params.size != n:
                raise InputError(f"affine map expects {n} parameters, got {params.size}")
        params.setflags(write=False)
        object.__setattr__(self, "params", params)

    @classmethod
    def affine(cls, input_dim, latent_dim, params=None):
        return cls("affine", input_dim, latent_dim, np.zeros(0) if params is None else params)

    @property
    def n_params(self):
        return self.params.size

    def with_params(self, params):
        return FeatureMap(self.kind, self.input_dim, self.latent_dim, params)

    def apply(self, X):
        X = _as_points(X)
        if self.input_dim is not None and X.shape[1] != self.input_dim:
            raise InputError(f"feature map expects input dimension {self.input_dim}, got {X.shape[1]}")
        if self.kind == "identity":
            return X
        L, D = self.latent_dim, self.input_dim
        A = self.params[: L * D].reshape(L, D)
        c = self.params[L * D:]
        return X @ A.T + c


IDENTITY = FeatureMap()


def _as_points(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 0:
        X = X.reshape(1, 1)
    elif X.ndim == 1:
        X = X.reshape(-1, 1)
    elif X.ndim != 2:
        raise InputError(f"inputs must be a vector or a 2-d array of points, got shape {X.shape}")
    return X


def _unit_rows(Z):
    # rescale by the largest entry first so tiny rows do not underflow to zero norm
    scale = np.abs(Z).max(axis=1, keepdims=True) if Z.shape[1] else np.zeros((Z.shape[0], 1))
    S = np.divide(Z, scale, out=np.zeros_like(Z), where=scale > 0)
    n = np.linalg.norm(S, axis=1, keepdims=True)
    return np.divide(S, n, out=np.zeros_like(S), where=n > 0)


def base_kernel(spec, Z1, Z2):
    """Evaluate the base family on already-mapped point sets (N1 x L, N2 x L)."""
    if spec.family == "linear":
        return _unit_rows(Z1) @ _unit_rows(Z2).T
    diff = Z1[:, None, :] - Z2[None, :, :]
    if spec.family == "laplace":
        return spec.phi0 * np.exp(-0.5 * spec.phi1 * np.abs(diff).sum(axis=-1))
    sq = (diff * diff).sum(axis=-1)
    if spec.family == "rbf":
        return spec.phi0 * np.exp(-0.5 * spec.phi1 * sq)
    return 1.0 / (spec.phi1 * sq + 1.0)


def kernel_matrix(spec, fmap, X1, X2):
    """Cross-covariance matrix k(X1[i], X2[j]) under ``fmap`` then ``spec``."""
    fmap = IDENTITY if fmap is None else fmap
    X1, X2 = _as_points(X1), _as_points(X2)
    if X1.shape[1] != X2.shape[1]:
        raise InputError(f"dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}")
    if not (np.all(np.isfinite(X1)) and np.all(np.isfinite(X2))):
        raise NumericError("non-finite kernel inputs")
    return base_kernel(spec, fmap.apply(X1), fmap.apply(X2))


def eval_kernel(spec, fmap, x, x2):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))
    if x.ndim != 1 or x2.ndim != 1:
        raise InputError("eval_kernel takes two single points")
    if x.shape != x2.shape:
        raise InputError(f"dimension mismatch: {x.shape[0]} vs {x2.shape[0]}")
    return float(kernel_matrix(spec, fmap, x[None, :], x2[None, :])[0, 0])


def gram(spec, fmap, X):
    X = _as_points(X)
    if X.shape[0] < 1:
        raise InputError("gram needs at least one point")
    G = kernel_matrix(spec, fmap, X, X)
    # elementwise formulas are already symmetric; this guards the linear family's matmul
    return 0.5 * (G + G.T)


def stabilized_cholesky(G, base_jitter=DEFAULT_JITTER, max_escalations=MAX_ESCALATIONS, name="matrix"):
    """Lower Cholesky factor of ``G + jitter * I``.

    Jitter starts at ``base_jitter`` and grows tenfold per failure.  Returns
    ``(L, jitter)``.
    """
    G = np.asarray(G, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InputError(f"{name} must be square, got shape {G.shape}")
    if not np.all(np.isfinite(G)):
        raise NumericError(f"{name} has non-finite entries")
    if base_jitter <= 0:
        raise InputError("base_jitter must be positive")
    n = G.shape[0]
    if n == 0:
        return np.zeros((0, 0)), base_jitter
    eye = np.eye(n)
    jitter = base_jitter
    for _ in range(max_escalations + 1):
        try:
            return np.linalg.cholesky(G + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise SingularMatrixError(
        f"{name} ({n}x{n}) is not positive definite even with jitter {jitter / 10.0:g}"
    )
