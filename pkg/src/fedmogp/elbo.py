"""Analytical ELBO, closed-form noise update and hyperparameter ascent.

The client ELBO splits into four terms::

    (a) sum_reg  -log(sigma sqrt(2 pi)) - (y^2 - 2 y E[f] + E[f^2]) / (2 sigma^2)
    (b) sum_cls  y E[f] / 2 - E[f^2] E[omega] / 2 - log 2
    (c) sum_cls  log cosh(c / 2) - c / 4 tanh(c / 2)          KL(PG(1, c) || PG(1, 0))
    (d) KL(N(m, Sigma) || N(0, K))

and ``total = a + b - c - d``.  In (b) the second moment comes from q(f) and
``E[omega]`` from q(omega); (c) uses the PG tilt ``c`` held by q(omega).

Positive hyperparameters (``phi0``, ``phi1``) are optimized in log space; the
feature-map parameters and mixing weights are unconstrained.
"""

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InputError, NumericError, SingularMatrixError
from .kernels import IDENTITY, FeatureMap, KernelSpec
from .mogp import assemble_K
from .pg_inference import GaussianPosterior, PriorFactor, factor_prior

MODES = ("N", "K", "W", "A")
TARGETS = ("phi", "theta", "W")
SERVER_TARGETS = {"N": ("theta",), "K": ("phi", "theta"), "W": ("phi", "theta", "W"),
                  "A": ("phi", "theta", "W")}
# fields each client keeps and personalizes itself under a mode
LOCAL_FIELDS = {"N": ("phi", "W", "sigma2"), "K": ("W", "sigma2"), "W": ("sigma2",), "A": ()}
SIGMA2_FLOOR = 1e-8
LOG2 = math.log(2.0)


@dataclass(frozen=True)
class ELBOBreakdown:
    term_a: float
    term_b: float
    term_c: float
    term_d: float
    total: float

    @classmethod
    def from_terms(cls, a, b, c, d):
        a, b, c, d = float(a), float(b), float(c), float(d)
        return cls(a, b, c, d, a + b - c - d)

    def as_dict(self):
        return {"a": self.term_a, "b": self.term_b, "c": self.term_c, "d": self.term_d,
                "total": self.total}

    @classmethod
    def from_dict(cls, d):
        return cls(d["a"], d["b"], d["c"], d["d"], d["total"])


@dataclass(frozen=True, eq=False)
class GlobalPrior:
    kernels: tuple
    feature_maps: tuple
    W: np.ndarray
    sigma2: np.ndarray
    mode: str = "A"

    def __post_init__(self):
        kernels = tuple(self.kernels)
        fmaps = tuple(IDENTITY for _ in kernels) if self.feature_maps is None else tuple(self.feature_maps)
        W = np.array(self.W, dtype=float)
        sigma2 = np.array(self.sigma2, dtype=float).ravel()
        if W.ndim != 2 or W.shape[1] != len(kernels):
            raise InputError(f"W must be T x {len(kernels)}, got shape {W.shape}")
        if len(fmaps) != len(kernels):
            raise InputError("need one feature map per basis kernel")
        if np.any(~np.isfinite(sigma2)) or np.any(sigma2 <= 0):
            raise InputError("noise variances must be positive")
        if self.mode not in MODES:
            raise InputError(f"aggregation mode must be one of {MODES}, got {self.mode!r}")
        W.setflags(write=False)
        sigma2.setflags(write=False)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "feature_maps", fmaps)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "sigma2", sigma2)

    def replace(self, **changes):
        return replace(self, **changes)

    @property
    def phi(self):
        return np.array([[k.phi0, k.phi1] for k in self.kernels])

    def to_dict(self):
        return {
            "kernels": [{"family": k.family, "phi0": k.phi0, "phi1": k.phi1} for k in self.kernels],
            "feature_maps": [{"kind": f.kind, "input_dim": f.input_dim, "latent_dim": f.latent_dim,
                              "params": f.params.tolist()} for f in self.feature_maps],
            "W": self.W.tolist(),
            "sigma2": self.sigma2.tolist(),
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kernels=[KernelSpec(k["family"], k["phi0"], k["phi1"]) for k in d["kernels"]],
            feature_maps=[FeatureMap(f["kind"], f["input_dim"], f["latent_dim"], f["params"])
                          for f in d["feature_maps"]],
            W=d["W"], sigma2=d["sigma2"], mode=d["mode"],
        )


def compose(global_prior, local):
    """Effective prior for a client: aggregated fields from the server, the rest local."""
    if local is None:
        return global_prior
    fields = LOCAL_FIELDS[global_prior.mode]
    changes = {}
    if "phi" in fields:
        changes["kernels"] = local.kernels
    if "W" in fields:
        changes["W"] = local.W
    if "sigma2" in fields:
        changes["sigma2"] = local.sigma2
    return global_prior.replace(**changes) if changes else global_prior


# ---------------------------------------------------------------------------
# ELBO terms
# ---------------------------------------------------------------------------

def likelihood_terms(mean, second, pg, layout, sigma2, y=None):
    """Terms (a), (b), (c) from per-row latent moments."""
    y = layout.y if y is None else y
    reg, cls = layout.reg_mask, layout.cls_mask
    noise = layout.noise_per_row(sigma2)
    yr, mr, sr = y[reg], mean[reg], second[reg]
    term_a = np.sum(-0.5 * np.log(2.0 * math.pi * noise) - (yr * yr - 2.0 * yr * mr + sr) / (2.0 * noise))
    yc, mc, sc = y[cls], mean[cls], second[cls]
    term_b = np.sum(0.5 * yc * mc - 0.5 * sc * pg.omega_mean - LOG2)
    c = pg.tilt
    # log cosh(c/2) without overflow
    half = 0.5 * c
    logcosh = half + np.log1p(np.exp(-2.0 * half)) - LOG2
    term_c = np.sum(logcosh - 0.25 * c * np.tanh(half))
    return float(term_a), float(term_b), float(term_c)


def gaussian_kl(m, Sigma, F, logdet_sigma=None):
    """KL(N(m, Sigma) || N(0, F.K)) from the Cholesky factor of the prior."""
    n = m.shape[0]
    if n == 0:
        return 0.0
    if logdet_sigma is None:
        sign, logdet_sigma = np.linalg.slogdet(Sigma)
        if sign <= 0:
            raise SingularMatrixError("posterior covariance is not positive definite")
    Linv_S = solve_triangular(F.L, Sigma, lower=True)
    trace = float(np.sum(solve_triangular(F.L, Linv_S.T, lower=True).diagonal()))
    alpha = solve_triangular(F.L, m, lower=True)
    return 0.5 * (F.logdet - logdet_sigma - n + trace + float(alpha @ alpha))


def elbo_terms(posterior, pg, prior, layout, K=None, y=None):
    if K is None:
        K = assemble_K(layout, prior.W, prior.kernels, prior.feature_maps)
    F = K if isinstance(K, PriorFactor) else factor_prior(K)
    if posterior.m.shape[0] != layout.n_total or F.K.shape[0] != layout.n_total:
        raise InputError("posterior, prior covariance and layout disagree in size")
    a, b, c = likelihood_terms(posterior.m, posterior.second_moment, pg, layout, prior.sigma2, y)
    d = gaussian_kl(posterior.m, posterior.Sigma, F, posterior.logdet)
    return ELBOBreakdown.from_terms(a, b, c, d)


def optimal_sigma2_from_moments(y, mean, second):
    y, mean, second = (np.asarray(v, dtype=float) for v in (y, mean, second))
    if y.size == 0:
        raise InputError("optimal noise needs at least one regression sample")
    return max(float(np.mean(y * y - 2.0 * y * mean + second)), SIGMA2_FLOOR)


def optimal_sigma2(posterior, layout, i, y=None):
    """Closed-form maximizer of term (a) for regression task ``i``."""
    if layout.tasks[i].kind != "regression":
        raise InputError(f"task {layout.tasks[i].task_id!r} is not a regression task")
    y = layout.y if y is None else y
    rows = layout.block(i)
    return optimal_sigma2_from_moments(y[rows], posterior.m[rows], posterior.second_moment[rows])


@dataclass(eq=False)
class DenseObjective:
    """A client's frozen q(f), q(omega) and data, evaluated against a candidate prior."""

    layout: object
    posterior: GaussianPosterior
    pg: object
    local: GlobalPrior | None = None

    def breakdown(self, prior):
        return elbo_terms(self.posterior, self.pg, compose(prior, self.local), self.layout)

    def elbo(self, prior):
        return self.breakdown(prior).total

    def moments(self):
        return self.posterior.m, self.posterior.second_moment


def averaged_elbo(prior, objectives):
    vals = [obj.elbo(prior) for obj in objectives]
    # fsum is exactly rounded, so client order cannot change the result
    return math.fsum(vals) / len(vals)


# ---------------------------------------------------------------------------
# Parameter packing
# ---------------------------------------------------------------------------

def _check_targets(targets):
    targets = tuple(t for t in TARGETS if t in set(targets))
    return targets


def param_names(prior, targets):
    names = []
    for t in _check_targets(targets):
        if t == "phi":
            for b in range(len(prior.kernels)):
                names += [f"log_phi0[{b}]", f"log_phi1[{b}]"]
        elif t == "theta":
            for b, f in enumerate(prior.feature_maps):
                names += [f"theta[{b}][{j}]" for j in range(f.n_params)]
        else:
            T, B = prior.W.shape
            names += [f"W[{i},{b}]" for i in range(T) for b in range(B)]
    return names


def pack(prior, targets):
    parts = []
    for t in _check_targets(targets):
        if t == "phi":
            parts.append(np.log(prior.phi).ravel())
        elif t == "theta":
            parts += [f.params for f in prior.feature_maps]
        else:
            parts.append(prior.W.ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def unpack(prior, vec, targets):
    vec = np.asarray(vec, dtype=float)
    expected = pack(prior, targets).size
    if vec.size != expected:
        raise InputError(f"parameter vector has {vec.size} entries, expected {expected}")
    pos = 0
    changes = {}
    for t in _check_targets(targets):
        if t == "phi":
            B = len(prior.kernels)
            logs = vec[pos:pos + 2 * B]
            # untouched coordinates keep their exact value instead of a log/exp round trip
            phi = np.where(logs == np.log(prior.phi.ravel()), prior.phi.ravel(), np.exp(logs)).reshape(B, 2)
            changes["kernels"] = tuple(k.with_phi(*phi[b]) for b, k in enumerate(prior.kernels))
            pos += 2 * B
        elif t == "theta":
            fmaps = []
            for f in prior.feature_maps:
                fmaps.append(f.with_params(vec[pos:pos + f.n_params]) if f.n_params else f)
                pos += f.n_params
            changes["feature_maps"] = tuple(fmaps)
        else:
            n = prior.W.size
            changes["W"] = vec[pos:pos + n].reshape(prior.W.shape)
            pos += n
    return prior.replace(**changes) if changes else prior


# ---------------------------------------------------------------------------
# Gradient and optimizer
# ---------------------------------------------------------------------------

def hyper_gradient(prior, objectives, targets, rel_step=1e-5):
    """Central finite-difference gradient of the averaged ELBO over ``targets``.

    q(f) and q(omega) stay frozen; each coordinate uses the step
    ``rel_step * max(1, |x|)`` in its optimization coordinates.
    """
    objectives = list(objectives)
    if not objectives:
        raise InputError("hyper_gradient needs at least one client objective")
    x0 = pack(prior, targets)
    names = param_names(prior, targets)
    grad = np.zeros_like(x0)
    for j in range(x0.size):
        h = rel_step * max(1.0, abs(x0[j]))
        vals = []
        for sign in (1.0, -1.0):
            x = x0.copy()
            x[j] += sign * h
            try:
                vals.append(averaged_elbo(unpack(prior, x, targets), objectives))
            except (np.linalg.LinAlgError, NumericError, FloatingPointError) as exc:
                raise NumericError(
                    f"ELBO evaluation failed at probe {names[j]} = {x[j]!r}: {exc}") from exc
        grad[j] = (vals[0] - vals[1]) / (2.0 * h)
    return grad


@dataclass(eq=False)
class AdamState:
    m: np.ndarray = field(default_factory=lambda: np.zeros(0))
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    t: int = 0

    def to_dict(self):
        return {"m": self.m.tolist(), "v": self.v.tolist(), "t": self.t}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["m"], dtype=float), np.array(d["v"], dtype=float), int(d["t"]))

    def dumps(self):
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, s):
        return cls.from_dict(json.loads(s))


def adam_direction(gradient, state, lr=1e-2, beta1=0.9, beta2=0.999, eps=1e-8):
    """Ascent increment and the advanced moment state (weight decay is zero)."""
    g = np.asarray(gradient, dtype=float)
    if state is None or state.m.shape != g.shape:
        state = AdamState(np.zeros_like(g), np.zeros_like(g), 0)
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


def optimizer_step(prior, gradient, state, targets, lr=1e-2, diagnostics=None, **adam):
    g = np.asarray(gradient, dtype=float)
    if g.size != pack(prior, targets).size:
        raise InputError("gradient size does not match the targeted parameters")
    if not np.all(np.isfinite(g)):
        if diagnostics is not None:
            diagnostics.skipped_steps += 1
        return prior, state
    delta, state = adam_direction(g, state, lr=lr, **adam)
    if not np.any(delta):
        return prior, state
    return unpack(prior, pack(prior, targets) + delta, targets), state
