"""Linear model of coregionalization over heterogeneous tasks.

Every output is ``f_i = sum_b W[i, b] g_b`` with independent basis processes
``g_b ~ GP(0, k_b)``, so ``cov(f_i(x), f_j(x')) = sum_b W[i,b] W[j,b] k_b(x, x')``.

Latent values of all tasks are stacked into one vector.  The canonical order
puts regression tasks first, then classification tasks, each group sorted by
``task_id``; row ``i`` of ``W`` belongs to the ``i``-th task in that order.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .kernels import IDENTITY, _as_points, kernel_matrix, stabilized_cholesky

REGRESSION = "regression"
CLASSIFICATION = "classification"
KINDS = (REGRESSION, CLASSIFICATION)


@dataclass(frozen=True, eq=False)
class Task:
    task_id: str
    kind: str
    X: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"task kind must be one of {KINDS}, got {self.kind!r}")
        X = _as_points(self.X)
        object.__setattr__(self, "X", X)
        if self.y is not None:
            y = np.asarray(self.y, dtype=float).ravel()
            if y.shape[0] != X.shape[0]:
                raise InputError(f"task {self.task_id}: {X.shape[0]} inputs but {y.shape[0]} targets")
            object.__setattr__(self, "y", y)

    @property
    def n(self):
        return self.X.shape[0]


class TaskLayout:
    """Stacked ordering of all task samples on one client."""

    def __init__(self, tasks):
        tasks = list(tasks)
        if not tasks:
            raise InputError("a layout needs at least one task")
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise InputError(f"duplicate task ids in layout: {ids}")
        rank = {REGRESSION: 0, CLASSIFICATION: 1}
        self.tasks = tuple(sorted(tasks, key=lambda t: (rank[t.kind], t.task_id)))
        dims = {t.X.shape[1] for t in self.tasks if t.n}
        if len(dims) > 1:
            raise InputError(f"tasks have inconsistent input dimensions {sorted(dims)}")
        self.input_dim = dims.pop() if dims else self.tasks[0].X.shape[1]
        self.sizes = np.array([t.n for t in self.tasks], dtype=int)
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.n_total = int(self.offsets[-1])
        self.task_index = np.repeat(np.arange(len(self.tasks)), self.sizes)
        self.X = (np.concatenate([t.X for t in self.tasks], axis=0) if self.n_total
                  else np.zeros((0, self.input_dim)))
        kinds = np.array([t.kind for t in self.tasks])
        self.reg_mask = kinds[self.task_index] == REGRESSION if self.n_total else np.zeros(0, bool)
        self.cls_mask = ~self.reg_mask
        self.n_regression_tasks = int(np.sum(kinds == REGRESSION))
        self.n_classification_tasks = len(self.tasks) - self.n_regression_tasks

    @property
    def n_tasks(self):
        return len(self.tasks)

    @property
    def has_targets(self):
        return all(t.y is not None for t in self.tasks)

    @property
    def y(self):
        if not self.has_targets:
            raise InputError("layout has tasks without targets")
        return np.concatenate([t.y for t in self.tasks]) if self.n_total else np.zeros(0)

    @property
    def signature(self):
        """Task kinds in layout order; clients sharing a prior must agree on it."""
        return tuple(t.kind for t in self.tasks)

    def block(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def task_position(self, task_id):
        for i, t in enumerate(self.tasks):
            if t.task_id == task_id:
                return i
        raise InputError(f"no task {task_id!r} in layout")

    def regression_rank(self, i):
        """Index of task ``i`` among regression tasks (selects its noise variance)."""
        if self.tasks[i].kind != REGRESSION:
            raise InputError(f"task {self.tasks[i].task_id!r} is not a regression task")
        return i

    def locate(self, row):
        """Map a stacked index back to ``(task position, sample index)``."""
        i = int(self.task_index[row])
        return i, int(row - self.offsets[i])

    def noise_per_row(self, sigma2):
        """Noise variance for each regression row, in stacked order."""
        sigma2 = np.asarray(sigma2, dtype=float).ravel()
        if sigma2.size != self.n_regression_tasks:
            raise InputError(f"expected {self.n_regression_tasks} noise variances, got {sigma2.size}")
        return sigma2[self.task_index[self.reg_mask]]


def _check_bases(W, kernels, feature_maps):
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] < 1 or W.shape[1] < 1:
        raise InputError(f"mixing weights must be a non-empty T x B matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise InputError("mixing weights must be finite")
    if len(kernels) != W.shape[1]:
        raise InputError(f"W has {W.shape[1]} basis columns but {len(kernels)} kernels were given")
    if feature_maps is None:
        feature_maps = [IDENTITY] * len(kernels)
    if len(feature_maps) != len(kernels):
        raise InputError("need one feature map per basis kernel")
    return W, list(kernels), list(feature_maps)


def cross_cov(W, kernels, i, j, x, x2, feature_maps=None):
    W, kernels, feature_maps = _check_bases(W, kernels, feature_maps)
    T = W.shape[0]
    if not (0 <= i < T and 0 <= j < T):
        raise InputError(f"task indices ({i}, {j}) out of range for {T} tasks")
    x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    x2 = np.atleast_1d(np.asarray(x2, dtype=float))[None, :]
    return float(sum(W[i, b] * W[j, b] * kernel_matrix(k, f, x, x2)[0, 0]
                     for b, (k, f) in enumerate(zip(kernels, feature_maps))))


def cross_matrix(W, kernels, rows_task, X1, cols_task, X2, feature_maps=None):
    """Covariance between outputs ``rows_task[n]`` at ``X1[n]`` and ``cols_task[m]`` at ``X2[m]``."""
    W, kernels, feature_maps = _check_bases(W, kernels, feature_maps)
    X1, X2 = _as_points(X1), _as_points(X2)
    rows_task = np.asarray(rows_task, dtype=int)
    cols_task = np.asarray(cols_task, dtype=int)
    out = np.zeros((X1.shape[0], X2.shape[0]))
    if out.size == 0:
        return out
    for b, (k, f) in enumerate(zip(kernels, feature_maps)):
        out += np.outer(W[rows_task, b], W[cols_task, b]) * kernel_matrix(k, f, X1, X2)
    return out


def assemble_K(layout, W, kernels, feature_maps=None):
    W, kernels, feature_maps = _check_bases(W, kernels, feature_maps)
    if W.shape[0] != layout.n_tasks:
        raise InputError(f"W has {W.shape[0]} task rows but the layout has {layout.n_tasks} tasks")
    K = cross_matrix(W, kernels, layout.task_index, layout.X, layout.task_index, layout.X, feature_maps)
    return 0.5 * (K + K.T)


def sample_mogp(layout, W, kernels, seed, feature_maps=None, size=None):
    """Draw stacked latent values ``f ~ N(0, K)`` via the stabilized Cholesky factor."""
    K = assemble_K(layout, W, kernels, feature_maps)
    L, _ = stabilized_cholesky(K, name="MOGP prior covariance")
    rng = np.random.default_rng(seed)
    if size is None:
        return L @ rng.standard_normal(layout.n_total)
    return rng.standard_normal((size, layout.n_total)) @ L.T
