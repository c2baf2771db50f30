import os

import numpy as np
import pytest
from hypothesis import settings

from fedmogp.elbo import GlobalPrior
from fedmogp.kernels import KernelSpec
from fedmogp.mogp import CLASSIFICATION, REGRESSION, Task, TaskLayout, assemble_K, sample_mogp

# property tests draw from a fixed seed so every run sees the same examples;
# HYPOTHESIS_PROFILE=explore restores random exploration
settings.register_profile("repro", derandomize=True, database=None)
settings.register_profile("explore", derandomize=False)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repro"))


def random_prior(rng, T, B=2, mode="A", family="rbf"):
    kernels = [KernelSpec(family, rng.uniform(0.5, 2.0), rng.uniform(0.05, 0.5)) for _ in range(B)]
    W = rng.uniform(0.2, 1.0, size=(T, B))
    return GlobalPrior(kernels, None, W, rng.uniform(0.05, 0.5, size=T), mode)


def mixed_instance(rng, n_reg=None, n_cls=None, max_points=12, shared_inputs=False):
    """Random 1 regression + 1 classification client drawn from its own prior."""
    if n_reg is None:
        n_reg = int(rng.integers(1, max_points // 2 + 1))
    if n_cls is None:
        n_cls = int(rng.integers(1, max_points - n_reg + 1))
    x_r = np.sort(rng.uniform(0, 10, n_reg))
    x_c = x_r[:n_cls].copy() if shared_inputs else np.sort(rng.uniform(0, 10, n_cls))
    prior = random_prior(rng, 2)
    prior = prior.replace(sigma2=prior.sigma2[:1])
    layout = TaskLayout([Task("r", REGRESSION, x_r), Task("c", CLASSIFICATION, x_c)])
    f = sample_mogp(layout, prior.W, prior.kernels, seed=int(rng.integers(2 ** 31)))
    y = f.copy()
    reg = layout.reg_mask
    y[reg] += np.sqrt(prior.sigma2[0]) * rng.standard_normal(reg.sum())
    y[~reg] = np.where(rng.uniform(size=(~reg).sum()) < 1 / (1 + np.exp(-f[~reg])), 1.0, -1.0)
    tasks = [Task(t.task_id, t.kind, t.X, y[layout.block(i)]) for i, t in enumerate(layout.tasks)]
    return TaskLayout(tasks), prior


def regression_instance(rng, max_points=10, n_tasks=None):
    T = int(rng.integers(1, 3)) if n_tasks is None else n_tasks
    tasks = []
    for t in range(T):
        n = int(rng.integers(1, max_points // T + 1))
        tasks.append(Task(f"r{t}", REGRESSION, np.sort(rng.uniform(0, 10, n)), rng.standard_normal(n)))
    prior = random_prior(rng, T)
    return TaskLayout(tasks), prior


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def dense_K(layout, prior):
    return assemble_K(layout, prior.W, prior.kernels, prior.feature_maps)


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
