"""Synthetic multi-task data and on-disk datasets.

On disk a dataset is a JSON manifest plus one CSV per task::

    {"version": 1,
     "clients": [{"client_id": "0",
                  "tasks": [{"task_id": "r0", "kind": "regression",
                             "path": "client_0/r0.csv",
                             "split": {"train": [...], "test": [...]}}]}]}

Each CSV has the header ``x0,...,x{D-1},y``.  ``split`` may instead be
``{"test_fraction": f, "seed": s}`` or ``{"k_shot": k, "seed": s}``, or be
omitted (everything is training data).  Paths are relative to the manifest.
"""

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InputError, ParseError
from .kernels import KernelSpec
from .mogp import CLASSIFICATION, KINDS, REGRESSION, Task, TaskLayout, sample_mogp

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1

# generating hyperparameters of the synthetic benchmark
SYNTHETIC_W = ((0.6, 0.4), (0.4, 0.6))
SYNTHETIC_KERNELS = (KernelSpec("rbf", 1.0, 0.02), KernelSpec("rbf", 2.0, 0.01))
SYNTHETIC_NOISE = 0.1
SYNTHETIC_DOMAIN = (0.0, 100.0)


@dataclass(eq=False)
class TaskData:
    task_id: str
    kind: str
    X: np.ndarray
    y: np.ndarray
    train: np.ndarray = None
    test: np.ndarray = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"task kind must be one of {KINDS}, got {self.kind!r}")
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.y), -1)
        self.y = np.asarray(self.y, dtype=float)
        n = self.y.shape[0]
        if self.train is None:
            self.train = np.arange(n)
        if self.test is None:
            self.test = np.setdiff1d(np.arange(n), self.train)
        self.train = np.asarray(self.train, dtype=int)
        self.test = np.asarray(self.test, dtype=int)
        both = np.concatenate([self.train, self.test])
        if both.size != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise InputError(f"task {self.task_id}: train/test indices must be disjoint and cover all {n} rows")

    @property
    def n(self):
        return self.y.shape[0]

    def subset(self, which):
        idx = self.train if which == "train" else self.test
        return Task(self.task_id, self.kind, self.X[idx], self.y[idx])


@dataclass(eq=False)
class ClientDataset:
    client_id: str
    tasks: list

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if len(ids) != len(set(ids)):
            raise InputError(f"client {self.client_id}: duplicate task ids {ids}")

    def train_layout(self):
        return TaskLayout([t.subset("train") for t in self.tasks])

    def task(self, task_id):
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise InputError(f"client {self.client_id} has no task {task_id!r}")


@dataclass(eq=False)
class SyntheticGroundTruth:
    """Latent functions of each client on its generation grid."""

    x: list
    f_r: list
    f_c: list
    hyperparameters: dict = field(default_factory=dict)

    def to_dict(self):
        return {"hyperparameters": self.hyperparameters,
                "clients": [{"x": np.asarray(x).ravel().tolist(), "f_r": fr.tolist(), "f_c": fc.tolist()}
                            for x, fr, fc in zip(self.x, self.f_r, self.f_c)]}

    @classmethod
    def from_dict(cls, d):
        cl = d["clients"]
        return cls([np.array(c["x"]).reshape(-1, 1) for c in cl], [np.array(c["f_r"]) for c in cl],
                   [np.array(c["f_c"]) for c in cl], d.get("hyperparameters", {}))


# ---------------------------------------------------------------------------
# Labels and splits
# ---------------------------------------------------------------------------

def canonicalize_labels(y, source=None):
    """Return labels in {-1, +1}; {0, 1} labels are remapped with a warning."""
    y = np.asarray(y, dtype=float)
    vals = set(np.unique(y).tolist())
    if not vals <= {-1.0, 0.0, 1.0}:
        bad = sorted(vals - {-1.0, 0.0, 1.0})
        raise InputError(f"classification labels must be in {{-1, 0, +1}}, found {bad}")
    if 0.0 not in vals:
        return y
    if -1.0 in vals:
        raise InputError("classification labels mix -1 and 0; cannot tell the encoding")
    warnings.warn(f"remapping {{0, 1}} labels to {{-1, +1}}" + (f" in {source}" if source else ""),
                  UserWarning, stacklevel=2)
    return np.where(y > 0, 1.0, -1.0)


def _split_indices(n, rng, test_fraction=0.0, k_shot=None):
    if k_shot is not None:
        if k_shot > n:
            raise InputError(f"k-shot k={k_shot} exceeds the {n} available samples")
        if k_shot < 0:
            raise InputError("k must be non-negative")
        perm = rng.permutation(n)
        return np.sort(perm[:k_shot]), np.sort(perm[k_shot:])
    if not 0.0 <= test_fraction < 1.0:
        raise InputError(f"test_fraction must be in [0, 1), got {test_fraction}")
    n_test = int(math.floor(test_fraction * n + 0.5))
    n_test = min(n_test, max(n - 1, 0))
    if n_test == 0:
        return np.arange(n), np.zeros(0, dtype=int)
    perm = rng.permutation(n)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def split(dataset, test_fraction=0.0, seed=0, k_shot=None):
    """Per-task train/test split, or ``k_shot`` training points per task."""
    tasks = []
    for pos, t in enumerate(dataset.tasks):
        rng = np.random.default_rng([int(seed), pos])
        train, test = _split_indices(t.n, rng, test_fraction, k_shot)
        tasks.append(replace(t, train=train, test=test))
    return ClientDataset(dataset.client_id, tasks)


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

def _sigmoid(f):
    return 0.5 * (1.0 + np.tanh(0.5 * f))


def generate_synthetic(n_clients=5, n_points=50, seed=0, sigma2=SYNTHETIC_NOISE, W=SYNTHETIC_W,
                       kernels=SYNTHETIC_KERNELS, domain=SYNTHETIC_DOMAIN, random_inputs=False,
                       latent_override=None):
    """One regression and one classification task per client, drawn jointly from the MOGP.

    Inputs are evenly spaced over ``domain`` with a per-client random offset
    (or uniformly random with ``random_inputs``).  ``latent_override(z, f_r,
    f_c) -> (f_r, f_c)`` replaces the sampled latents before targets are drawn.
    """
    if n_clients < 1:
        raise InputError("need at least one client")
    if n_points < 1:
        raise InputError("need at least one point per task")
    if sigma2 < 0:
        raise InputError("noise variance must be non-negative")
    lo, hi = map(float, domain)
    W = np.asarray(W, dtype=float)
    datasets, xs, frs, fcs = [], [], [], []
    for z in range(n_clients):
        rng = np.random.default_rng([int(seed), z])
        if random_inputs:
            x = np.sort(rng.uniform(lo, hi, n_points))
        else:
            step = (hi - lo) / n_points
            x = lo + rng.uniform(0.0, step) + step * np.arange(n_points)
        X = x.reshape(-1, 1)
        layout = TaskLayout([Task("r0", REGRESSION, X), Task("c0", CLASSIFICATION, X)])
        f = sample_mogp(layout, W, list(kernels), seed=int(rng.integers(2 ** 32)))
        f_r, f_c = f[layout.block(0)], f[layout.block(1)]
        if latent_override is not None:
            f_r, f_c = (np.asarray(v, dtype=float) for v in latent_override(z, f_r, f_c))
        y_r = f_r + math.sqrt(sigma2) * rng.standard_normal(n_points)
        y_c = np.where(rng.uniform(size=n_points) < _sigmoid(f_c), 1.0, -1.0)
        datasets.append(ClientDataset(str(z), [TaskData("r0", REGRESSION, X, y_r),
                                               TaskData("c0", CLASSIFICATION, X, y_c)]))
        xs.append(X)
        frs.append(f_r)
        fcs.append(f_c)
    hyper = {"sigma2": sigma2, "W": W.tolist(),
             "kernels": [{"family": k.family, "phi0": k.phi0, "phi1": k.phi1} for k in kernels],
             "domain": [lo, hi], "seed": int(seed)}
    return datasets, SyntheticGroundTruth(xs, frs, fcs, hyper)


# ---------------------------------------------------------------------------
# Manifest + CSV
# ---------------------------------------------------------------------------

def _fmt(v):
    return repr(float(v))


def write_task_csv(path, X, y):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    X = np.asarray(X, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{d}" for d in range(X.shape[1])] + ["y"])
        for row, target in zip(X, y):
            w.writerow([_fmt(v) for v in row] + [_fmt(target)])


def read_task_csv(path):
    path = Path(path)
    if not path.exists():
        raise ParseError("file not found", path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty CSV file", path, 1) from None
        header = [h.strip() for h in header]
        D = len(header) - 1
        if D < 1 or header != [f"x{d}" for d in range(D)] + ["y"]:
            raise ParseError(f"header must be x0,...,x{{D-1}},y; got {','.join(header)}", path, 1)
        X, y = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != D + 1:
                raise ParseError(f"expected {D + 1} columns, got {len(row)}", path, lineno)
            try:
                vals = [float(c) for c in row]
            except ValueError as exc:
                raise ParseError(f"not a decimal number ({exc})", path, lineno) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", path, lineno)
            X.append(vals[:D])
            y.append(vals[D])
    if not X:
        raise ParseError("no data rows", path)
    return np.array(X, dtype=float), np.array(y, dtype=float)


def write_manifest(datasets, out_dir, ground_truth=None):
    """Write CSVs and ``manifest.json`` (plus ``ground_truth.json``) under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clients = []
    for ds in datasets:
        tasks = []
        for t in ds.tasks:
            rel = f"client_{ds.client_id}/{t.task_id}.csv"
            write_task_csv(out_dir / rel, t.X, t.y)
            tasks.append({"task_id": t.task_id, "kind": t.kind, "path": rel,
                          "split": {"train": t.train.tolist(), "test": t.test.tolist()}})
        clients.append({"client_id": ds.client_id, "tasks": tasks})
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"version": MANIFEST_VERSION, "clients": clients}, indent=1) + "\n")
    if ground_truth is not None:
        (out_dir / "ground_truth.json").write_text(json.dumps(ground_truth.to_dict()) + "\n")
    return manifest


def load_ground_truth(path):
    return SyntheticGroundTruth.from_dict(json.loads(Path(path).read_text()))


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise ParseError("manifest not found", path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("clients"), list):
        raise ParseError("manifest must be an object with a 'clients' list", path)
    if doc.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
        raise ParseError(f"unsupported manifest version {doc.get('version')}", path)
    root = path.parent
    datasets = []
    seen_clients = set()
    for c in doc["clients"]:
        cid = str(c.get("client_id", len(datasets)))
        if cid in seen_clients:
            raise ParseError(f"duplicate client_id {cid!r}", path)
        seen_clients.add(cid)
        tasks, seen = [], set()
        for t in c.get("tasks", []):
            try:
                tid, kind, rel = str(t["task_id"]), t["kind"], t["path"]
            except KeyError as exc:
                raise ParseError(f"client {cid}: task entry missing {exc}", path) from None
            if tid in seen:
                raise ParseError(f"client {cid}: duplicate task_id {tid!r}", path)
            seen.add(tid)
            if kind not in KINDS:
                raise ParseError(f"client {cid}, task {tid}: kind must be one of {KINDS}", path)
            csv_path = root / rel
            X, y = read_task_csv(csv_path)
            if kind == CLASSIFICATION:
                try:
                    y = canonicalize_labels(y, source=str(csv_path))
                except InputError as exc:
                    bad = np.flatnonzero(~np.isin(y, (-1.0, 0.0, 1.0)))
                    line = int(bad[0]) + 2 if bad.size else None
                    raise ParseError(str(exc), csv_path, line) from None
            sp = t.get("split") or {}
            try:
                if "train" in sp:
                    task = TaskData(tid, kind, X, y, sp["train"], sp.get("test"))
                else:
                    rng = np.random.default_rng([int(sp.get("seed", 0)), len(tasks)])
                    train, test = _split_indices(len(y), rng, float(sp.get("test_fraction", 0.0)),
                                                 sp.get("k_shot"))
                    task = TaskData(tid, kind, X, y, train, test)
            except InputError as exc:
                raise ParseError(f"client {cid}, task {tid}: {exc}", path) from None
            tasks.append(task)
        if not tasks:
            raise ParseError(f"client {cid} has no tasks", path)
        datasets.append(ClientDataset(cid, tasks))
    if not datasets:
        raise ParseError("manifest lists no clients", path)
    return datasets
