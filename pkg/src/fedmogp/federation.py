"""In-process federated training of a shared MOGP prior.

Each round the server broadcasts the prior to a sample of clients, and each
of them fits q(f) q(omega) on its own data.  The server then ascends
the average of the clients' ELBOs, evaluated with the posteriors held fixed,
over the hyperparameters the aggregation mode assigns to it.  The remaining
hyperparameters stay on the clients and are personalized there.

Payloads cross the client/server boundary as JSON bytes and never contain
raw data or inducing locations.  The server re-evaluates a client's
ELBO under candidate priors through an objective handle the client builds
from its payload and its private data.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .elbo import (
    LOCAL_FIELDS,
    MODES,
    SERVER_TARGETS,
    AdamState,
    DenseObjective,
    ELBOBreakdown,
    GlobalPrior,
    adam_direction,
    averaged_elbo,
    compose,
    hyper_gradient,
    optimal_sigma2_from_moments,
    optimizer_step,
    pack,
    unpack,
)
from .errors import FederationError, InputError, NumericError
from .metrics import accuracy, ece, mse
from .mogp import CLASSIFICATION, REGRESSION, assemble_K
from .pg_inference import (
    Diagnostics,
    GaussianPosterior,
    PGState,
    class_probability,
    factor_prior,
    initial_state,
    mean_field_sweep,
    predict,
)
from .sparse import (
    InducingSet,
    SparseObjective,
    SparsePosterior,
    bind,
    initial_sparse_state,
    select_inducing,
    sparse_mean_field_sweep,
    sparse_predict,
)

log = logging.getLogger(__name__)

PAYLOAD_VERSION = 1
CHECKPOINT_VERSION = 1
PAYLOAD_FIELDS = ("version", "client_id", "posterior_kind", "m", "Sigma", "logdet", "pg_tilt",
                  "pg_omega_mean", "elbo", "local", "sigma2_hat")
MAX_HALVINGS = 10


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 20
    client_iters: int = 2
    mf_iters: int = 2
    n_clients: int | None = None
    sample_size: int | None = None   # None: every client, every round
    aggregation_mode: str = "A"
    inducing_m: int = 0              # 0: dense inference
    seed: int = 0
    learning_rate: float = 1e-2
    line_search: bool = True
    warm_start: bool = False
    personalize: bool = True

    def __post_init__(self):
        for name in ("rounds", "client_iters", "mf_iters"):
            if int(getattr(self, name)) < 1:
                raise InputError(f"{name} must be at least 1")
        if self.aggregation_mode not in MODES:
            raise InputError(f"aggregation_mode must be one of {list(MODES)}, got {self.aggregation_mode!r}")
        if self.inducing_m < 0:
            raise InputError("inducing_m must be non-negative")
        if not self.learning_rate > 0:
            raise InputError("learning_rate must be positive")
        if self.n_clients is not None:
            self.check_clients(self.n_clients)

    def check_clients(self, n_clients):
        if n_clients < 1:
            raise InputError("need at least one client")
        if self.n_clients is not None and self.n_clients != n_clients:
            raise InputError(f"config expects {self.n_clients} clients, data has {n_clients}")
        S = self.sample_size
        if S is not None and not 1 <= S <= n_clients:
            raise InputError(f"sample_size must be in [1, {n_clients}], got {S}")

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Wire format
# ---------------------------------------------------------------------------

def _local_dict(local, mode):
    if local is None:
        return None
    full = local.to_dict()
    keep = {"phi": "kernels", "W": "W", "sigma2": "sigma2"}
    return {keep[f]: full[keep[f]] for f in LOCAL_FIELDS[mode]}


@dataclass(eq=False)
class ClientPayload:
    client_id: str
    posterior: GaussianPosterior
    pg: PGState
    elbo: ELBOBreakdown
    local: dict | None = None
    sigma2_hat: tuple = ()

    @property
    def sparse(self):
        return isinstance(self.posterior, SparsePosterior)

    def to_dict(self):
        p = self.posterior
        return {
            "version": PAYLOAD_VERSION,
            "client_id": self.client_id,
            "posterior_kind": "sparse" if self.sparse else "dense",
            "m": p.m.tolist(),
            "Sigma": p.Sigma.tolist(),
            "logdet": p.logdet,
            "pg_tilt": self.pg.tilt.tolist(),
            "pg_omega_mean": self.pg.omega_mean.tolist(),
            "elbo": self.elbo.as_dict(),
            "local": self.local,
            "sigma2_hat": list(self.sigma2_hat),
        }

    def to_bytes(self):
        return json.dumps(self.to_dict(), allow_nan=False).encode("utf-8")

    @classmethod
    def from_bytes(cls, raw):
        d = json.loads(raw.decode("utf-8"))
        if d.get("version") != PAYLOAD_VERSION or set(d) != set(PAYLOAD_FIELDS):
            raise InputError("payload does not match the expected schema")
        post_cls = SparsePosterior if d["posterior_kind"] == "sparse" else GaussianPosterior
        n = len(d["m"])
        post = post_cls(np.array(d["m"], dtype=float), np.array(d["Sigma"], dtype=float).reshape(n, n),
                        d["logdet"])
        pg = PGState(np.array(d["pg_tilt"], dtype=float), np.array(d["pg_omega_mean"], dtype=float))
        return cls(d["client_id"], post, pg, ELBOBreakdown.from_dict(d["elbo"]), d["local"],
                   tuple(d["sigma2_hat"]))


@dataclass
class RoundLog:
    round: int
    sampled: list
    elbo_before: float
    elbo_after: float
    change_norms: dict
    accepted: bool = True
    halvings: int = 0
    message: str = ""

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ClientState:
    """Everything a client keeps between rounds; none of it leaves the client."""

    dataset: object
    layout: object
    inducing: InducingSet | None = None
    local: GlobalPrior | None = None
    local_opt: AdamState | None = None
    warm: tuple | None = None
    fit: tuple | None = None   # (prior used for fitting, bound factor or inducing set, objective)

    @property
    def client_id(self):
        return self.dataset.client_id


def make_client(dataset, config, index):
    layout = dataset.train_layout()
    inducing = None
    if config.inducing_m > 0:
        inducing = select_inducing(layout, config.inducing_m, seed=[int(config.seed), int(index)])
    return ClientState(dataset, layout, inducing)


def objective_for(client, payload):
    """The handle the server uses to re-evaluate this client's ELBO."""
    if payload.sparse:
        return SparseObjective(client.layout, client.inducing, payload.posterior, payload.pg, client.local)
    return DenseObjective(client.layout, payload.posterior, payload.pg, client.local)


def _fit(prior, client, config, diagnostics):
    layout = client.layout
    warm = client.warm if config.warm_start else None
    if client.inducing is not None:
        ind = bind(client.inducing, layout, prior)
        pg, post = warm if warm is not None else initial_sparse_state(layout, ind)
        for _ in range(config.client_iters):
            pg, post = sparse_mean_field_sweep(pg, post, layout, prior.sigma2, ind, config.mf_iters,
                                               diagnostics)
        return ind, SparseObjective(layout, ind, post, pg)
    F = factor_prior(assemble_K(layout, prior.W, prior.kernels, prior.feature_maps))
    pg, post = warm if warm is not None else initial_state(layout, F)
    for _ in range(config.client_iters):
        pg, post = mean_field_sweep(pg, post, layout, prior.sigma2, F, config.mf_iters, diagnostics)
    return F, DenseObjective(layout, post, pg)


def _sigma2_hat(objective, layout):
    mean, second = objective.moments()
    y = layout.y
    return tuple(optimal_sigma2_from_moments(y[layout.block(i)], mean[layout.block(i)], second[layout.block(i)])
                 for i, t in enumerate(layout.tasks) if t.kind == REGRESSION)


def _personalize(prior, client, objective, sigma2_hat, config, diagnostics):
    """One local step on the hyperparameters this client keeps under the mode."""
    fields = LOCAL_FIELDS[prior.mode]
    if not fields or not config.personalize:
        return
    eff = compose(prior, client.local)
    if "sigma2" in fields and sigma2_hat:
        eff = eff.replace(sigma2=np.array(sigma2_hat))
    targets = tuple(f for f in ("phi", "W") if f in fields)
    if targets:
        g = hyper_gradient(eff, [objective], targets)
        eff, client.local_opt = optimizer_step(eff, g, client.local_opt, targets, lr=config.learning_rate,
                                               diagnostics=diagnostics)
    client.local = eff


def run_client(prior, client, config, diagnostics=None):
    """Fit the client's variational posterior under the broadcast prior and build its payload."""
    if prior.W.shape[0] != client.layout.n_tasks:
        raise InputError(f"client {client.client_id}: prior has {prior.W.shape[0]} tasks, "
                         f"data has {client.layout.n_tasks}")
    fit_prior = compose(prior, client.local)
    bound, objective = _fit(fit_prior, client, config, diagnostics)
    sigma2_hat = _sigma2_hat(objective, client.layout)
    client.fit = (fit_prior, bound, objective)
    client.warm = (objective.pg, objective.posterior)
    _personalize(prior, client, objective, sigma2_hat, config, diagnostics)
    objective.local = client.local
    return ClientPayload(client.client_id, objective.posterior, objective.pg, objective.breakdown(prior),
                         _local_dict(client.local, prior.mode), sigma2_hat)


def evaluate_client(client):
    """Predictions of the last fit on each task's test split (training split if no test points)."""
    fit_prior, bound, objective = client.fit
    out = []
    for task in client.dataset.tasks:
        split_name, idx = ("test", task.test) if task.test.size else ("train", task.train)
        X, y = task.X[idx], task.y[idx]
        i = client.layout.task_position(task.task_id)
        if isinstance(objective, SparseObjective):
            mu, var = sparse_predict(objective.posterior, bound, fit_prior, i, X)
        else:
            mu, var = predict(objective.posterior, bound, client.layout, fit_prior, i, X)
        rec = {"client": client.client_id, "task": task.task_id, "kind": task.kind, "split": split_name,
               "X": X, "target": y, "mean": mu, "variance": var}
        if task.kind == CLASSIFICATION:
            rec["prob"] = class_probability(mu, var)
        out.append(rec)
    return out


def metric_rows(round_index, client_id, payload, predictions):
    rows = []
    for p in predictions:
        row = {"round": round_index, "client": client_id, "task": p["task"], "kind": p["kind"],
               "split": p["split"], "n": int(p["target"].size), "mse": None, "acc": None}
        if p["kind"] == REGRESSION:
            row["mse"] = mse(p["mean"], p["target"])
        else:
            row["acc"] = accuracy(p["mean"], p["target"])
        for k, v in payload.elbo.as_dict().items():
            row[f"elbo_{k}"] = v
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------

def sample_clients(n_clients, sample_size, round_index, seed):
    if sample_size is None or sample_size == n_clients:
        return list(range(n_clients))
    if not 1 <= sample_size <= n_clients:
        raise InputError(f"sample_size must be in [1, {n_clients}]")
    rng = np.random.default_rng([int(seed), int(round_index)])
    return sorted(int(z) for z in rng.choice(n_clients, size=sample_size, replace=False))


def _change_norms(old, new):
    def norm(a, b):
        return float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
    theta_old = np.concatenate([f.params for f in old.feature_maps])
    theta_new = np.concatenate([f.params for f in new.feature_maps])
    return {"phi": norm(old.phi, new.phi), "theta": norm(theta_old, theta_new), "W": norm(old.W, new.W),
            "sigma2": norm(old.sigma2, new.sigma2)}


def server_step(prior, payloads, config, opt_state=None, objectives=None, round_index=0, diagnostics=None):
    """Aggregate payloads into a new global prior.

    ``objectives[k]`` re-evaluates the ELBO of ``payloads[k]``'s client under
    a candidate prior.  A failed gradient leaves the prior unchanged.
    """
    payloads = list(payloads)
    objectives = list(objectives or [])
    if not payloads:
        raise InputError("server_step needs at least one payload")
    if len(objectives) != len(payloads):
        raise InputError("need one objective per payload")
    sampled = [p.client_id for p in payloads]
    start = prior
    elbo_before = averaged_elbo(prior, objectives)
    mode = prior.mode
    if mode == "A" and prior.sigma2.size:
        hats = np.array([p.sigma2_hat for p in payloads], dtype=float)
        sigma2 = [math.fsum(hats[:, r]) / len(payloads) for r in range(hats.shape[1])]
        prior = prior.replace(sigma2=np.array(sigma2))
    targets = SERVER_TARGETS[mode]
    x0 = pack(prior, targets)
    base = averaged_elbo(prior, objectives) if prior is not start else elbo_before
    halvings, accepted, message = 0, True, ""
    if x0.size:
        try:
            g = hyper_gradient(prior, objectives, targets)
        except (NumericError, np.linalg.LinAlgError) as exc:
            log.warning("round %d: gradient failed, prior unchanged: %s", round_index, exc)
            if diagnostics is not None:
                diagnostics.skipped_steps += 1
            return start, opt_state, RoundLog(round_index, sampled, elbo_before, elbo_before,
                                              _change_norms(start, start), False, 0, f"gradient failed: {exc}")
        if not config.line_search:
            prior, opt_state = optimizer_step(prior, g, opt_state, targets, lr=config.learning_rate,
                                              diagnostics=diagnostics)
        elif not np.all(np.isfinite(g)):
            if diagnostics is not None:
                diagnostics.skipped_steps += 1
            accepted, message = False, "non-finite gradient"
        else:
            delta, opt_state = adam_direction(g, opt_state, lr=config.learning_rate)
            accepted = False
            for k in range(MAX_HALVINGS + 1):
                try:
                    cand = unpack(prior, x0 + delta * 0.5 ** k, targets)
                    val = averaged_elbo(cand, objectives)
                except (NumericError, InputError, np.linalg.LinAlgError):
                    continue
                if val >= base:
                    prior, accepted, halvings = cand, True, k
                    break
            if not accepted:
                halvings = MAX_HALVINGS
                message = "line search found no ascent; hyperparameter step rejected"
            if diagnostics is not None:
                diagnostics.line_search_halvings += halvings
    elbo_after = averaged_elbo(prior, objectives)
    rlog = RoundLog(round_index, sampled, elbo_before, elbo_after, _change_norms(start, prior), accepted,
                    halvings, message)
    log.info("round %d: averaged ELBO %.6f -> %.6f", round_index, elbo_before, elbo_after)
    return prior, opt_state, rlog


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class FederationResult:
    config: FederationConfig
    initial_prior: GlobalPrior
    prior: GlobalPrior
    round_logs: list
    records: list                     # per-round metric rows
    final_records: list               # final evaluation rows, round = number of rounds
    predictions: list                 # final per-task predictions
    calibration: object = None        # ReliabilityDiagram over final classification predictions
    clients: list = field(default_factory=list)
    new_clients: list = field(default_factory=list)
    final_payloads: dict = field(default_factory=dict)
    diagnostics: Diagnostics = field(default_factory=Diagnostics)

    def final_average_elbo(self, include_new=False):
        ids = {c.client_id for c in self.clients}
        vals = [p.elbo.total for cid, p in self.final_payloads.items() if include_new or cid in ids]
        return math.fsum(vals) / len(vals)

    def to_dict(self):
        def pred(p):
            d = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in p.items()}
            return d
        return {"config": self.config.to_dict(), "initial_prior": self.initial_prior.to_dict(),
                "prior": self.prior.to_dict(), "round_logs": [r.to_dict() for r in self.round_logs],
                "records": self.records, "final_records": self.final_records,
                "predictions": [pred(p) for p in self.predictions],
                "calibration": None if self.calibration is None else self.calibration.to_dict(),
                "diagnostics": self.diagnostics.as_dict()}


def _check_layouts(prior, clients):
    sigs = {c.layout.signature for c in clients}
    if len(sigs) != 1:
        raise InputError(f"clients disagree on task kinds: {sorted(sigs)}")
    sig = sigs.pop()
    if prior.W.shape[0] != len(sig):
        raise InputError(f"prior has {prior.W.shape[0]} task rows, clients have {len(sig)} tasks")
    n_reg = sum(k == REGRESSION for k in sig)
    if prior.sigma2.size != n_reg:
        raise InputError(f"prior has {prior.sigma2.size} noise variances for {n_reg} regression tasks")


def _exchange(prior, client, config, diagnostics, round_index):
    try:
        raw = run_client(prior, client, config, diagnostics).to_bytes()
    except (NumericError, InputError, np.linalg.LinAlgError, FloatingPointError) as exc:
        raise FederationError(str(exc), round_index, client.client_id) from exc
    payload = ClientPayload.from_bytes(raw)
    return payload, objective_for(client, payload)


# checkpoints -----------------------------------------------------------------

def _posterior_dict(pg, post):
    return {"kind": "sparse" if isinstance(post, SparsePosterior) else "dense", "m": post.m.tolist(),
            "Sigma": post.Sigma.tolist(), "logdet": post.logdet, "tilt": pg.tilt.tolist(),
            "omega_mean": pg.omega_mean.tolist()}


def _posterior_from(d):
    cls = SparsePosterior if d["kind"] == "sparse" else GaussianPosterior
    n = len(d["m"])
    post = cls(np.array(d["m"], dtype=float), np.array(d["Sigma"], dtype=float).reshape(n, n), d["logdet"])
    return PGState(np.array(d["tilt"], dtype=float), np.array(d["omega_mean"], dtype=float)), post


def save_checkpoint(path, completed, config, prior, opt_state, clients, round_logs, records, diagnostics):
    doc = {
        "version": CHECKPOINT_VERSION,
        "completed_rounds": completed,
        "config": config.to_dict(),
        "prior": prior.to_dict(),
        "opt_state": None if opt_state is None else opt_state.to_dict(),
        "clients": [{"client_id": c.client_id,
                     "local": None if c.local is None else c.local.to_dict(),
                     "local_opt": None if c.local_opt is None else c.local_opt.to_dict(),
                     "warm": None if c.warm is None else _posterior_dict(*c.warm)} for c in clients],
        "round_logs": [r.to_dict() for r in round_logs],
        "records": records,
        "diagnostics": diagnostics.as_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(doc, allow_nan=False))
    tmp.replace(path)
    return path


def latest_checkpoint(directory):
    found = sorted(Path(directory).glob("round_*.json"))
    return found[-1] if found else None


def _restore(path, config, clients):
    doc = json.loads(Path(path).read_text())
    if doc.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    saved = dict(doc["config"])
    now = config.to_dict()
    saved.pop("rounds"), now.pop("rounds")
    if saved != now:
        diff = sorted(k for k in now if saved.get(k) != now[k])
        raise InputError(f"{path}: checkpoint was written with a different configuration ({', '.join(diff)})")
    if [c["client_id"] for c in doc["clients"]] != [c.client_id for c in clients]:
        raise InputError(f"{path}: checkpoint clients do not match the data")
    for c, d in zip(clients, doc["clients"]):
        c.local = None if d["local"] is None else GlobalPrior.from_dict(d["local"])
        c.local_opt = None if d["local_opt"] is None else AdamState.from_dict(d["local_opt"])
        c.warm = None if d["warm"] is None else _posterior_from(d["warm"])
    opt = None if doc["opt_state"] is None else AdamState.from_dict(doc["opt_state"])
    logs = [RoundLog(**r) for r in doc["round_logs"]]
    return (doc["completed_rounds"], GlobalPrior.from_dict(doc["prior"]), opt, logs, doc["records"],
            Diagnostics(**doc["diagnostics"]))


def run_federation(config, datasets, prior, new_datasets=(), checkpoint_dir=None, resume=False,
                   n_bins=10):
    """Run all server rounds, then a final fit and evaluation of every client against the final prior.

    ``new_datasets`` are clients that never take part in training and only
    receive the final prior.
    """
    datasets = list(datasets)
    config.check_clients(len(datasets))
    if prior.mode != config.aggregation_mode:
        prior = prior.replace(mode=config.aggregation_mode)
    clients = [make_client(ds, config, z) for z, ds in enumerate(datasets)]
    new_clients = [make_client(ds, config, len(datasets) + z) for z, ds in enumerate(new_datasets)]
    _check_layouts(prior, clients + new_clients)
    initial = prior
    diagnostics = Diagnostics()
    opt_state, round_logs, records, start = None, [], [], 0
    if resume and checkpoint_dir is not None:
        ck = latest_checkpoint(checkpoint_dir)
        if ck is not None:
            start, prior, opt_state, round_logs, records, diagnostics = _restore(ck, config, clients)
            log.info("resuming from %s after %d rounds", ck, start)
    Z = len(clients)
    for r in range(start, config.rounds):
        sampled = sample_clients(Z, config.sample_size, r, config.seed)
        payloads, objectives = [], []
        for z in sampled:
            payload, obj = _exchange(prior, clients[z], config, diagnostics, r)
            payloads.append(payload)
            objectives.append(obj)
            records += metric_rows(r, clients[z].client_id, payload, evaluate_client(clients[z]))
        try:
            prior, opt_state, rlog = server_step(prior, payloads, config, opt_state, objectives, r, diagnostics)
        except (NumericError, InputError, np.linalg.LinAlgError) as exc:
            raise FederationError(f"server step failed: {exc}", r) from exc
        round_logs.append(rlog)
        if checkpoint_dir is not None:
            save_checkpoint(Path(checkpoint_dir) / f"round_{r + 1:04d}.json", r + 1, config, prior, opt_state,
                            clients, round_logs, records, diagnostics)
    final_records, predictions, final_payloads = [], [], {}
    for c in clients + new_clients:
        payload, _ = _exchange(prior, c, config, diagnostics, config.rounds)
        final_payloads[c.client_id] = payload
        preds = evaluate_client(c)
        final_records += metric_rows(config.rounds, c.client_id, payload, preds)
        predictions += preds
    calibration = None
    cls = [p for p in predictions if p["kind"] == CLASSIFICATION]
    if cls:
        calibration = ece(np.concatenate([p["prob"] for p in cls]), np.concatenate([p["target"] for p in cls]),
                          n_bins)
    return FederationResult(config, initial, prior, round_logs, records, final_records, predictions, calibration,
                            clients, new_clients, final_payloads, diagnostics)
