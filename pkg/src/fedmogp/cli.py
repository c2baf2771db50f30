"""Command-line runner: ``fedmogp gen | run | ablate``.

Configuration is a flat YAML mapping; every key is optional and command-line
flags override file values.  Keys, types and defaults are listed in
``CONFIG_SCHEMA``.  Log verbosity comes from ``FEDMOGP_LOG_LEVEL``.
"""

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .data import (
    SYNTHETIC_KERNELS,
    SYNTHETIC_NOISE,
    SYNTHETIC_W,
    generate_synthetic,
    load_ground_truth,
    load_manifest,
    split,
    write_manifest,
)
from .elbo import MODES, GlobalPrior
from .errors import FederationError, InputError, ParseError
from .federation import FederationConfig, run_federation
from .kernels import FAMILIES, FeatureMap, KernelSpec
from .mogp import REGRESSION

log = logging.getLogger("fedmogp")

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
ABLATION_AXES = {"mode": list(MODES), "kernel": ["rbf", "linear", "laplace", "cauchy"]}
ABLATION_PHI = (1.0, 0.01)


@dataclass(frozen=True)
class ExperimentConfig:
    # data
    data: str | None = None             # manifest path; None generates synthetic data
    n_clients: int = 5
    n_points: int = 50
    noise: float = SYNTHETIC_NOISE      # synthetic generating noise variance
    random_inputs: bool = False
    test_fraction: float = 0.2
    k_shot: int | None = None
    new_clients: int = 0                # trailing clients held out of training
    # federation
    rounds: int = 20
    local_iters: int = 2
    mf_iters: int = 2
    sample_size: int | None = None
    aggregation_mode: str = "A"
    inducing_m: int = 0
    learning_rate: float = 1e-2
    line_search: bool = True
    warm_start: bool = False
    personalize: bool = True
    # prior initialization
    kernel: str = "rbf"
    phi0: list | None = None
    phi1: list | None = None
    W: list | None = None
    sigma2: list | None = None
    feature_map: str = "identity"
    # outputs
    n_bins: int = 10
    figures: bool = True
    out: str = "runs/default"
    seed: int = 0


# key -> (accepted types, check, description of the constraint)
def _num_list(v):
    return isinstance(v, list) and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v)


def _matrix(v):
    return isinstance(v, list) and v and all(_num_list(r) and len(r) == len(v[0]) for r in v)


CONFIG_SCHEMA = {
    "data": ((str, type(None)), None, "a manifest path or null"),
    "n_clients": (int, lambda v: v >= 1, ">= 1"),
    "n_points": (int, lambda v: v >= 1, ">= 1"),
    "noise": ((int, float), lambda v: v >= 0, ">= 0"),
    "random_inputs": (bool, None, "a boolean"),
    "test_fraction": ((int, float), lambda v: 0 <= v < 1, "in [0, 1)"),
    "k_shot": ((int, type(None)), lambda v: v is None or v >= 0, ">= 0 or null"),
    "new_clients": (int, lambda v: v >= 0, ">= 0"),
    "rounds": (int, lambda v: v >= 1, ">= 1"),
    "local_iters": (int, lambda v: v >= 1, ">= 1"),
    "mf_iters": (int, lambda v: v >= 1, ">= 1"),
    "sample_size": ((int, type(None)), lambda v: v is None or v >= 1, ">= 1 or null"),
    "aggregation_mode": (str, lambda v: v in MODES, f"one of {list(MODES)}"),
    "inducing_m": (int, lambda v: v >= 0, ">= 0"),
    "learning_rate": ((int, float), lambda v: v > 0, "> 0"),
    "line_search": (bool, None, "a boolean"),
    "warm_start": (bool, None, "a boolean"),
    "personalize": (bool, None, "a boolean"),
    "kernel": (str, lambda v: v in FAMILIES, f"one of {list(FAMILIES)}"),
    "phi0": ((list, type(None)), lambda v: v is None or (_num_list(v) and v and min(v) > 0), "positive numbers"),
    "phi1": ((list, type(None)), lambda v: v is None or (_num_list(v) and v and min(v) > 0), "positive numbers"),
    "W": ((list, type(None)), lambda v: v is None or _matrix(v), "a rectangular numeric matrix"),
    "sigma2": ((list, type(None)), lambda v: v is None or (_num_list(v) and min(v, default=1) > 0),
               "positive numbers"),
    "feature_map": (str, lambda v: v in ("identity", "affine"), "identity or affine"),
    "n_bins": (int, lambda v: v >= 1, ">= 1"),
    "figures": (bool, None, "a boolean"),
    "out": (str, None, "a path"),
    "seed": (int, lambda v: v >= 0, ">= 0"),
}


def validate_config(values):
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise InputError(f"unknown config key(s): {', '.join(unknown)}")
    for key, val in values.items():
        types, check, what = CONFIG_SCHEMA[key]
        if isinstance(val, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
            raise InputError(f"config key {key!r}: expected {what}, got {val!r}")
        if not isinstance(val, types):
            raise InputError(f"config key {key!r}: expected {what}, got {type(val).__name__} {val!r}")
        if check is not None and not check(val):
            raise InputError(f"config key {key!r}: must be {what}, got {val!r}")
    cfg = ExperimentConfig(**values)
    if cfg.sample_size is not None and cfg.sample_size > cfg.n_clients and cfg.data is None:
        raise InputError(f"config key 'sample_size': must not exceed n_clients ({cfg.n_clients})")
    if cfg.k_shot is not None and cfg.data is None and cfg.k_shot > cfg.n_points:
        raise InputError(f"config key 'k_shot': exceeds n_points ({cfg.n_points})")
    return cfg


def read_config_file(path):
    path = Path(path)
    if not path.exists():
        raise ParseError("config file not found", path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ParseError(f"invalid YAML: {exc}", path, None if mark is None else mark.line + 1) from None
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ParseError("config must be a mapping of keys to values", path)
    return doc


FLAG_KEYS = {"rounds": "rounds", "clients": "n_clients", "sample_size": "sample_size", "mf_iters": "mf_iters",
             "local_iters": "local_iters", "aggregation_mode": "aggregation_mode", "inducing_m": "inducing_m",
             "kernel": "kernel", "seed": "seed", "out": "out", "data": "data", "points": "n_points"}


def parse_config(path=None, overrides=None):
    """File values (if any) overlaid with ``overrides``; flags win."""
    values = read_config_file(path) if path else {}
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    return validate_config(values)


# ---------------------------------------------------------------------------
# Building the experiment
# ---------------------------------------------------------------------------

def federation_config(cfg, n_clients):
    return FederationConfig(rounds=cfg.rounds, client_iters=cfg.local_iters, mf_iters=cfg.mf_iters,
                            n_clients=n_clients, sample_size=cfg.sample_size,
                            aggregation_mode=cfg.aggregation_mode, inducing_m=cfg.inducing_m, seed=cfg.seed,
                            learning_rate=cfg.learning_rate, line_search=cfg.line_search,
                            warm_start=cfg.warm_start, personalize=cfg.personalize)


def load_data(cfg):
    """(training datasets, held-out new datasets, ground truth or None)."""
    truth = None
    if cfg.data is None:
        datasets, truth = generate_synthetic(cfg.n_clients + cfg.new_clients, cfg.n_points, seed=cfg.seed,
                                             sigma2=cfg.noise, random_inputs=cfg.random_inputs)
        datasets = [split(ds, cfg.test_fraction, cfg.seed, cfg.k_shot) for ds in datasets]
    else:
        datasets = load_manifest(cfg.data)
        gt = Path(cfg.data).parent / "ground_truth.json"
        if gt.exists():
            truth = load_ground_truth(gt)
    if cfg.new_clients >= len(datasets):
        raise InputError(f"config key 'new_clients': need fewer than the {len(datasets)} available clients")
    cut = len(datasets) - cfg.new_clients
    return datasets[:cut], datasets[cut:], truth


def initial_prior(cfg, layout):
    T = layout.n_tasks
    n_reg = sum(t.kind == REGRESSION for t in layout.tasks)
    phi0 = cfg.phi0 if cfg.phi0 is not None else [k.phi0 for k in SYNTHETIC_KERNELS]
    phi1 = cfg.phi1 if cfg.phi1 is not None else [k.phi1 for k in SYNTHETIC_KERNELS]
    if len(phi0) != len(phi1):
        raise InputError("config keys 'phi0' and 'phi1' must have the same length")
    B = len(phi0)
    if cfg.W is not None:
        W = np.array(cfg.W, dtype=float)
        if W.shape != (T, B):
            raise InputError(f"config key 'W': expected a {T} x {B} matrix, got shape {W.shape}")
    elif (T, B) == np.shape(SYNTHETIC_W):
        W = np.array(SYNTHETIC_W)
    else:
        W = 0.5 * np.eye(T, B) + 0.5 / B
    sigma2 = cfg.sigma2 if cfg.sigma2 is not None else [SYNTHETIC_NOISE] * n_reg
    if len(sigma2) != n_reg:
        raise InputError(f"config key 'sigma2': expected {n_reg} values, got {len(sigma2)}")
    kernels = [KernelSpec(cfg.kernel, a, b) for a, b in zip(phi0, phi1)]
    D = layout.input_dim
    fmaps = [FeatureMap.affine(D, D) if cfg.feature_map == "affine" else FeatureMap() for _ in kernels]
    return GlobalPrior(kernels, fmaps, W, sigma2, cfg.aggregation_mode)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


METRIC_COLUMNS = ["round", "client", "task", "kind", "split", "n", "mse", "acc", "elbo_a", "elbo_b", "elbo_c",
                  "elbo_d", "elbo_total"]


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(row.get(h)) for h in header])


def write_predictions(path, predictions):
    D = max((p["X"].shape[1] for p in predictions), default=1)
    header = ["client", "task", "kind", "split"] + [f"x{d}" for d in range(D)] + ["mean", "variance", "prob",
                                                                                  "target"]
    rows = []
    for p in predictions:
        for n in range(p["target"].size):
            row = {"client": p["client"], "task": p["task"], "kind": p["kind"], "split": p["split"],
                   "mean": float(p["mean"][n]), "variance": float(p["variance"][n]),
                   "target": float(p["target"][n]), "prob": float(p["prob"][n]) if "prob" in p else None}
            row.update({f"x{d}": float(p["X"][n, d]) for d in range(p["X"].shape[1])})
            rows.append(row)
    write_csv(path, header, rows)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, allow_nan=False) + "\n", encoding="utf-8")


def _experiment(cfg, checkpoint_dir=None, resume=False):
    train, new, truth = load_data(cfg)
    prior = initial_prior(cfg, train[0].train_layout())
    fed = federation_config(cfg, len(train))
    result = run_federation(fed, train, prior, new_datasets=new, checkpoint_dir=checkpoint_dir, resume=resume,
                            n_bins=cfg.n_bins)
    return result, truth


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_run(cfg, resume=False):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    status = {"status": "running", "artifacts": [], "error": None}
    _write_json(out / "run_status.json", status)
    t0 = time.perf_counter()
    try:
        _write_json(out / "config.json", cfg.__dict__)
        result, truth = _experiment(cfg, out / "checkpoints", resume)
        write_csv(out / "metrics.csv", METRIC_COLUMNS, result.records + result.final_records)
        _write_json(out / "calibration.json",
                    result.calibration.to_dict() if result.calibration is not None else None)
        write_predictions(out / "predictions.csv", result.predictions)
        _write_json(out / "round_log.json", [r.to_dict() for r in result.round_logs])
        _write_json(out / "final_prior.json", result.prior.to_dict())
        artifacts = ["metrics.csv", "calibration.json", "predictions.csv", "round_log.json", "final_prior.json",
                     "checkpoints/"]
        if cfg.figures:
            from . import plotting
            if result.calibration is not None:
                plotting.reliability_figure(result.calibration, out / "reliability.png")
                artifacts.append("reliability.png")
            plotting.latent_figure(result.predictions, out / "latent_fits.png", truth)
            plotting.elbo_trace_figure(result.round_logs, out / "elbo_trace.png")
            artifacts += ["latent_fits.png", "elbo_trace.png"]
    except (InputError, FederationError, np.linalg.LinAlgError, ArithmeticError, OSError) as exc:
        status.update(status="failed", error={"type": type(exc).__name__, "message": str(exc)})
        _write_json(out / "run_status.json", status)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    status.update(status="complete", artifacts=artifacts, seconds=round(time.perf_counter() - t0, 3),
                  diagnostics=result.diagnostics.as_dict())
    _write_json(out / "run_status.json", status)
    log.info("wrote %s", ", ".join(artifacts))
    return EXIT_OK


def cmd_gen(cfg):
    if cfg.data is not None:
        raise InputError("gen writes synthetic data; do not pass --data")
    datasets, truth = generate_synthetic(cfg.n_clients + cfg.new_clients, cfg.n_points, seed=cfg.seed,
                                         sigma2=cfg.noise, random_inputs=cfg.random_inputs)
    datasets = [split(ds, cfg.test_fraction, cfg.seed, cfg.k_shot) for ds in datasets]
    path = write_manifest(datasets, cfg.out, truth)
    print(path)
    return EXIT_OK


def _cell(cfg, axis, value):
    if axis == "mode":
        return replace(cfg, aggregation_mode=value)
    B = len(cfg.phi0) if cfg.phi0 is not None else len(SYNTHETIC_KERNELS)
    return replace(cfg, kernel=value, phi0=[ABLATION_PHI[0]] * B, phi1=[ABLATION_PHI[1]] * B)


def cmd_ablate(cfg, axis):
    if axis not in ABLATION_AXES:
        raise InputError(f"ablation axis must be one of {list(ABLATION_AXES)}, got {axis!r}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in ABLATION_AXES[axis]:
        row = {"axis": axis, "value": value, "status": "ok", "mse": None, "acc": None, "ece": None,
               "final_elbo": None, "error": None}
        try:
            result, _ = _experiment(_cell(cfg, axis, value))
            fin = result.final_records
            reg = [r["mse"] for r in fin if r["mse"] is not None]
            cls = [r["acc"] for r in fin if r["acc"] is not None]
            row["mse"] = math.fsum(reg) / len(reg) if reg else None
            row["acc"] = math.fsum(cls) / len(cls) if cls else None
            row["ece"] = None if result.calibration is None else result.calibration.ece
            row["final_elbo"] = result.final_average_elbo()
        except (InputError, FederationError, np.linalg.LinAlgError, ArithmeticError) as exc:
            row.update(status="failed", error=str(exc))
            log.warning("ablation cell %s=%s failed: %s", axis, value, exc)
        rows.append(row)
    write_csv(out / "ablation.csv", ["axis", "value", "status", "mse", "acc", "ece", "final_elbo", "error"], rows)
    if cfg.figures:
        from . import plotting
        plotting.ablation_figure(rows, axis, out / "ablation.png")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_FAILED


def build_parser():
    parser = argparse.ArgumentParser(prog="fedmogp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--rounds", type=int)
        p.add_argument("--clients", type=int, help="number of (synthetic) clients")
        p.add_argument("--points", type=int, help="synthetic points per task")
        p.add_argument("--sample-size", type=int)
        p.add_argument("--mf-iters", type=int)
        p.add_argument("--local-iters", type=int)
        p.add_argument("--aggregation-mode")
        p.add_argument("--inducing-m", type=int)
        p.add_argument("--kernel")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--data", help="dataset manifest (default: synthetic data)")

    common(sub.add_parser("gen", help="write a synthetic dataset (manifest + CSVs + ground truth)"))
    run = sub.add_parser("run", help="run a federated experiment")
    common(run)
    run.add_argument("--resume", action="store_true", help="continue from the latest checkpoint in --out")
    abl = sub.add_parser("ablate", help="compare aggregation modes or kernel families")
    common(abl)
    abl.add_argument("--axis", default="mode", choices=sorted(ABLATION_AXES))
    return parser


def main(argv=None):
    logging.basicConfig(level=os.environ.get("FEDMOGP_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    overrides = {key: getattr(args, flag) for flag, key in FLAG_KEYS.items()}
    try:
        cfg = parse_config(args.config, overrides)
        if args.command == "gen":
            return cmd_gen(cfg)
        if args.command == "run":
            return cmd_run(cfg, resume=args.resume)
        return cmd_ablate(cfg, args.axis)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
