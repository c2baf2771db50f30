import csv
import json
import subprocess
import sys
import time

import numpy as np
import pytest
import yaml

from fedmogp import cli
from fedmogp.cli import ExperimentConfig, main, parse_config
from fedmogp.data import load_manifest
from fedmogp.errors import InputError, ParseError
from fedmogp.metrics import ReliabilityDiagram

SMALL = ["--rounds", "2", "--clients", "2", "--points", "8"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("")
    cfg = parse_config(p)
    assert cfg == ExperimentConfig()
    assert (cfg.rounds, cfg.mf_iters, cfg.local_iters) == (20, 2, 2)


def test_flag_overrides_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"rounds": 20, "seed": 3}))
    cfg = parse_config(p, {"rounds": 5, "seed": None})
    assert cfg.rounds == 5 and cfg.seed == 3


@pytest.mark.parametrize("values,key", [
    ({"aggregation_mode": "Q"}, "aggregation_mode"),
    ({"roundz": 3}, "roundz"),
    ({"rounds": "five"}, "rounds"),
    ({"rounds": 0}, "rounds"),
    ({"line_search": 1}, "line_search"),
    ({"n_clients": True}, "n_clients"),
])
def test_bad_config_names_key(values, key):
    with pytest.raises(InputError, match=key):
        cli.validate_config(values)


def test_mode_q_lists_allowed(capsys):
    assert main(["run", "--aggregation-mode", "Q"]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "aggregation_mode" in err and all(m in err for m in "NKWA")


def test_malformed_yaml_reports_line(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("rounds: 3\nseed: [1,\n")
    with pytest.raises(ParseError) as exc:
        parse_config(p)
    assert exc.value.line is not None


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", *SMALL, "--out", str(out)]) == 0
    return out


def test_run_artifacts_parse(run_dir):
    status = json.loads((run_dir / "run_status.json").read_text())
    assert status["status"] == "complete" and status["error"] is None
    for name in status["artifacts"]:
        assert (run_dir / name).exists(), name
    rows = read_rows(run_dir / "metrics.csv")
    assert list(rows[0]) == cli.METRIC_COLUMNS
    assert {r["round"] for r in rows} == {"0", "1", "2"}
    for r in rows:
        terms = [float(r[k]) for k in ("elbo_a", "elbo_b", "elbo_c", "elbo_d")]
        assert float(r["elbo_total"]) == pytest.approx(terms[0] + terms[1] - terms[2] - terms[3], rel=1e-12)
        assert (r["mse"] == "") != (r["acc"] == "")
    diagram = ReliabilityDiagram.from_dict(json.loads((run_dir / "calibration.json").read_text()))
    assert diagram.counts.sum() > 0 and 0 <= diagram.ece <= 1
    preds = read_rows(run_dir / "predictions.csv")
    assert {"client", "task", "x0", "mean", "variance", "target"} <= set(preds[0])
    assert all(float(p["variance"]) > 0 for p in preds)
    logs = json.loads((run_dir / "round_log.json").read_text())
    assert [entry["round"] for entry in logs] == [0, 1]
    assert sorted(p.name for p in (run_dir / "checkpoints").iterdir()) == ["round_0001.json", "round_0002.json"]
    prior = json.loads((run_dir / "final_prior.json").read_text())
    assert prior["mode"] == "A"
    for png in ("reliability.png", "latent_fits.png", "elbo_trace.png"):
        assert (run_dir / png).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_rerun_is_byte_identical(run_dir, tmp_path):
    assert main(["run", *SMALL, "--out", str(tmp_path)]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()
    assert (tmp_path / "predictions.csv").read_bytes() == (run_dir / "predictions.csv").read_bytes()


def test_resume_reproduces_run(run_dir, tmp_path):
    assert main(["run", "--rounds", "1", "--clients", "2", "--points", "8", "--out", str(tmp_path)]) == 0
    assert main(["run", *SMALL, "--out", str(tmp_path), "--resume"]) == 0
    assert (tmp_path / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()


def test_tiny_run_is_fast(tmp_path):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "fedmogp.cli", "run", "--rounds", "1", "--clients", "2",
                           "--points", "5", "--out", str(tmp_path)], capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    assert proc.returncode == 0, proc.stderr
    assert elapsed < 5.0


def test_gen_then_run_matches_in_memory(run_dir, tmp_path):
    data = tmp_path / "data"
    assert main(["gen", "--clients", "2", "--points", "8", "--out", str(data)]) == 0
    assert len(load_manifest(data / "manifest.json")) == 2
    out = tmp_path / "run"
    assert main(["run", "--rounds", "2", "--data", str(data / "manifest.json"), "--out", str(out)]) == 0
    a, b = read_rows(run_dir / "metrics.csv"), read_rows(out / "metrics.csv")
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        for k in ("mse", "acc", "elbo_a", "elbo_b", "elbo_c", "elbo_d", "elbo_total"):
            assert (ra[k] == "") == (rb[k] == "")
            if ra[k]:
                assert abs(float(rb[k]) - float(ra[k])) <= 1e-10
        assert [ra[k] for k in ("round", "client", "task", "kind", "split", "n")] == \
            [rb[k] for k in ("round", "client", "task", "kind", "split", "n")]


def test_gen_rejects_zero_clients(tmp_path):
    assert main(["gen", "--clients", "0", "--out", str(tmp_path)]) == cli.EXIT_CONFIG


def test_gen_seeds_differ(tmp_path):
    for s in ("1", "2"):
        assert main(["gen", "--clients", "1", "--points", "6", "--seed", s, "--out", str(tmp_path / s)]) == 0
    a = sorted(p for p in (tmp_path / "1").rglob("*.csv"))
    b = sorted(p for p in (tmp_path / "2").rglob("*.csv"))
    assert a and [p.name for p in a] == [p.name for p in b]
    assert all(x.read_bytes() != y.read_bytes() for x, y in zip(a, b))


@pytest.mark.parametrize("axis", ["mode", "kernel"])
def test_ablate_four_rows(tmp_path, axis):
    assert main(["ablate", "--axis", axis, "--rounds", "1", "--clients", "2", "--points", "6",
                 "--out", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "ablation.csv")
    assert [r["value"] for r in rows] == cli.ABLATION_AXES[axis]
    assert all(r["status"] == "ok" and float(r["mse"]) >= 0 and 0 <= float(r["acc"]) <= 1 for r in rows)
    assert (tmp_path / "ablation.png").exists()


@pytest.mark.parametrize("axis", ["mode", "kernel"])
def test_ablation_cells_share_data(axis):
    cfg = ExperimentConfig(n_clients=2, n_points=6)
    seen = []
    for v in cli.ABLATION_AXES[axis]:
        train, new, _ = cli.load_data(cli._cell(cfg, axis, v))
        seen.append([(t.X.tobytes(), t.y.tobytes(), t.train.tobytes()) for d in train for t in d.tasks])
    assert all(s == seen[0] for s in seen)


def test_ablation_cell_failure_is_recorded(tmp_path, monkeypatch):
    real = cli._experiment

    def flaky(cfg, *a, **k):
        if cfg.aggregation_mode == "K":
            raise InputError("synthetic failure")
        return real(cfg, *a, **k)
    monkeypatch.setattr(cli, "_experiment", flaky)
    code = cli.cmd_ablate(ExperimentConfig(n_clients=2, n_points=6, rounds=1, figures=False, out=str(tmp_path)),
                          "mode")
    rows = read_rows(tmp_path / "ablation.csv")
    assert code == cli.EXIT_FAILED
    assert [r["status"] for r in rows] == ["ok", "failed", "ok", "ok"]


def test_failed_run_flags_status(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"W": [[1.0, 2.0, 3.0]]}))
    assert main(["run", "--config", str(cfg), "--rounds", "1", "--out", str(tmp_path / "o")]) == cli.EXIT_FAILED
    status = json.loads((tmp_path / "o" / "run_status.json").read_text())
    assert status["status"] == "failed" and "W" in status["error"]["message"]


def test_new_clients_are_evaluated(tmp_path):
    cfg = ExperimentConfig(n_clients=2, n_points=6, rounds=1, new_clients=1, figures=False, out=str(tmp_path))
    assert cli.cmd_run(cfg) == 0
    rows = read_rows(tmp_path / "metrics.csv")
    assert {r["client"] for r in rows if r["round"] == "1"} == {"0", "1", "2"}
    assert "2" not in {r["client"] for r in rows if r["round"] == "0"}
    assert np.isfinite([float(r["elbo_total"]) for r in rows]).all()
