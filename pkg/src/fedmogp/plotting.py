"""Figures written next to the CSV/JSON outputs of a run."""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def reliability_figure(diagram, path):
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    edges = diagram.edges
    centers = 0.5 * (edges[:-1] + edges[1:])
    width = edges[1] - edges[0]
    acc = np.nan_to_num(diagram.accuracy, nan=0.0)
    ax.bar(centers, acc, width=width * 0.95, color="tab:blue", alpha=0.7, label="accuracy")
    ax.plot([0.5, 1.0], [0.5, 1.0], "k--", lw=1, label="calibrated")
    ax.set_xlim(0.5, 1.0)
    ax.set_ylim(0.0, 1.0)
    ax.set_xlabel("confidence")
    ax.set_ylabel("empirical accuracy")
    ax.set_title(f"ECE = {diagram.ece:.4f}")
    ax.legend(loc="upper left")
    return _save(fig, path)


def latent_figure(predictions, path, truth=None, max_clients=4):
    """Posterior mean +- 2 sd per task for the first clients; 1-D inputs only."""
    clients = sorted({p["client"] for p in predictions}, key=lambda c: (len(c), c))[:max_clients]
    kinds = sorted({(p["task"], p["kind"]) for p in predictions}, key=lambda t: (t[1] != "regression", t[0]))
    fig, axes = plt.subplots(len(clients), len(kinds), figsize=(4 * len(kinds), 2.6 * len(clients)),
                             squeeze=False)
    for r, cid in enumerate(clients):
        for c, (tid, kind) in enumerate(kinds):
            ax = axes[r, c]
            match = [p for p in predictions if p["client"] == cid and p["task"] == tid]
            if not match or match[0]["X"].shape[1] != 1:
                ax.set_axis_off()
                continue
            p = match[0]
            x = p["X"][:, 0]
            order = np.argsort(x)
            mu, sd = p["mean"][order], np.sqrt(p["variance"][order])
            ax.plot(x[order], mu, color="tab:blue", lw=1.2, label="posterior mean")
            ax.fill_between(x[order], mu - 2 * sd, mu + 2 * sd, color="tab:blue", alpha=0.2)
            ax.scatter(x, p["target"], s=6, color="k", alpha=0.5, label="targets")
            if truth is not None and cid.isdigit() and int(cid) < len(truth.x):
                z = int(cid)
                f = truth.f_r[z] if kind == "regression" else truth.f_c[z]
                gx = truth.x[z][:, 0]
                ax.plot(gx, f, color="tab:red", lw=1, ls="--", label="true latent")
            ax.set_title(f"client {cid}, {tid} ({kind})", fontsize=9)
            if r == 0 and c == 0:
                ax.legend(fontsize=7)
    return _save(fig, path)


def elbo_trace_figure(round_logs, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    rounds = [r.round + 1 for r in round_logs]
    ax.plot(rounds, [r.elbo_before for r in round_logs], "o-", ms=3, label="before server step")
    ax.plot(rounds, [r.elbo_after for r in round_logs], "s--", ms=3, label="after server step")
    ax.set_xlabel("round")
    ax.set_ylabel("averaged ELBO")
    ax.legend()
    return _save(fig, path)


def ablation_figure(rows, axis, path):
    values = [r["value"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    for ax, key in zip(axes, ("mse", "acc")):
        ys = [r[key] if r[key] is not None and not math.isnan(r[key]) else 0.0 for r in rows]
        ax.bar(values, ys, color="tab:green" if key == "acc" else "tab:orange")
        ax.set_xlabel(axis)
        ax.set_ylabel(key.upper())
    return _save(fig, path)
