"""Trajectory/occupancy tables and SVG panels for a ``run-all`` output directory."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .core import Buffer, TaskSpec, read_buffer, rollout  # noqa: E402
from .pipeline import UDGConfig  # noqa: E402
from .policy import _derive_seed, read_policies  # noqa: E402
from .transport import occupancy_from_buffer  # noqa: E402

# fixed ids and no timestamp so repeated plots are byte-identical
plt.rcParams["svg.hashsalt"] = "udg"
_SVG_META = {"Date": None, "Creator": "udg"}


def trajectory_rows(buf: Buffer, label: str) -> list[list]:
    rows = []
    for e, sl in enumerate(buf.episode_slices()):
        xs = np.vstack([buf.s[sl][:1], buf.s2[sl]])
        rows.extend([label, e, t, float(x), float(y)] for t, (x, y) in enumerate(xs[:, :2]))
    return rows


def write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _panel(ax, buf: Buffer, color, max_episodes: int = 5, **kw) -> None:
    for sl in buf.episode_slices()[:max_episodes]:
        xs = np.vstack([buf.s[sl][:1], buf.s2[sl]])
        ax.plot(xs[:, 0], xs[:, 1], color=color, lw=0.8, alpha=0.8, **kw)
        kw.pop("label", None)


def _square(ax, spec) -> None:
    (xl, xh), (yl, yh) = spec.state_bounds[:2]
    ax.set_xlim(xl, xh)
    ax.set_ylim(yl, yh)
    ax.set_aspect("equal")
    ax.plot(0, 0, "k+", ms=6)


def plot_run(run: Path, out: Path, cfg: UDGConfig, n_episodes: int = 5) -> list[Path]:
    """Write trajectories.csv, occupancy.csv, ensemble.svg and angles.svg under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    spec = cfg.spec
    buffers = {p.stem: read_buffer(p) for p in sorted((run / "buffers").glob("*.jsonl"))}
    rows, occ = [], []
    for name, buf in buffers.items():
        rows += trajectory_rows(buf, name)
        mu = occupancy_from_buffer(buf, spec.gamma, (0, 1), cap=500, seed=0)
        occ += [[name, float(x), float(y), float(w)] for (x, y), w in zip(mu.points, mu.weights)]
    write_csv(out / "trajectories.csv", ["source", "episode", "t", "x", "y"], rows)
    write_csv(out / "occupancy.csv", ["source", "x", "y", "weight"], occ)
    written = [out / "trajectories.csv", out / "occupancy.csv"]

    # ensemble panel: every diverse behaviour policy, one color each
    diverse = {k: b for k, b in buffers.items() if k.startswith("diverse")}
    fig, ax = plt.subplots(figsize=(5, 5))
    cmap = plt.get_cmap("tab10")
    for i, (name, buf) in enumerate(diverse.items()):
        _panel(ax, buf, cmap(i % 10), n_episodes, label=name)
    if "supervised" in buffers:
        _panel(ax, buffers["supervised"], "k", n_episodes, ls="--", label="supervised")
    _square(ax, spec)
    ax.set_title("behaviour policies")
    ax.legend(fontsize=6, loc="upper right")
    fig.savefig(out / "ensemble.svg", metadata=_SVG_META)
    plt.close(fig)
    written.append(out / "ensemble.svg")

    # one panel per task: offline policy from the selected buffer vs from the supervised buffer
    report_path = run / "report.json"
    if report_path.exists() and (run / "offline_udg.jsonl").exists():
        report = json.loads(report_path.read_text())
        udg = read_policies(run / "offline_udg.jsonl")
        sup = read_policies(run / "offline_supervised.jsonl")
        tasks = [TaskSpec.parse(t) for t in report["config"]["tasks"]]
        fig, axes = plt.subplots(1, len(tasks), figsize=(3 * len(tasks), 3.2), squeeze=False)
        for j, (task, ax) in enumerate(zip(tasks, axes[0])):
            seed = _derive_seed(cfg.seed, 77, j)
            _panel(ax, rollout(udg[j], spec, task, n_episodes, seed), "tab:blue", label="UDG")
            _panel(ax, rollout(sup[j], spec, task, n_episodes, seed), "tab:red", label="supervised")
            if task.kind == "angle":
                d = 4 * task.direction()
                ax.annotate("", xy=d, xytext=(0, 0), arrowprops={"arrowstyle": "->", "color": "gray"})
            _square(ax, spec)
            ax.set_title(task.label(), fontsize=8)
            ax.tick_params(labelsize=6)
        axes[0][0].legend(fontsize=6, loc="lower left")
        fig.tight_layout()
        fig.savefig(out / "angles.svg", metadata=_SVG_META)
        plt.close(fig)
        written.append(out / "angles.svg")
    return written
