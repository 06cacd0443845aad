"""Figures for a finished run, rendered to PNG files with the Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_budget_curves(curves: dict, path: Path, title: str = "") -> Path:
    """Accuracy against average cost fraction, one line per labelled curve."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    for label, points in curves.items():
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        order = np.argsort(pts[:, 1], kind="stable")
        ax.plot(pts[order, 1], pts[order, 2], marker=".", label=label)
    ax.set_xlabel("average cost (fraction of backbone)")
    ax.set_ylabel("accuracy")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, path)


def plot_matrix(matrix, path: Path, title: str) -> Path:
    """Heatmap of accuracy[classifier][task]."""
    m = np.asarray(matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(1 + 0.7 * m.shape[1], 1 + 0.5 * m.shape[0]))
    im = ax.imshow(m, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    for (i, t), v in np.ndenumerate(m):
        ax.text(t, i, f"{v:.2f}", ha="center", va="center", fontsize=7, color="w" if v < 0.6 else "k")
    ax.set_xticks(range(m.shape[1]), [str(t + 1) for t in range(m.shape[1])])
    ax.set_yticks(range(m.shape[0]), [f"IC{i + 1}" for i in range(m.shape[0] - 1)] + ["final"])
    ax.set_xlabel("task")
    ax.set_title(title)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_task_bars(series: dict, path: Path, ylabel: str, title: str) -> Path:
    """Grouped bars per task; ``None`` entries are drawn as gaps."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    width = 0.8 / max(len(series), 1)
    for s, (label, values) in enumerate(series.items()):
        xs = np.arange(len(values)) + s * width
        ys = [np.nan if v is None else v for v in values]
        ax.bar(xs, ys, width=width, label=label)
    n = max((len(v) for v in series.values()), default=0)
    ax.set_xticks(np.arange(n) + 0.4 - width / 2, [str(t + 1) for t in range(n)])
    ax.set_xlabel("task")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def render_manifest_figures(manifest: dict, outdir) -> list[Path]:
    outdir = Path(outdir)
    metrics = manifest.get("metrics", {})
    curves = manifest.get("curves", {})
    method = manifest["config"]["method"]
    written = []
    lines = {"no TLC": curves["base"]["points"]} if "base" in curves else {}
    if curves.get("tlc"):
        lines["TLC"] = curves["tlc"]["points"]
    if lines:
        written.append(plot_budget_curves(lines, outdir / "budget_curves.png", method))
    if "forgetting_matrix" in metrics:
        written.append(plot_matrix(metrics["forgetting_matrix"], outdir / "forgetting.png", f"{method}: accuracy per task"))
    if "task_aware_matrix" in metrics:
        written.append(plot_matrix(metrics["task_aware_matrix"], outdir / "task_aware.png", f"{method}: task-aware accuracy"))
    conf = {"no TLC": metrics.get("confidence_by_task", [])}
    if "confidence_by_task_tlc" in metrics:
        conf["TLC"] = metrics["confidence_by_task_tlc"]
    if conf["no TLC"]:
        written.append(plot_task_bars(conf, outdir / "confidence_by_task.png", "mean correct confidence", f"{method}: final classifier"))
    tlc = manifest.get("tlc") or {}
    if tlc.get("mean_task_max"):
        written.append(plot_task_bars({"after TLC": tlc["mean_task_max"]}, outdir / "task_max_logits.png", "mean max logit", "last-task data"))
    return written


def render_run_figures(result, outdir) -> list[Path]:
    return render_manifest_figures(result.manifest, outdir)


def render_sweep_figure(manifests: list[dict], path) -> Path:
    """Budget curves of several runs on one axis, labelled by seed."""
    curves = {}
    for m in manifests:
        seed = m["config"]["seed"]
        for key, label in (("base", "no TLC"), ("tlc", "TLC")):
            c = (m.get("curves") or {}).get(key)
            if c:
                curves[f"seed {seed} {label}"] = c["points"]
    return plot_budget_curves(curves, Path(path), manifests[0]["config"]["method"] if manifests else "")
