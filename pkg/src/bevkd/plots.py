"""Static figures for ablation tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def bar_chart(summary: list[dict], path, metrics=("mAP", "NDS*"), title: str = "") -> Path:
    """Grouped bars of mean metrics per config, with seed std as error bars when present."""
    names = [r["config"] for r in summary]
    x = np.arange(len(names))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(1.6 + 1.3 * len(names), 3.4))
    for k, m in enumerate(metrics):
        vals = [r[m] for r in summary]
        err = [r.get(f"{m}_std", 0.0) for r in summary]
        ax.bar(x + (k - (len(metrics) - 1) / 2) * width, vals, width, yerr=err, capsize=3, label=m)
    ax.set_xticks(x, names)
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def distance_lines(summary: list[dict], path, metric: str = "mASE") -> Path:
    """``metric`` in the near and far buckets, one line per config."""
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    for r in summary:
        ax.plot(["near", "far"], [r[f"near_{metric}"], r[f"far_{metric}"]], marker="o", label=r["config"])
    ax.set_ylabel(metric)
    ax.set_xlabel("object distance")
    ax.legend(frameon=False)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def figures_for(result: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    axis = result["axis"]
    paths = [bar_chart(result["summary"], out / f"{axis}_bars.png", title=axis)]
    if axis == "distance":
        paths.append(distance_lines(result["summary"], out / "distance_mASE.png"))
    return paths
