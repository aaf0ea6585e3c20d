# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Ablations: which supervision helps the camera student?
#
# **Question**: does adding LiDAR-feature imitation, then label-feature
# imitation, then channel partitioning improve a camera-only BEV detector
# in this world, and where?
#
# The full study is `bevkd ablate <axis> --seeds 0 1 2` at the default
# configuration (about an hour on one CPU core). If such a run directory is
# given in `BEVKD_ABLATION_DIR`, this notebook reads its tables; otherwise
# it reruns a shrunken version so the cells stay executable in minutes.
# Shrunken numbers are noisier and lower than the full ones.

# %%
import json
import os
from pathlib import Path

import matplotlib

try:
    get_ipython()  # noqa: F821
except NameError:
    matplotlib.use("Agg")
import matplotlib.pyplot as plt

from bevkd import pipeline, plots
from bevkd.config import ExperimentConfig

src = os.environ.get("BEVKD_ABLATION_DIR")
results = {}
if src:
    for axis in ("components", "distance"):
        p = Path(src) / f"{axis}.json"
        if p.exists():
            results[axis] = json.loads(p.read_text())["metrics"]
if not results:
    cfg = ExperimentConfig().replace(**{"data.n_train": 600, "data.n_val": 200,
                                        "teacher.epochs": 10, "labelenc.epochs": 8, "student.epochs": 4})
    bench = pipeline.Workbench(cfg)
    for axis in ("components", "distance"):
        results[axis] = pipeline.run_ablation_matrix(cfg, axis, seeds=(0, 1), bench=bench)
    print("teacher val mAP", round(pipeline.evaluate_teacher(bench.teacher(), bench.data, cfg)["mAP"], 3))

# %% [markdown]
# ## Component table
#
# (a) camera baseline, (b) + LiDAR feature and response distillation,
# (c) + label-feature distillation, (d) + channel partitioning.

# %%
for r in results["components"]["summary"]:
    print(f"{r['config']}  mAP {r['mAP']:.3f} +- {r['mAP_std']:.3f}   NDS* {r['NDS*']:.3f}   "
          f"mATE {r['mATE']:.3f}  mASE {r['mASE']:.3f}")
out = Path("notebook_figures")
out.mkdir(exist_ok=True)
plots.bar_chart(results["components"]["summary"], out / "components_bars.png", title="components")
plt.imshow(plt.imread(out / "components_bars.png"))
plt.axis("off")
plt.show()

# %% [markdown]
# At the full defaults (3 seeds, 2000 training scenes) the four rows land
# within 0.004 mAP of each other, against a seed spread near 0.014, with
# (d) on top. In the shrunken run, where the student trains for only four
# epochs, LiDAR imitation gives a visible head start while the label rows
# are noisy. The camera only gives exact direction and class plus a range
# cue with 15 % error. The teacher's and the labels' extra knowledge
# (exact range, size, heading) is mostly not recoverable from that input,
# so once the student has converged, imitating it barely moves mAP.
#
# ## Near against far
#
# The one place the labels are expected to matter is far away, where the
# LiDAR teacher itself sees only a few points. Size error in the far bucket:

# %%
for r in results["distance"]["table"]:
    print(f"{r['config']:18s} n_gt {r['n_gt']:6.0f}  mAP {r['mAP']:.3f}  mASE {r['mASE']:.3f}")
plots.distance_lines(results["distance"]["summary"], out / "distance_mASE.png")
plt.imshow(plt.imread(out / "distance_mASE.png"))
plt.axis("off")
plt.show()
