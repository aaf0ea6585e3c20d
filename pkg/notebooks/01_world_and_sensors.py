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
# # The synthetic world and its two sensors
#
# **Question**: what does each modality actually see, and where does the
# LiDAR stop being informative?
#
# Every scene is a forward half-plane with up to six boxes of three classes.
# The LiDAR samples the sensor-facing edges of each box with an expected
# count of `k_pts / d^2`, so distant objects get few returns and nearer
# boxes shadow farther ones. The camera is a 1-D panorama: per azimuth
# column it reports the class, the angular width of the object and a range
# cue whose error grows linearly with distance.

# %%
import matplotlib

try:
    get_ipython()  # noqa: F821
except NameError:
    matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from bevkd.config import ExperimentConfig
from bevkd.synthworld import azimuth_centers, expected_point_count, generate_scenes, render_lidar

cfg = ExperimentConfig()
spec = cfg.world
scenes = generate_scenes(spec, 200)
print(f"k_pts={spec.k_pts}  range_sigma={spec.range_sigma}  grid={cfg.grid.cells} cells")

# %% [markdown]
# ## One scene from above
#
# Boxes in ground truth, LiDAR returns as dots. Note the missing back faces
# and the shadowed box behind its neighbour.

# %%
sc = max(scenes[:40], key=lambda s: len(s.boxes))
fig, ax = plt.subplots(figsize=(7, 3.8))
for b in sc.boxes:
    poly = np.vstack([b.corners(), b.corners()[:1]])
    ax.plot(poly[:, 0], poly[:, 1], color=f"C{b.class_id}")
ax.scatter(sc.lidar_points[:, 0], sc.lidar_points[:, 1], s=2, color="k")
ax.scatter([0], [0], marker="^", color="r")
ax.set_xlim(-spec.extent, spec.extent)
ax.set_ylim(0, spec.extent)
ax.set_aspect("equal")
ax.set_title(f"scene {sc.scene_id}: {len(sc.boxes)} boxes, {len(sc.lidar_points)} points")
plt.show()

# %% [markdown]
# ## The same scene through the camera
#
# The panorama columns carry the class one-hot, a background flag, the
# angular width and the noisy range cue (normalised by the extent).

# %%
pano = sc.panorama
fig, axes = plt.subplots(2, 1, figsize=(7, 3.4), sharex=True)
axes[0].imshow(pano[:, : spec.num_classes + 1].T, aspect="auto", cmap="Greys", interpolation="nearest")
axes[0].set_ylabel("class / bg")
th = np.degrees(azimuth_centers(spec))
true_r = np.full(len(th), np.nan)
for b in sc.boxes:
    lo, hi = b.angular_span()
    cols = (np.radians(th) >= lo) & (np.radians(th) <= hi)
    true_r[cols] = b.distance
cue = np.where(pano[:, spec.num_classes] > 0, np.nan, pano[:, -1] * spec.extent)
axes[1].plot(np.arange(len(th)), true_r, label="true centre distance")
axes[1].plot(np.arange(len(th)), cue, ".", label="range cue")
axes[1].set_ylabel("m")
axes[1].set_xlabel("azimuth column")
axes[1].legend(frameon=False)
plt.tight_layout()
plt.show()

# %% [markdown]
# ## Sparsity against distance
#
# Observed returns per object next to the expected count. Beyond roughly
# 30 m most objects keep only a handful of points, which is the regime
# where dense label supervision is expected to help most.

# %%
d, n = [], []
for s in scenes:
    _, owner = render_lidar(s, spec, return_owner=True)
    for i, b in enumerate(s.boxes):
        d.append(b.distance)
        n.append(int((owner == i).sum()))
d, n = np.array(d), np.array(n)
grid_d = np.linspace(3, spec.extent * 1.1, 100)
fig, ax = plt.subplots(figsize=(5, 3.2))
ax.scatter(d, n, s=4, alpha=0.5, label="observed")
ax.plot(grid_d, [expected_point_count(x, spec.k_pts) for x in grid_d], color="C1", label="k/d^2")
ax.set_yscale("symlog")
ax.set_xlabel("object distance [m]")
ax.set_ylabel("LiDAR returns")
ax.legend(frameon=False)
plt.show()
for lo, hi in ((0, 15), (15, 30), (30, 60)):
    sel = (d >= lo) & (d < hi)
    print(f"{lo:2d}-{hi:2d} m: {sel.sum():4d} objects, median {np.median(n[sel]):6.1f} points, "
          f"{(n[sel] == 0).mean():.0%} with none")
