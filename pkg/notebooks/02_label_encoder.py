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
# # Teacher, label encoder and the inverse of the head
#
# **Question**: can a small network turn ground-truth boxes into features
# that the *frozen* LiDAR head decodes back into the same boxes?
#
# The label encoder embeds each box (class one-hot plus position, size,
# heading and in-cell offset) into a vector, paints it over the cells the
# box covers and refines the map with a few convolutions. Training only the
# encoder against the detection loss of the frozen teacher head makes it an
# approximate inverse of that head. If the round trip works, the encoder's
# features live in the teacher's feature space and can supervise a student.
#
# The configuration below is shrunk so the notebook runs in a few minutes;
# the acceptance suite uses the full defaults.

# %%
import matplotlib

try:
    get_ipython()  # noqa: F821
except NameError:
    matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from bevkd import pipeline
from bevkd.config import ExperimentConfig

cfg = ExperimentConfig().replace(**{"data.n_train": 600, "data.n_val": 150,
                                    "teacher.epochs": 10, "labelenc.epochs": 8})
data = pipeline.build_data(cfg)
teacher, t_hist = pipeline.train_teacher(cfg, data)
swapped = pipeline.Data(data.val, data.train, data.grid)
for name, d in (("train", swapped), ("val", data)):
    m = pipeline.evaluate_teacher(teacher, d, cfg)
    print(f"teacher {name:5s} mAP {m['mAP']:.3f}  mATE {m['mATE']:.3f}  mASE {m['mASE']:.3f}")

# %% [markdown]
# The gap between train and validation is large: with a few thousand
# LiDAR returns per scene the teacher memorises its training scenes. That
# matters later, because the student imitates the teacher on exactly those
# scenes.
#
# ## Fitting the inverse

# %%
before = pipeline.state_hash(teacher.head)
enc, head, le_hist = pipeline.train_label_encoder(cfg, data, teacher.head, "inverse", eval_every=2)
assert pipeline.state_hash(teacher.head) == before, "the head must stay frozen"
rows = [r for r in le_hist.rows if "mAP" in r]
fig, ax = plt.subplots(figsize=(4.5, 3))
ax.plot([r["epoch"] for r in rows], [r["mAP"] for r in rows], marker="o")
ax.set_xlabel("epoch")
ax.set_ylabel("autoencoder mAP (val)")
ax.set_ylim(0, 1)
plt.show()
print(pipeline.autoencoder_eval(enc, head, data.val, data.grid, cfg))

# %% [markdown]
# ## What the features look like
#
# Channel energy of the teacher features next to the label features for one
# validation scene. The label map is confined to the box footprints; the
# teacher responds to the visible edges and their surroundings.

# %%
b = data.val.batch([3])
with torch.no_grad():
    f_t, maps_t = teacher(b.points)
    f_l = enc.forward_batch(b)
    maps_l = head(f_l)
panels = [("GT heatmap", b.heatmap[0].max(0).values), ("teacher |f|", f_t[0].norm(dim=0)),
          ("label |f|", f_l[0].norm(dim=0)), ("head(label) heatmap", maps_l.heatmap[0].max(0).values)]
fig, axes = plt.subplots(1, 4, figsize=(12, 3))
for ax, (title, img) in zip(axes, panels):
    ax.imshow(np.asarray(img), origin="lower", cmap="magma")
    ax.set_title(title)
    ax.axis("off")
plt.tight_layout()
plt.show()

# %% [markdown]
# The decoded heatmap peaks where the ground truth does, so the frozen head
# reads the encoder's features the way it reads LiDAR features. Heading is
# worth a look: from LiDAR the teacher cannot tell a box from its mirror
# image (mAOE near pi/2), yet the round trip recovers it (mAOE well below
# 0.2). The head's heading channels work; the LiDAR outline just never
# gives them an unambiguous input.
