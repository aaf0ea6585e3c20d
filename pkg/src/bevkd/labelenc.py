"""Label encoder: embeds ground-truth boxes into the teacher's BEV feature space.

Per object, class and box MLP embeddings are summed, written into the
object's footprint cells, and refined by a small conv block. Trained so that
the frozen teacher head decodes the result back into the same boxes.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .bevgrid import BevGridSpec, footprint_owner
from .config import ExperimentConfig, WorldSpec
from .dataset import Batch, box_attributes
from .detectors import CenterHead, conv_bn
from .synthworld import Scene


def _mlp(cin: int, d: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(cin, d), nn.ReLU(inplace=True), nn.Linear(d, d))


class LabelEncoder(nn.Module):
    """``f(q(phi_cls(class) + phi_box(box)))``.

    ``phi_box`` sees the six box attributes plus the box center's offset
    inside its grid cell (derived from the normalized position and
    ``grid_cells``). The conv block is translation-equivariant, so without
    this it could not express sub-cell positions to the head.
    """

    def __init__(self, num_classes: int, label_dim: int, teacher_channels: int,
                 position_blind: bool = False, grid_cells: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.d = label_dim
        self.position_blind = position_blind
        self.grid_cells = grid_cells
        self.phi_cls = _mlp(num_classes, label_dim)
        self.phi_box = _mlp(8, label_dim)
        self.refine = nn.Sequential(conv_bn(label_dim, teacher_channels),
                                    conv_bn(teacher_channels, teacher_channels))

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, position_blind: bool = False) -> "LabelEncoder":
        return cls(cfg.world.num_classes, cfg.model.label_dim, cfg.model.teacher_channels,
                   position_blind, cfg.grid.cells)

    def box_inputs(self, attrs: torch.Tensor) -> torch.Tensor:
        """(n, 6) attributes -> (n, 8) with the in-cell offsets in [-0.5, 0.5) appended."""
        u = attrs[:, :2] * self.grid_cells
        offset = u - torch.floor(u) - 0.5
        z = torch.cat([attrs, offset], dim=1)
        if self.position_blind:
            z = torch.cat([torch.zeros_like(z[:, :2]), z[:, 2:6], torch.zeros_like(offset)], dim=1)
        return z

    def object_vectors(self, cls_onehot: torch.Tensor, attrs: torch.Tensor) -> torch.Tensor:
        return self.phi_cls(cls_onehot) + self.phi_box(self.box_inputs(attrs))

    def pre_refine(self, cls_onehot, attrs, owner) -> torch.Tensor:
        """BEV map before the conv block: (N, d, H, W), object vectors in footprints, zero elsewhere."""
        vec = self.object_vectors(cls_onehot, attrs)
        padded = torch.cat([vec.new_zeros(1, self.d), vec], dim=0)
        return padded[owner + 1].permute(0, 3, 1, 2).contiguous()

    def forward(self, cls_onehot, attrs, owner) -> torch.Tensor:
        return self.refine(self.pre_refine(cls_onehot, attrs, owner))

    def forward_batch(self, b: Batch) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        return self(b.obj_cls.to(dtype), b.obj_attr.to(dtype), b.owner)


def scene_inputs(scene: Scene, grid: BevGridSpec, world: WorldSpec):
    m = world.num_classes
    onehot = torch.zeros(len(scene.boxes), m)
    for k, b in enumerate(scene.boxes):
        onehot[k, b.class_id] = 1.0
    attrs = torch.as_tensor(box_attributes(scene.boxes, world))
    owner = torch.as_tensor(footprint_owner(scene.boxes, grid))[None]
    return onehot, attrs, owner


def encode_labels(encoder: LabelEncoder, scene: Scene, grid: BevGridSpec, world: WorldSpec) -> torch.Tensor:
    """F_label for one scene, (1, C_T, H, W)."""
    onehot, attrs, owner = scene_inputs(scene, grid, world)
    dtype = next(encoder.parameters()).dtype
    return encoder(onehot.to(dtype), attrs.to(dtype), owner)


class HeadReplica(CenterHead):
    """Fresh, trainable copy of the head structure for the from-scratch autoencoder variants."""
