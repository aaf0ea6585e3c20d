"""Precomputed per-scene tensors (inputs, targets, masks, label-encoder inputs) and batching."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .bevgrid import BevGridSpec, foreground_mask, footprint_owner, Heatmap
from .config import ExperimentConfig, WorldSpec
from .detectors import depth_targets, encode_targets, rasterize_points
from .synthworld import BoxLabel, Scene


def box_attributes(boxes: list[BoxLabel], world: WorldSpec, position_blind: bool = False) -> np.ndarray:
    """(n, 6) label-encoder box inputs: x, y in [0, 1], log w, log l, sin yaw, cos yaw."""
    out = np.zeros((len(boxes), 6), np.float32)
    for k, b in enumerate(boxes):
        out[k] = [(b.x + world.extent / 2) / world.extent, b.y / world.extent,
                  math.log(b.w), math.log(b.l), math.sin(b.yaw), math.cos(b.yaw)]
    if position_blind:
        out[:, :2] = 0.0
    return out


@dataclass
class Batch:
    points: torch.Tensor        # N, 4, H, W
    panorama: torch.Tensor      # N, A, ch
    depth_t: torch.Tensor       # N, A  (long, -1 = no hit)
    heatmap: torch.Tensor       # N, m, H, W
    regress: torch.Tensor       # N, 6, H, W
    center: torch.Tensor        # N, H, W
    fg: torch.Tensor            # N, H, W
    obj_cls: torch.Tensor       # n_obj, m  (one-hot)
    obj_attr: torch.Tensor      # n_obj, 6
    owner: torch.Tensor         # N, H, W  (index into obj_*, -1 background)
    index: np.ndarray           # dataset indices of the batch


class SceneTensors:
    """All tensors a training stage needs, computed once per dataset."""

    def __init__(self, scenes: list[Scene], cfg: ExperimentConfig, grid: BevGridSpec):
        w, g = cfg.world, cfg.grid
        m = w.num_classes
        self.scenes = scenes
        self.grid = grid
        self.boxes = [sc.boxes for sc in scenes]
        N = len(scenes)
        self.points = np.zeros((N, 4, grid.H, grid.W), np.float32)
        self.panorama = np.zeros((N, w.azimuth_bins, w.camera_channels), np.float32)
        self.depth_t = np.zeros((N, w.azimuth_bins), np.int64)
        self.heatmap = np.zeros((N, m, grid.H, grid.W), np.float32)
        self.regress = np.zeros((N, 6, grid.H, grid.W), np.float32)
        self.center = np.zeros((N, grid.H, grid.W), np.float32)
        self.fg = np.zeros((N, grid.H, grid.W), np.float32)
        self.owner = np.full((N, grid.H, grid.W), -1, np.int64)
        cls, attr, offsets = [], [], [0]
        for s, sc in enumerate(scenes):
            self.points[s] = rasterize_points(sc.lidar_points, grid)
            if sc.panorama is not None:
                self.panorama[s] = sc.panorama
            self.depth_t[s] = depth_targets(sc, w, cfg.model.depth_bins)
            hm, reg, ctr = encode_targets(sc.boxes, grid, m, g.beta, g.r_min)
            self.heatmap[s], self.regress[s], self.center[s] = hm, reg, ctr
            fgm = foreground_mask(Heatmap(grid, hm), g.tau).mask
            self.fg[s] = hm.max(axis=0) * fgm if g.soft_mask else fgm
            own = footprint_owner(sc.boxes, grid)
            self.owner[s] = np.where(own >= 0, own + offsets[-1], -1)
            onehot = np.zeros((len(sc.boxes), m), np.float32)
            onehot[np.arange(len(sc.boxes)), [b.class_id for b in sc.boxes]] = 1.0
            cls.append(onehot)
            attr.append(box_attributes(sc.boxes, w))
            offsets.append(offsets[-1] + len(sc.boxes))
        self.obj_cls = np.concatenate(cls) if cls else np.zeros((0, m), np.float32)
        self.obj_attr = np.concatenate(attr) if attr else np.zeros((0, 6), np.float32)
        self.offsets = np.array(offsets)

    def __len__(self) -> int:
        return len(self.scenes)

    def batch(self, idx) -> Batch:
        idx = np.asarray(idx)
        objs, owner = [], self.owner[idx].copy()
        start = 0
        for r, s in enumerate(idx):
            a, b = self.offsets[s], self.offsets[s + 1]
            objs.append(np.arange(a, b))
            own = owner[r]
            owner[r] = np.where(own >= 0, own - a + start, -1)
            start += b - a
        objs = np.concatenate(objs) if objs else np.zeros(0, int)
        t = torch.from_numpy
        return Batch(
            points=t(self.points[idx]), panorama=t(self.panorama[idx]), depth_t=t(self.depth_t[idx]),
            heatmap=t(self.heatmap[idx]), regress=t(self.regress[idx]), center=t(self.center[idx]),
            fg=t(self.fg[idx]), obj_cls=t(self.obj_cls[objs]), obj_attr=t(self.obj_attr[objs]),
            owner=t(owner), index=idx,
        )

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for k in range(0, len(order), batch_size):
            yield self.batch(order[k:k + batch_size])
