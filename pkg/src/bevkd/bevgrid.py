"""BEV grid geometry, ground-truth heatmaps, foreground masks and the box-to-grid mapping."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .config import WorldSpec
from .synthworld import BoxLabel, Scene


@dataclass(frozen=True)
class BevGridSpec:
    """Row index ``i`` runs along world y, column ``j`` along world x."""

    H: int
    W: int
    cell_size: float
    origin: tuple[float, float]

    def __post_init__(self):
        if self.cell_size <= 0 or self.H < 1 or self.W < 1:
            raise ValueError("grid needs positive size and cell count")

    @classmethod
    def for_world(cls, world: WorldSpec, cells: int) -> "BevGridSpec":
        return cls(cells, cells, world.extent / cells, (-world.extent / 2, 0.0))

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        j = math.floor((x - self.origin[0]) / self.cell_size)
        i = math.floor((y - self.origin[1]) / self.cell_size)
        return i, j

    def inside(self, i: int, j: int) -> bool:
        return 0 <= i < self.H and 0 <= j < self.W

    def cell_center(self, i, j):
        x = self.origin[0] + (np.asarray(j) + 0.5) * self.cell_size
        y = self.origin[1] + (np.asarray(i) + 0.5) * self.cell_size
        return x, y

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(H, W) arrays of cell-center x and y."""
        jj, ii = np.meshgrid(np.arange(self.W), np.arange(self.H))
        return self.cell_center(ii, jj)


@dataclass
class FeatureMap:
    grid: BevGridSpec
    data: np.ndarray  # (H, W, C)

    @property
    def C(self) -> int:
        return self.data.shape[-1]


@dataclass
class Heatmap:
    grid: BevGridSpec
    data: np.ndarray  # (m, H, W)


@dataclass
class ForegroundMask:
    grid: BevGridSpec
    mask: np.ndarray  # (H, W) uint8
    n_p: int


class GridError(ValueError):
    pass


def gaussian_radius(box: BoxLabel, grid: BevGridSpec, beta: float = 0.5, r_min: float = 2) -> float:
    return max(float(r_min), beta * min(box.w, box.l) / grid.cell_size)


def gaussian_sigma(radius: float) -> float:
    return (2 * radius + 1) / 6


def center_cell(box: BoxLabel, grid: BevGridSpec) -> tuple[int, int]:
    i, j = grid.cell_of(box.x, box.y)
    if not grid.inside(i, j):
        raise GridError(f"box center ({box.x:.2f}, {box.y:.2f}) of class {box.class_id} lies outside the grid")
    return i, j


def gt_heatmap(scene: Scene | list[BoxLabel], grid: BevGridSpec, num_classes: int,
               beta: float = 0.5, r_min: float = 2) -> Heatmap:
    """Max-combined Gaussian splats, peak 1 at each object's center cell, truncated at ``floor(r)``."""
    boxes = scene.boxes if isinstance(scene, Scene) else scene
    hm = np.zeros((num_classes, grid.H, grid.W), np.float32)
    for b in boxes:
        ci, cj = center_cell(b, grid)
        r = gaussian_radius(b, grid, beta, r_min)
        sig = gaussian_sigma(r)
        k = int(r)
        i0, i1 = max(0, ci - k), min(grid.H, ci + k + 1)
        j0, j1 = max(0, cj - k), min(grid.W, cj + k + 1)
        di = np.arange(i0, i1)[:, None] - ci
        dj = np.arange(j0, j1)[None, :] - cj
        g = np.exp(-(di * di + dj * dj) / (2 * sig * sig)).astype(np.float32)
        np.maximum(hm[b.class_id, i0:i1, j0:j1], g, out=hm[b.class_id, i0:i1, j0:j1])
    return Heatmap(grid, hm)


def foreground_mask(heatmap: Heatmap, tau: float = 0.1) -> ForegroundMask:
    if not 0 < tau <= 1:
        raise ValueError("tau must lie in (0, 1]")
    peak = heatmap.data.max(axis=0) if heatmap.data.size else np.zeros((heatmap.grid.H, heatmap.grid.W))
    mask = (peak >= tau).astype(np.uint8)
    return ForegroundMask(heatmap.grid, mask, int(mask.sum()))


def box_footprint(box: BoxLabel, grid: BevGridSpec) -> list[tuple[int, int]]:
    """Cells whose centers fall inside the rotated box; at least the center cell."""
    r = box.half_diagonal
    i_lo, j_lo = grid.cell_of(box.x - r, box.y - r)
    i_hi, j_hi = grid.cell_of(box.x + r, box.y + r)
    i_lo, j_lo = max(i_lo, 0), max(j_lo, 0)
    i_hi, j_hi = min(i_hi, grid.H - 1), min(j_hi, grid.W - 1)
    cells = []
    if i_lo <= i_hi and j_lo <= j_hi:
        ii, jj = np.meshgrid(np.arange(i_lo, i_hi + 1), np.arange(j_lo, j_hi + 1), indexing="ij")
        xs, ys = grid.cell_center(ii.ravel(), jj.ravel())
        inside = box.contains(np.stack([xs, ys], axis=1))
        cells = [(int(i), int(j)) for i, j, ok in zip(ii.ravel(), jj.ravel(), inside) if ok]
    if not cells:
        i, j = grid.cell_of(box.x, box.y)
        if grid.inside(i, j):
            cells = [(i, j)]
    return cells


def footprint_owner(boxes: list[BoxLabel], grid: BevGridSpec) -> np.ndarray:
    """(H, W) index of the box written last into each cell, -1 for background.

    Boxes are written in decreasing footprint area, so small boxes survive
    overlaps with large ones. Ties keep list order (stable sort).
    """
    owner = np.full((grid.H, grid.W), -1, np.int64)
    fps = [box_footprint(b, grid) for b in boxes]
    order = sorted(range(len(boxes)), key=lambda k: -len(fps[k]))
    for k in order:
        for i, j in fps[k]:
            owner[i, j] = k
    return owner


def map_to_bev(vectors, boxes: list[BoxLabel], grid: BevGridSpec, owner: np.ndarray | None = None):
    """Fill each box's footprint with its vector; returns (H, W, d), zero elsewhere.

    Accepts a numpy array or a torch tensor of shape (n, d) and returns the
    same kind; the torch path is differentiable w.r.t. ``vectors``.
    """
    n = len(boxes)
    if vectors.shape[0] != n:
        raise ValueError(f"got {vectors.shape[0]} vectors for {n} boxes")
    if owner is None:
        owner = footprint_owner(boxes, grid)
    d = vectors.shape[1]
    if isinstance(vectors, torch.Tensor):
        padded = torch.cat([vectors.new_zeros(1, d), vectors], dim=0)
        idx = torch.as_tensor(owner + 1, device=vectors.device)
        return padded[idx]
    padded = np.concatenate([np.zeros((1, d), vectors.dtype), vectors], axis=0)
    return padded[owner + 1]
