"""Teacher (points -> BEV) and student (panorama -> lifted BEV) center-heatmap detectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .bevgrid import BevGridSpec, center_cell, gt_heatmap
from .config import ExperimentConfig, WorldSpec
from .synthworld import BoxLabel, Scene, camera_hits

REG_CHANNELS = 6  # dx, dy, log w, log l, sin yaw, cos yaw
POINT_CHANNELS = 4  # log1p(count), mean dx, mean dy, occupied
HEATMAP_EPS = 1e-4


@dataclass
class DetectionMaps:
    heatmap: torch.Tensor  # (N, m, H, W), in (0, 1)
    regress: torch.Tensor  # (N, 6, H, W)

    def __getitem__(self, k) -> "DetectionMaps":
        return DetectionMaps(self.heatmap[k], self.regress[k])

    def detach(self) -> "DetectionMaps":
        return DetectionMaps(self.heatmap.detach(), self.regress.detach())


# ---------------------------------------------------------------------------
# Input rasterization and target encoding

def rasterize_points(points: np.ndarray, grid: BevGridSpec) -> np.ndarray:
    """(4, H, W) per-cell point statistics.

    Points are sorted before accumulation, so the result does not depend on
    input order down to the last bit.
    """
    out = np.zeros((POINT_CHANNELS, grid.H, grid.W), np.float32)
    pts = np.asarray(points, np.float64).reshape(-1, 2)
    if len(pts) == 0:
        return out
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    fx = (pts[:, 0] - grid.origin[0]) / grid.cell_size
    fy = (pts[:, 1] - grid.origin[1]) / grid.cell_size
    j, i = np.floor(fx).astype(int), np.floor(fy).astype(int)
    ok = (i >= 0) & (i < grid.H) & (j >= 0) & (j < grid.W)
    i, j, fx, fy = i[ok], j[ok], fx[ok], fy[ok]
    flat = i * grid.W + j
    n = grid.H * grid.W
    count = np.bincount(flat, minlength=n).astype(np.float64)
    sx = np.bincount(flat, weights=fx - j - 0.5, minlength=n)
    sy = np.bincount(flat, weights=fy - i - 0.5, minlength=n)
    nz = count > 0
    mx, my = np.zeros(n), np.zeros(n)
    mx[nz], my[nz] = sx[nz] / count[nz], sy[nz] / count[nz]
    out[0] = np.log1p(count).reshape(grid.H, grid.W)
    out[1] = mx.reshape(grid.H, grid.W)
    out[2] = my.reshape(grid.H, grid.W)
    out[3] = nz.reshape(grid.H, grid.W)
    return out


def encode_targets(boxes: list[BoxLabel], grid: BevGridSpec, num_classes: int,
                   beta: float = 0.5, r_min: float = 2):
    """Heatmap, dense regression target and center-cell mask for a box list."""
    hm = gt_heatmap(boxes, grid, num_classes, beta, r_min).data
    reg = np.zeros((REG_CHANNELS, grid.H, grid.W), np.float32)
    mask = np.zeros((grid.H, grid.W), np.float32)
    # larger boxes first so a smaller box sharing a center cell keeps its target
    for b in sorted(boxes, key=lambda b: -b.w * b.l):
        i, j = center_cell(b, grid)
        cx, cy = grid.cell_center(i, j)
        reg[:, i, j] = [
            (b.x - cx) / grid.cell_size, (b.y - cy) / grid.cell_size,
            math.log(b.w), math.log(b.l), math.sin(b.yaw), math.cos(b.yaw),
        ]
        mask[i, j] = 1.0
    return hm, reg, mask


def head_decode(maps: DetectionMaps, grid: BevGridSpec, score_thresh: float = 0.1,
                k_max: int = 50) -> list[tuple[BoxLabel, float]]:
    """Local 3x3 maxima above ``score_thresh`` (top ``k_max``) decoded into boxes, best first."""
    hm = torch.as_tensor(maps.heatmap).detach().float()
    reg = torch.as_tensor(maps.regress).detach().double()
    if hm.dim() == 4:
        hm, reg = hm[0], reg[0]
    peak = F.max_pool2d(hm[None], 3, stride=1, padding=1)[0]
    keep = (hm == peak) & (hm >= score_thresh)
    scores = torch.where(keep, hm, torch.zeros_like(hm)).flatten()
    k = min(k_max, int(keep.sum()))
    if k == 0:
        return []
    vals, idx = torch.topk(scores, k)
    m, H, W = hm.shape
    out = []
    for v, flat in zip(vals.tolist(), idx.tolist()):
        c, rem = divmod(flat, H * W)
        i, j = divmod(rem, W)
        r = reg[:, i, j].tolist()
        cx, cy = grid.cell_center(i, j)
        out.append((BoxLabel(
            class_id=c,
            x=float(cx + r[0] * grid.cell_size),
            y=float(cy + r[1] * grid.cell_size),
            w=float(math.exp(min(r[2], 5.0))),
            l=float(math.exp(min(r[3], 5.0))),
            yaw=math.atan2(r[4], r[5]),
        ), float(v)))
    return out


def depth_bin_edges(world: WorldSpec, depth_bins: int) -> np.ndarray:
    return np.linspace(0.0, world.extent * math.sqrt(2), depth_bins + 1)


def depth_targets(scene: Scene, world: WorldSpec, depth_bins: int) -> np.ndarray:
    """Per-column index of the true nearest-hit range bin; -1 where the ray hits nothing."""
    _, rng = camera_hits(scene, world)
    step = world.extent * math.sqrt(2) / depth_bins
    out = np.full(world.azimuth_bins, -1, np.int64)
    hit = np.isfinite(rng)
    out[hit] = np.minimum((rng[hit] / step).astype(np.int64), depth_bins - 1)
    return out


def lift_table(world: WorldSpec, grid: BevGridSpec, depth_bins: int, n_sub: int = 4):
    """Sparse (frustum bin -> BEV cell) weights for splatting a panorama frustum.

    Each (column, depth bin) wedge is sampled on an ``n_sub x n_sub`` polar
    lattice; each sample carries ``1 / n_sub^2`` of the bin's mass. Samples
    outside the grid are dropped. Returns (src, dst, weight) with
    ``src = column * D + bin`` and ``dst = i * W + j``.
    """
    A, D = world.azimuth_bins, depth_bins
    dr = world.extent * math.sqrt(2) / D
    da = math.pi / A
    sub = (np.arange(n_sub) + 0.5) / n_sub
    a = np.arange(A)[:, None, None, None]
    k = np.arange(D)[None, :, None, None]
    th = (a + sub[None, None, :, None]) * da
    r = (k + sub[None, None, None, :]) * dr
    th, r = np.broadcast_arrays(th, r)
    x, y = r * np.cos(th), r * np.sin(th)
    j = np.floor((x - grid.origin[0]) / grid.cell_size).astype(np.int64)
    i = np.floor((y - grid.origin[1]) / grid.cell_size).astype(np.int64)
    src = np.broadcast_to(np.arange(A)[:, None, None, None] * D + np.arange(D)[None, :, None, None], x.shape)
    ok = (i >= 0) & (i < grid.H) & (j >= 0) & (j < grid.W)
    src, dst = src[ok], (i * grid.W + j)[ok]
    key = src * (grid.H * grid.W) + dst
    uniq, counts = np.unique(key, return_counts=True)
    return (uniq // (grid.H * grid.W), uniq % (grid.H * grid.W), counts / float(n_sub * n_sub))


# ---------------------------------------------------------------------------
# Networks

def conv_bn(cin: int, cout: int, stride: int = 1, dilation: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BevEncoder(nn.Module):
    """Two-scale conv encoder: full-res branch plus a stride-2 context branch."""

    def __init__(self, cin: int, hidden: int, cout: int):
        super().__init__()
        self.stem = nn.Sequential(conv_bn(cin, hidden), conv_bn(hidden, hidden))
        self.down = nn.Sequential(conv_bn(hidden, hidden, stride=2), conv_bn(hidden, hidden, dilation=2))
        self.fuse = conv_bn(2 * hidden, cout)

    def forward(self, x):
        x = self.stem(x)
        ctx = F.interpolate(self.down(x), size=x.shape[-2:], mode="nearest")
        return self.fuse(torch.cat([x, ctx], dim=1))


class CenterHead(nn.Module):
    """Two 3x3 convs, then 1x1 heatmap and regression heads. No normalization."""

    def __init__(self, cin: int, num_classes: int, hidden: int):
        super().__init__()
        self.cin = cin
        self.shared = nn.Sequential(
            nn.Conv2d(cin, hidden, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.ReLU(inplace=True),
        )
        self.cls = nn.Conv2d(hidden, num_classes, 1)
        self.reg = nn.Conv2d(hidden, REG_CHANNELS, 1)
        nn.init.constant_(self.cls.bias, -2.19)

    def forward(self, feat) -> DetectionMaps:
        h = self.shared(feat)
        hm = torch.sigmoid(self.cls(h)).clamp(HEATMAP_EPS, 1 - HEATMAP_EPS)
        return DetectionMaps(hm, self.reg(h))


class Adapter(nn.Module):
    """3x3 conv stack mapping a student channel group to the teacher width."""

    def __init__(self, cin: int, cout: int, layers: int = 2, zero_init: bool = False):
        super().__init__()
        if cin < 1:
            raise ValueError("adapter needs at least one input channel")
        self.cin = cin
        mods: list[nn.Module] = [nn.Conv2d(cin, cout, 3, padding=1)]
        for _ in range(layers - 1):
            mods += [nn.ReLU(), nn.Conv2d(cout, cout, 3, padding=1)]
        self.net = nn.Sequential(*mods)
        if zero_init:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, x):
        if x.shape[1] != self.cin:
            raise ValueError(f"adapter expects {self.cin} channels, got {x.shape[1]}")
        return self.net(x)


class TeacherModel(nn.Module):
    def __init__(self, num_classes: int, teacher_channels: int, hidden: int):
        super().__init__()
        self.C_T = teacher_channels
        self.encoder = BevEncoder(POINT_CHANNELS, hidden, teacher_channels)
        self.head = CenterHead(teacher_channels, num_classes, hidden)

    def forward(self, point_grid):
        feat = self.encoder(point_grid)
        return feat, self.head(feat)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "TeacherModel":
        return cls(cfg.world.num_classes, cfg.model.teacher_channels, cfg.model.hidden)


class StudentModel(nn.Module):
    """Column encoder -> per-column depth distribution -> lift-splat into BEV -> encoder -> head.

    ``adapters`` holds the alignment convs for the lidar and label groups. With
    ``use_partition`` off each adapter reads the full student feature.
    """

    def __init__(self, world: WorldSpec, grid: BevGridSpec, partition, teacher_channels: int,
                 hidden: int = 32, column_channels: int = 32, depth_bins: int = 32,
                 adapter_layers: int = 2, use_partition: bool = True):
        super().__init__()
        self.grid, self.world = grid, world
        self.partition = partition
        self.C_S = partition.total
        self.D = depth_bins
        self.use_partition = use_partition
        cin = world.camera_channels
        self.columns = nn.Sequential(
            nn.Conv1d(cin, hidden, 3, padding=1, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Conv1d(hidden, hidden, 3, padding=1, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
        )
        self.col_feat = nn.Conv1d(hidden, column_channels, 1)
        self.col_depth = nn.Conv1d(hidden, depth_bins, 1)
        src, dst, w = lift_table(world, grid, depth_bins)
        self.register_buffer("lift_src", torch.as_tensor(src), persistent=False)
        self.register_buffer("lift_dst", torch.as_tensor(dst), persistent=False)
        self.register_buffer("lift_w", torch.as_tensor(w, dtype=torch.float32), persistent=False)
        col_cell = (self.lift_src // depth_bins) * (grid.H * grid.W) + self.lift_dst
        self.register_buffer("lift_col_cell", col_cell, persistent=False)
        self.encoder = BevEncoder(column_channels, hidden, self.C_S)
        self.head = CenterHead(self.C_S, world.num_classes, hidden)
        n_lidar = partition.lidar if use_partition else self.C_S
        n_label = partition.label if use_partition else self.C_S
        self.adapters = nn.ModuleDict()
        if n_lidar > 0:
            self.adapters["lidar"] = Adapter(n_lidar, teacher_channels, adapter_layers)
        if n_label > 0:
            self.adapters["label"] = Adapter(n_label, teacher_channels, adapter_layers)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig, grid: BevGridSpec) -> "StudentModel":
        m = cfg.model
        return cls(cfg.world, grid, cfg.partition, m.teacher_channels, m.hidden, m.column_channels,
                   m.depth_bins, m.adapter_layers, cfg.switches.use_partition)

    def column_forward(self, panorama):
        """panorama (N, A, ch) -> column features (N, Cc, A), depth probabilities (N, A, D)."""
        h = self.columns(panorama.transpose(1, 2))
        depth = torch.softmax(self.col_depth(h), dim=1).transpose(1, 2)
        return self.col_feat(h), depth

    def lift(self, feat, depth):
        """Splat ``feat[n, c, a] * depth[n, a, k]`` into the BEV grid -> (N, Cc, H, W).

        Depth probabilities are first spread into per-column cell weights
        ``G[n, a, cell]``; the splat is then one batched matmul.
        """
        N, C, A = feat.shape
        HW = self.grid.H * self.grid.W
        dw = depth.reshape(N, A * self.D)[:, self.lift_src] * self.lift_w.to(depth.dtype)
        G = depth.new_zeros(N, A * HW).index_add_(1, self.lift_col_cell, dw).reshape(N, A, HW)
        return torch.bmm(feat, G).reshape(N, C, self.grid.H, self.grid.W)

    def forward(self, panorama):
        feat, depth = self.column_forward(panorama)
        f_image = self.encoder(self.lift(feat, depth))
        return f_image, self.head(f_image), depth

    def adapt(self, features, which: str):
        if which not in self.adapters:
            raise ValueError(f"no adapter for group '{which}'")
        return self.adapters[which](features)


def student_forward(model: StudentModel, panorama):
    f_image, maps, _ = model(panorama)
    return f_image, maps


def teacher_forward(model: TeacherModel, points: np.ndarray, grid: BevGridSpec):
    x = torch.as_tensor(rasterize_points(points, grid))[None]
    x = x.to(next(model.parameters()).dtype)
    return model(x)
