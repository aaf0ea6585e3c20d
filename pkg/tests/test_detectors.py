import math

import numpy as np
import pytest
import torch

from bevkd.bevgrid import BevGridSpec
from bevkd.config import ExperimentConfig, PartitionSpec, WorldSpec
from bevkd.detectors import (
    Adapter, DetectionMaps, StudentModel, TeacherModel, depth_bin_edges, depth_targets,
    encode_targets, head_decode, lift_table, rasterize_points, student_forward, teacher_forward,
)
from bevkd.synthworld import BoxLabel, Scene, generate_scenes, render_lidar, wrap_angle

CFG = ExperimentConfig()
GRID = BevGridSpec.for_world(CFG.world, CFG.grid.cells)


@pytest.fixture(scope="module")
def teacher():
    torch.manual_seed(0)
    return TeacherModel.from_config(CFG).eval()


@pytest.fixture(scope="module")
def student():
    torch.manual_seed(0)
    return StudentModel.from_config(CFG, GRID).eval()


def test_teacher_shapes(teacher):
    sc = generate_scenes(CFG.world, 1)[0]
    feat, maps = teacher_forward(teacher, sc.lidar_points, GRID)
    assert feat.shape == (1, CFG.model.teacher_channels, GRID.H, GRID.W)
    assert maps.heatmap.shape == (1, CFG.world.num_classes, GRID.H, GRID.W)
    assert maps.regress.shape == (1, 6, GRID.H, GRID.W)
    assert (maps.heatmap > 0).all() and (maps.heatmap < 1).all()


def test_teacher_zero_points_is_a_valid_forward(teacher):
    feat, maps = teacher_forward(teacher, np.zeros((0, 2), np.float32), GRID)
    assert torch.isfinite(feat).all() and torch.isfinite(maps.regress).all()


def test_point_order_does_not_change_teacher_features(teacher):
    sc = generate_scenes(CFG.world, 3)[2]
    pts = sc.lidar_points
    perm = np.random.default_rng(0).permutation(len(pts))
    assert np.array_equal(rasterize_points(pts, GRID), rasterize_points(pts[perm], GRID))
    with torch.no_grad():
        a, _ = teacher_forward(teacher, pts, GRID)
        b, _ = teacher_forward(teacher, pts[perm], GRID)
    assert torch.equal(a, b)


def test_rasterized_statistics():
    pts = np.array([[-20 + 0.3, 0.2], [-20 + 0.5, 0.6], [0.1, 10.1]], np.float32)
    r = rasterize_points(pts, GRID)
    assert r[0, 0, 0] == pytest.approx(math.log(3))
    assert r[3].sum() == 2
    assert r[1, 0, 0] == pytest.approx((0.3 + 0.5) / 2 / 1.25 - 0.5, abs=1e-6)


def test_student_shapes_and_depth_rows(student):
    sc = generate_scenes(CFG.world, 2)
    pano = torch.as_tensor(np.stack([s.panorama for s in sc]))
    with torch.no_grad():
        f, maps, depth = student(pano)
    assert f.shape == (2, CFG.partition.total, GRID.H, GRID.W)
    assert maps.heatmap.shape == (2, CFG.world.num_classes, GRID.H, GRID.W)
    assert depth.shape == (2, CFG.world.azimuth_bins, CFG.model.depth_bins)
    assert torch.allclose(depth.sum(-1), torch.ones(2, CFG.world.azimuth_bins), atol=1e-5)
    f2, _ = student_forward(student, pano)
    assert torch.equal(f, f2)


def test_eval_mode_is_deterministic(student, teacher):
    pano = torch.as_tensor(generate_scenes(CFG.world, 1)[0].panorama)[None]
    with torch.no_grad():
        a = student(pano)
        b = student(pano)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1].heatmap, b[1].heatmap)


def test_shape_contract_over_widths():
    for cells, C_T, sizes in [(16, 8, (4, 4, 4)), (32, 16, (0, 6, 6)), (24, 12, (2, 3, 5))]:
        cfg = ExperimentConfig().replace(**{"grid.cells": cells, "model.teacher_channels": C_T,
                                            "switches.use_partition": True})
        cfg.partition = PartitionSpec(*sizes)
        g = BevGridSpec.for_world(cfg.world, cells)
        s = StudentModel.from_config(cfg, g).eval()
        with torch.no_grad():
            f, maps, _ = s(torch.zeros(1, cfg.world.azimuth_bins, cfg.world.camera_channels))
        assert f.shape == (1, sum(sizes), cells, cells)
        lid = f[:, sizes[0]:sizes[0] + sizes[1]]
        assert s.adapt(lid, "lidar").shape == (1, C_T, cells, cells)


# --- lift -------------------------------------------------------------------

def test_lift_weights_are_a_partition_of_unity_inside_the_grid():
    w = CFG.world
    src, dst, wt = lift_table(w, GRID, CFG.model.depth_bins)
    mass = np.bincount(src, weights=wt, minlength=w.azimuth_bins * CFG.model.depth_bins)
    assert np.all(mass <= 1 + 1e-9)
    edges = depth_bin_edges(w, CFG.model.depth_bins)
    inside = edges[1:] < w.extent / 2  # wedges wholly inside the grid for every column
    mass = mass.reshape(w.azimuth_bins, -1)
    assert np.allclose(mass[:, inside], 1.0)


def test_lift_conserves_column_mass(student):
    A, D = CFG.world.azimuth_bins, CFG.model.depth_bins
    torch.manual_seed(1)
    feat = torch.randn(2, 5, A)
    edges = depth_bin_edges(CFG.world, D)
    n_in = int((edges[1:] < CFG.world.extent / 2).sum())
    logits = torch.randn(2, A, n_in)
    depth = torch.zeros(2, A, D)
    depth[..., :n_in] = torch.softmax(logits, -1)
    bev = student.lift(feat, depth)
    assert torch.allclose(bev.sum(dim=(2, 3)), feat.sum(-1), rtol=1e-5, atol=1e-4)


def test_lift_matches_naive_splat(student):
    A, D = CFG.world.azimuth_bins, CFG.model.depth_bins
    src, dst, wt = lift_table(CFG.world, GRID, D)
    torch.manual_seed(2)
    feat = torch.randn(1, 3, A, dtype=torch.float64)
    depth = torch.softmax(torch.randn(1, A, D, dtype=torch.float64), -1)
    ref = np.zeros((3, GRID.H * GRID.W))
    f, d = feat[0].numpy(), depth[0].numpy()
    for s, c, w in zip(src, dst, wt):
        a, k = divmod(int(s), D)
        ref[:, c] += f[:, a] * d[a, k] * w
    out = student.double().lift(feat, depth)[0].reshape(3, -1).numpy()
    student.float()
    assert np.allclose(out, ref, atol=1e-10)


def test_depth_targets():
    b = BoxLabel(0, 0.0, 10.0, 2.0, 2.0, 0.0)
    t = depth_targets(Scene(0, [b]), CFG.world, 32)
    step = CFG.world.extent * math.sqrt(2) / 32
    mid = CFG.world.azimuth_bins // 2
    assert t[mid] == int(9.0 / step)
    assert t[0] == -1


# --- decode -----------------------------------------------------------------

def _maps(hm, reg):
    return DetectionMaps(torch.as_tensor(hm)[None], torch.as_tensor(reg)[None])


def test_single_peak_decodes_to_cell_center():
    hm = np.zeros((3, GRID.H, GRID.W), np.float32)
    hm[1, 7, 9] = 0.9
    reg = np.zeros((6, GRID.H, GRID.W), np.float32)
    reg[5] = 1.0
    out = head_decode(_maps(hm, reg), GRID, 0.1)
    assert len(out) == 1
    box, score = out[0]
    cx, cy = GRID.cell_center(7, 9)
    assert (box.x, box.y, box.class_id) == (pytest.approx(cx), pytest.approx(cy), 1)
    assert score == pytest.approx(0.9)


def test_below_threshold_is_empty():
    hm = np.full((3, GRID.H, GRID.W), 0.05, np.float32)
    assert head_decode(_maps(hm, np.zeros((6, GRID.H, GRID.W), np.float32)), GRID, 0.1) == []


def test_k_max_limits_output():
    hm = np.zeros((3, GRID.H, GRID.W), np.float32)
    for k in range(10):
        hm[0, 3 * k % 30, 3 * k] = 0.5 + k / 100
    out = head_decode(_maps(hm, np.zeros((6, GRID.H, GRID.W), np.float32)), GRID, 0.1, k_max=4)
    assert [round(s, 2) for _, s in out] == [0.59, 0.58, 0.57, 0.56]


def test_encode_decode_round_trip():
    boxes = [BoxLabel(0, -5.3, 12.2, 1.9, 4.4, 0.7), BoxLabel(1, 6.1, 25.9, 1.3, 1.9, -2.5),
             BoxLabel(2, -10.4, 33.0, 2.7, 7.8, 3.0)]
    hm, reg, _ = encode_targets(boxes, GRID, 3)
    out = head_decode(_maps(hm, reg), GRID, 0.5)
    assert len(out) == 3
    for b in boxes:
        d = min(out, key=lambda o: math.hypot(o[0].x - b.x, o[0].y - b.y))[0]
        assert d.class_id == b.class_id
        assert math.hypot(d.x - b.x, d.y - b.y) < GRID.cell_size / 2
        assert abs(d.w / b.w - 1) < 0.01 and abs(d.l / b.l - 1) < 0.01
        assert abs(wrap_angle(d.yaw - b.yaw)) < math.radians(1)


def test_round_trip_on_generated_scenes():
    for sc in generate_scenes(CFG.world, 50):
        hm, reg, center = encode_targets(sc.boxes, GRID, 3)
        out = head_decode(_maps(hm, reg), GRID, 0.99, k_max=50)
        # every box owning its center cell comes back
        assert len(out) == int(center.sum())


# --- adapter ----------------------------------------------------------------

def test_adapter_shapes_and_errors():
    a = Adapter(8, 32)
    assert a(torch.zeros(2, 8, 5, 7)).shape == (2, 32, 5, 7)
    with pytest.raises(ValueError):
        a(torch.zeros(1, 9, 4, 4))


def test_zero_initialized_adapter_outputs_zero():
    a = Adapter(8, 16, zero_init=True)
    assert not a(torch.randn(1, 8, 6, 6)).any()


def test_adapter_gradient_matches_central_differences():
    torch.manual_seed(3)
    a = Adapter(3, 4).double()
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    f = lambda inp: (a(inp) * w).sum()
    f(x).backward()
    h = 1e-6
    for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 2, 1, 1), (0, 0, 3, 2)]:
        xp, xm = x.detach().clone(), x.detach().clone()
        xp[idx] += h
        xm[idx] -= h
        fd = (f(xp) - f(xm)).item() / (2 * h)
        assert abs(fd - x.grad[idx].item()) <= 1e-4 * max(1e-8, abs(fd))


def test_unpartitioned_adapters_read_full_feature():
    cfg = ExperimentConfig().replace(**{"switches.use_partition": False})
    s = StudentModel.from_config(cfg, GRID)
    assert s.adapters["lidar"].cin == cfg.partition.total
    with pytest.raises(ValueError):
        s.adapt(torch.zeros(1, 3, 4, 4), "image")
