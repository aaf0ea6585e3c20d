import csv

import pytest
import torch

from bevkd import pipeline
from bevkd.distill import total_loss
from bevkd.pipeline import (
    COMPONENT_ROWS, CheckpointFormatError, MissingCheckpointError, ablation_grid, build_data,
    load_checkpoint, save_checkpoint, state_hash, student_loss_terms, train_label_encoder,
    train_student, train_teacher, with_switches,
)
from bevkd.detectors import StudentModel

from conftest import tiny_config


@pytest.fixture(scope="module")
def stack():
    cfg = tiny_config()
    data = build_data(cfg)
    teacher, _ = train_teacher(cfg, data)
    enc, head, _ = train_label_encoder(cfg, data, teacher.head, "inverse")
    return cfg, data, teacher, enc


def test_split_ids_are_disjoint(tiny):
    data = build_data(tiny)
    tr = {sc.scene_id for sc in data.train.scenes}
    va = {sc.scene_id for sc in data.val.scenes}
    assert tr == set(range(24)) and va == set(range(24, 36))


def test_baseline_total_is_detection_loss(stack):
    cfg, data, _, _ = stack
    torch.manual_seed(0)
    s = StudentModel.from_config(cfg, data.grid)
    terms = student_loss_terms(cfg, s, data.train.batch([0, 1]))
    assert set(terms) == {"det"}
    assert total_loss(terms, cfg.loss).item() == terms["det"].item()


def test_disabled_terms_contribute_no_gradient(stack):
    cfg, data, teacher, enc = stack
    b = data.train.batch([0, 1, 2])
    with torch.no_grad():
        f_lidar, t_maps = teacher(b.points)
        f_label = enc.forward_batch(b)
    on = with_switches(cfg, **COMPONENT_ROWS["d"])
    off = with_switches(cfg, **COMPONENT_ROWS["d"]).replace(**{"loss.lidar_feat": 0.0, "loss.label_feat": 0.0,
                                                               "loss.lidar_resp": 0.0})
    grads = []
    for c in (off, with_switches(cfg, **COMPONENT_ROWS["a"]).replace(**{"switches.use_partition": True})):
        torch.manual_seed(0)
        s = StudentModel.from_config(on, data.grid)
        s.train()
        terms = student_loss_terms(c, s, b, f_lidar, t_maps, f_label)
        loss = total_loss(terms, c.loss)
        loss.backward()
        grads.append(torch.cat([p.grad.flatten() for p in s.encoder.parameters()]))
    assert torch.equal(grads[0], grads[1])


def test_inverse_training_keeps_head_frozen():
    cfg = tiny_config()
    data = build_data(cfg)
    teacher, _ = train_teacher(cfg, data)
    before = state_hash(teacher.head)
    train_label_encoder(cfg, data, teacher.head, "inverse")
    assert state_hash(teacher.head) == before


def test_student_training_leaves_upstream_untouched(stack):
    cfg, data, teacher, enc = stack
    h_t, h_e = state_hash(teacher), state_hash(enc)
    full = with_switches(cfg, **COMPONENT_ROWS["d"])
    train_student(full, data, teacher, enc, audit=True)
    assert state_hash(teacher) == h_t and state_hash(enc) == h_e


def test_label_distillation_needs_encoder(stack):
    cfg, data, teacher, _ = stack
    with pytest.raises(MissingCheckpointError):
        train_student(with_switches(cfg, **COMPONENT_ROWS["c"]), data, teacher, None)


def test_same_seed_same_metrics(stack):
    cfg, data, teacher, enc = stack
    full = with_switches(cfg, **COMPONENT_ROWS["d"])
    a, _ = train_student(full, data, teacher, enc)
    b, _ = train_student(full, data, teacher, enc)
    assert state_hash(a) == state_hash(b)
    assert pipeline.evaluate_student(a, data, full) == pipeline.evaluate_student(b, data, full)


def test_labelenc_variants_run(stack):
    cfg, data, teacher, _ = stack
    enc, head, _ = train_label_encoder(cfg, data, teacher.head, "autoencoder")
    assert head is not teacher.head
    feats = torch.randn(len(data.train), cfg.partition.total, data.grid.H, data.grid.W)
    train_label_encoder(cfg, data, teacher.head, "labelenc", feats)
    with pytest.raises(ValueError):
        train_label_encoder(cfg, data, teacher.head, "labelenc", None)


def test_run_directory_stages(tmp_path):
    cfg = tiny_config()
    t = pipeline.run_stage_teacher(cfg, tmp_path / "t")
    assert (tmp_path / "t" / "metrics.csv").exists() and (tmp_path / "t" / "report.json").exists()
    le = pipeline.run_stage_labelenc(cfg, tmp_path / "l", t["checkpoint"])
    with open(tmp_path / "l" / "report.csv") as fh:
        header = next(csv.reader(fh))
    assert header == ["stage", "variant", "config_digest", "mAP", "NDS*", "mATE", "mAOE"]
    full = with_switches(cfg, **COMPONENT_ROWS["d"])
    before = (pipeline.file_sha256(t["checkpoint"]), pipeline.file_sha256(le["checkpoint"]))
    pipeline.run_stage_student(full, tmp_path / "s", t["checkpoint"], le["checkpoint"])
    assert before == (pipeline.file_sha256(t["checkpoint"]), pipeline.file_sha256(le["checkpoint"]))
    with pytest.raises(MissingCheckpointError):
        pipeline.run_stage_student(full, tmp_path / "s2", t["checkpoint"], None)
    with pytest.raises(MissingCheckpointError):
        pipeline.run_stage_labelenc(cfg, tmp_path / "l2", tmp_path / "nope.pt")


def test_checkpoint_format_checks(tmp_path, tiny):
    m = torch.nn.Linear(2, 2)
    save_checkpoint(tmp_path / "c.pt", "teacher", {"teacher": m}, tiny)
    assert load_checkpoint(tmp_path / "c.pt", "teacher")["config"] == tiny.to_dict()
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "c.pt", "student")
    payload = torch.load(tmp_path / "c.pt", weights_only=False)
    payload["format_version"] = 99
    torch.save(payload, tmp_path / "c.pt")
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "c.pt")


def test_ablation_grids(tiny):
    rows = ablation_grid(tiny, "components")
    assert [n for n, _ in rows] == ["(a)", "(b)", "(c)", "(d)"]
    assert [(c.switches.use_lidar_distill, c.switches.use_label_distill, c.switches.use_partition)
            for _, c in rows] == [(False, False, False), (True, False, False), (True, True, False), (True, True, True)]
    ratios = ablation_grid(tiny, "channel_ratio")
    assert [n for n, _ in ratios] == ["1:3:2", "3:1:2", "2:2:2"]
    assert [c.partition.sizes for _, c in ratios] == [(4, 2, 6), (4, 6, 2), (4, 4, 4)]
    assert [n for n, _ in ablation_grid(tiny, "labelenc_variant")] == ["autoencoder", "labelenc", "inverse"]
    with pytest.raises(ValueError):
        ablation_grid(tiny, "nonsense")


def test_distance_matrix_tables(tmp_path):
    cfg = tiny_config(**{"student.epochs": 1})
    res = pipeline.run_ablation_matrix(cfg, "distance", seeds=(0, 1), out_dir=tmp_path)
    assert [r["config"] for r in res["table"]] == ["near/lidar", "far/lidar", "near/lidar+label", "far/lidar+label"]
    assert (tmp_path / "distance.csv").exists() and (tmp_path / "distance.json").exists()
    assert len(res["per_seed"]) == 4
