"""Staged training: teacher pretraining, label-encoder fitting, student distillation, ablations."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evalkit
from .bevgrid import BevGridSpec
from .config import ExperimentConfig, PartitionSpec, dump_config
from .dataset import SceneTensors
from .detectors import DetectionMaps, StudentModel, TeacherModel, head_decode
from .distill import (NonFiniteLossError, detection_loss, masked_feature_loss, partition,
                      response_loss, total_loss)
from .labelenc import HeadReplica, LabelEncoder
from .synthworld import generate_scenes

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class MissingCheckpointError(FileNotFoundError):
    pass


class CheckpointFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Data

@dataclass
class Data:
    train: SceneTensors
    val: SceneTensors
    grid: BevGridSpec


_DATA_CACHE: dict = {}


def grid_for(cfg: ExperimentConfig) -> BevGridSpec:
    return BevGridSpec.for_world(cfg.world, cfg.grid.cells)


def build_data(cfg: ExperimentConfig, scenes=None) -> Data:
    """Train scenes take ids ``[0, n_train)``, validation ``[n_train, n_train + n_val)``.

    Cached per (world, grid, data, depth bins) so ablation runs share one copy.
    """
    key = json.dumps([cfg.world.to_dict(), cfg.grid.__dict__, cfg.data.__dict__, cfg.model.depth_bins],
                     sort_keys=True)
    if scenes is None and key in _DATA_CACHE:
        return _DATA_CACHE[key]
    grid = grid_for(cfg)
    if scenes is None:
        scenes = generate_scenes(cfg.world, cfg.data.n_train + cfg.data.n_val)
    n = cfg.data.n_train
    data = Data(SceneTensors(scenes[:n], cfg, grid), SceneTensors(scenes[n:], cfg, grid), grid)
    _DATA_CACHE[key] = data
    return data


# ---------------------------------------------------------------------------
# Checkpoints

def state_hash(module_or_state) -> str:
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    h = hashlib.sha256()
    for k in sorted(state):
        v = state[k]
        h.update(k.encode())
        if isinstance(v, torch.Tensor):
            h.update(str(v.dtype).encode())
            h.update(v.detach().cpu().contiguous().numpy().tobytes())
        else:
            h.update(repr(v).encode())
    return h.hexdigest()


def save_checkpoint(path, kind: str, modules: dict, cfg: ExperimentConfig, meta: dict | None = None):
    """Versioned archive: ``{format_version, kind, config, meta, state: {module path: state_dict}}``."""
    path = Path(path)
    payload = {
        "format_version": CHECKPOINT_VERSION, "kind": kind, "config": cfg.to_dict(),
        "meta": meta or {}, "state": {name: m.state_dict() for name, m in modules.items()},
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path, kind: str | None = None) -> dict:
    path = Path(path) if path is not None else None
    if path is None or not path.exists():
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"checkpoint version {payload.get('format_version')} unsupported")
    if kind is not None and payload["kind"] != kind:
        raise CheckpointFormatError(f"expected a {kind} checkpoint, got {payload['kind']}")
    return payload


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Training helpers

def seed_everything(seed: int) -> np.random.Generator:
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def make_optimizer(params, sched):
    opt = torch.optim.AdamW(params, lr=sched.lr, weight_decay=sched.weight_decay)
    step = max(1, int(round(sched.lr_step * sched.epochs)))
    return opt, torch.optim.lr_scheduler.StepLR(opt, step_size=step, gamma=0.1)


def _check(loss, name):
    v = float(loss.detach())
    if not math.isfinite(v):
        raise NonFiniteLossError(name, v)


@torch.no_grad()
def predict(forward, data: SceneTensors, grid: BevGridSpec, cfg: ExperimentConfig, batch_size: int = 32):
    """Run ``forward(batch) -> DetectionMaps`` over a split and decode every scene."""
    out = []
    for b in data.batches(batch_size):
        maps = forward(b)
        for k in range(len(b.index)):
            out.append(head_decode(maps[k], grid, cfg.eval.score_thresh, cfg.eval.k_max))
    return out


def evaluate_predictions(preds, data: SceneTensors, cfg: ExperimentConfig, with_buckets: bool = False) -> dict:
    e = cfg.eval
    res = evalkit.match(preds, data.boxes, e.thresholds, cfg.world.num_classes)
    out = evalkit.summarize(res, e.tp_threshold)
    if with_buckets:
        split = e.distance_split * cfg.world.extent
        for b in ("near", "far"):
            out[b] = evalkit.summarize(res, e.tp_threshold, b, split)
    return out


@dataclass
class History:
    rows: list = field(default_factory=list)

    def add(self, **row):
        self.rows.append(row)
        log.info(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))

    def write_csv(self, path):
        if not self.rows:
            return
        keys = list(dict.fromkeys(k for r in self.rows for k in r))
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)
        tmp.replace(path)


# ---------------------------------------------------------------------------
# Stage 0: teacher

def train_teacher(cfg: ExperimentConfig, data: Data, eval_every: int = 0):
    rng = seed_everything(cfg.seed)
    teacher = TeacherModel.from_config(cfg)
    opt, sched = make_optimizer(teacher.parameters(), cfg.teacher)
    hist = History()
    for epoch in range(1, cfg.teacher.epochs + 1):
        teacher.train()
        tot, nb = 0.0, 0
        for b in data.train.batches(cfg.teacher.batch_size, rng):
            _, maps = teacher(b.points)
            loss = detection_loss(maps, b.heatmap, b.regress, b.center, cfg.loss)
            _check(loss, "teacher detection")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot, nb = tot + loss.item(), nb + 1
        sched.step()
        row = {"epoch": epoch, "loss": tot / nb}
        if eval_every and (epoch % eval_every == 0 or epoch == cfg.teacher.epochs):
            row.update(_metric_row(evaluate_teacher(teacher, data, cfg)))
        hist.add(**row)
    teacher.eval()
    return teacher, hist


def teacher_maps_fn(teacher):
    teacher.eval()
    return lambda b: teacher(b.points)[1]


def evaluate_teacher(teacher, data: Data, cfg: ExperimentConfig, with_buckets: bool = False) -> dict:
    preds = predict(teacher_maps_fn(teacher), data.val, data.grid, cfg)
    return evaluate_predictions(preds, data.val, cfg, with_buckets)


# ---------------------------------------------------------------------------
# Stage 1: label encoder

@torch.no_grad()
def _precompute(fn, data: SceneTensors, batch_size: int = 64) -> torch.Tensor:
    return torch.cat([fn(b) for b in data.batches(batch_size)])


def train_label_encoder(cfg: ExperimentConfig, data: Data, teacher_head, variant: str = "inverse",
                        student_features: torch.Tensor | None = None, align_weight: float = 1.0,
                        eval_every: int = 0):
    """Fit the label encoder so that ``head(encoder(y))`` reproduces ``y``.

    ``inverse``: the given pretrained head is frozen and only the encoder learns.
    ``autoencoder``: a fresh head replica is trained jointly from scratch.
    ``labelenc``: as ``autoencoder`` plus a masked alignment of a 1x1 projection
    of the label features to precomputed ``student_features`` (N, C_S, H, W).
    Returns ``(encoder, head, history)``; the returned head is the decoder used.
    """
    rng = seed_everything(cfg.seed + 1)
    enc = LabelEncoder.from_config(cfg)
    params = list(enc.parameters())
    proj = None
    if variant == "inverse":
        head = teacher_head
        head.eval()
        for p in head.parameters():
            p.requires_grad_(False)
    elif variant in ("autoencoder", "labelenc"):
        head = HeadReplica(cfg.model.teacher_channels, cfg.world.num_classes, cfg.model.hidden)
        params += list(head.parameters())
        if variant == "labelenc":
            if student_features is None:
                raise ValueError("labelenc variant needs student features")
            proj = torch.nn.Conv2d(cfg.model.teacher_channels, student_features.shape[1], 1)
            params += list(proj.parameters())
    else:
        raise ValueError(f"unknown label encoder variant {variant!r}")
    opt, sched = make_optimizer(params, cfg.labelenc)
    hist = History()
    for epoch in range(1, cfg.labelenc.epochs + 1):
        enc.train()
        if variant != "inverse":
            head.train()
        tot, nb = 0.0, 0
        for b in data.train.batches(cfg.labelenc.batch_size, rng):
            f_label = enc.forward_batch(b)
            maps = head(f_label)
            loss = detection_loss(maps, b.heatmap, b.regress, b.center, cfg.loss)
            if proj is not None:
                target = student_features[torch.as_tensor(b.index)]
                loss = loss + align_weight * masked_feature_loss(target, proj(f_label), b.fg)
            _check(loss, "label encoder")
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot, nb = tot + loss.item(), nb + 1
        sched.step()
        row = {"epoch": epoch, "loss": tot / nb}
        if eval_every and (epoch % eval_every == 0 or epoch == cfg.labelenc.epochs):
            row.update(_metric_row(autoencoder_eval(enc, head, data.val, data.grid, cfg)))
        hist.add(**row)
    enc.eval()
    head.eval()
    return enc, head, hist


def autoencoder_eval(encoder, head, split: SceneTensors, grid: BevGridSpec, cfg: ExperimentConfig) -> dict:
    """Decode ``head(encoder(y))`` on a split and score it against ``y``."""
    encoder.eval()
    head.eval()
    preds = predict(lambda b: head(encoder.forward_batch(b)), split, grid, cfg)
    return evaluate_predictions(preds, split, cfg)


# ---------------------------------------------------------------------------
# Stage 2: student

def student_loss_terms(cfg, student: StudentModel, b, f_lidar=None, t_maps=None, f_label=None):
    """Forward one batch and return the dict of loss components enabled by the switches."""
    sw, w = cfg.switches, cfg.loss
    f_image, maps, depth = student(b.panorama)
    terms = {"det": detection_loss(maps, b.heatmap, b.regress, b.center, w, depth, b.depth_t)}
    if sw.use_partition:
        _, g_lidar, g_label = partition(f_image, cfg.partition)
    else:
        g_lidar = g_label = f_image
    if sw.use_lidar_distill:
        terms["lidar_feat"] = masked_feature_loss(f_lidar, student.adapt(g_lidar, "lidar"), b.fg)
        terms["lidar_resp"] = response_loss(t_maps, maps, b.heatmap, cfg.grid.tau, w.soft_focal_beta)
    if sw.use_label_distill:
        terms["label_feat"] = masked_feature_loss(f_label, student.adapt(g_label, "label"), b.fg)
    return terms


def train_student(cfg: ExperimentConfig, data: Data, teacher: TeacherModel | None = None,
                  label_encoder: LabelEncoder | None = None, eval_every: int = 0,
                  audit: bool = False):
    sw = cfg.switches
    if sw.use_lidar_distill and teacher is None:
        raise MissingCheckpointError("lidar distillation enabled but no teacher given")
    if sw.use_label_distill and label_encoder is None:
        raise MissingCheckpointError("label distillation enabled but no label encoder given")
    frozen = {}
    f_lidar = t_hm = t_reg = f_label = None
    if sw.use_lidar_distill:
        teacher.eval()
        frozen["teacher"] = (teacher, state_hash(teacher))
        f_lidar = _precompute(lambda b: teacher(b.points)[0], data.train)
        t_hm = _precompute(lambda b: teacher(b.points)[1].heatmap, data.train)
        t_reg = _precompute(lambda b: teacher(b.points)[1].regress, data.train)
    if sw.use_label_distill:
        label_encoder.eval()
        frozen["label_encoder"] = (label_encoder, state_hash(label_encoder))
        f_label = _precompute(label_encoder.forward_batch, data.train)

    rng = seed_everything(cfg.seed + 2)
    student = StudentModel.from_config(cfg, data.grid)
    opt, sched = make_optimizer(student.parameters(), cfg.student)
    hist = History()
    for epoch in range(1, cfg.student.epochs + 1):
        student.train()
        sums: dict = {}
        nb = 0
        for b in data.train.batches(cfg.student.batch_size, rng):
            i = torch.as_tensor(b.index)
            terms = student_loss_terms(
                cfg, student, b,
                f_lidar=f_lidar[i] if f_lidar is not None else None,
                t_maps=DetectionMaps(t_hm[i], t_reg[i]) if t_hm is not None else None,
                f_label=f_label[i] if f_label is not None else None,
            )
            loss = total_loss(terms, cfg.loss)
            opt.zero_grad()
            loss.backward()
            opt.step()
            nb += 1
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v.item()
            sums["total"] = sums.get("total", 0.0) + loss.item()
        sched.step()
        row = {"epoch": epoch, **{k: v / nb for k, v in sums.items()}}
        if eval_every and (epoch % eval_every == 0 or epoch == cfg.student.epochs):
            row.update(_metric_row(evaluate_student(student, data, cfg)))
        if audit:
            for name, (mod, h) in frozen.items():
                if state_hash(mod) != h:
                    raise RuntimeError(f"{name} parameters changed during student training")
        hist.add(**row)
    student.eval()
    return student, hist


def student_maps_fn(student):
    student.eval()
    return lambda b: student(b.panorama)[1]


def evaluate_student(student, data: Data, cfg: ExperimentConfig, with_buckets: bool = False) -> dict:
    preds = predict(student_maps_fn(student), data.val, data.grid, cfg)
    return evaluate_predictions(preds, data.val, cfg, with_buckets)


def _metric_row(metrics: dict) -> dict:
    return {f"val_{k}": v for k, v in metrics.items() if isinstance(v, (int, float))}


# ---------------------------------------------------------------------------
# Run-directory stages

def _prepare_run(out_dir, cfg) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    return out


def run_stage_teacher(cfg: ExperimentConfig, out_dir, data: Data | None = None) -> dict:
    out = _prepare_run(out_dir, cfg)
    data = data or build_data(cfg)
    teacher, hist = train_teacher(cfg, data, eval_every=max(1, cfg.teacher.epochs // 4))
    hist.write_csv(out / "metrics.csv")
    ckpt = out / "teacher.pt"
    save_checkpoint(ckpt, "teacher", {"teacher": teacher}, cfg)
    metrics = evaluate_teacher(teacher, data, cfg, with_buckets=True)
    evalkit.write_metrics_json(out / "report.json", metrics, stage="teacher", config_digest=cfg.digest())
    return {"checkpoint": str(ckpt), "metrics": metrics, "model": teacher}


def load_teacher(path, cfg: ExperimentConfig) -> TeacherModel:
    payload = load_checkpoint(path, "teacher")
    t = TeacherModel.from_config(cfg)
    t.load_state_dict(payload["state"]["teacher"])
    return t.eval()


def load_label_encoder(path, cfg: ExperimentConfig):
    payload = load_checkpoint(path, "label_encoder")
    enc = LabelEncoder.from_config(cfg)
    enc.load_state_dict(payload["state"]["label_encoder"])
    head = HeadReplica(cfg.model.teacher_channels, cfg.world.num_classes, cfg.model.hidden)
    head.load_state_dict(payload["state"]["head"])
    return enc.eval(), head.eval()


def load_student(path, cfg: ExperimentConfig, grid: BevGridSpec) -> StudentModel:
    payload = load_checkpoint(path, "student")
    s = StudentModel.from_config(cfg, grid)
    s.load_state_dict(payload["state"]["student"])
    return s.eval()


LABELENC_REPORT_COLUMNS = ("stage", "variant", "config_digest", "mAP", "NDS*", "mATE", "mAOE")


def run_stage_labelenc(cfg: ExperimentConfig, out_dir, teacher_ckpt, data: Data | None = None,
                       student_ckpt=None) -> dict:
    teacher = load_teacher(teacher_ckpt, cfg)
    out = _prepare_run(out_dir, cfg)
    data = data or build_data(cfg)
    variant = cfg.switches.label_encoder_variant
    feats = None
    if variant == "labelenc":
        student = load_student(student_ckpt, cfg, data.grid)
        feats = _precompute(lambda b: student(b.panorama)[0], data.train)
    enc, head, hist = train_label_encoder(cfg, data, teacher.head, variant, feats,
                                          eval_every=max(1, cfg.labelenc.epochs // 4))
    hist.write_csv(out / "metrics.csv")
    ckpt = out / "label_encoder.pt"
    save_checkpoint(ckpt, "label_encoder", {"label_encoder": enc, "head": head}, cfg,
                    meta={"variant": variant, "teacher_sha256": file_sha256(teacher_ckpt)})
    m = autoencoder_eval(enc, head, data.val, data.grid, cfg)
    row = {"stage": "labelenc", "variant": variant, "config_digest": cfg.digest(),
           **{k: m[k] for k in ("mAP", "NDS*", "mATE", "mAOE")}}
    evalkit.write_metrics_json(out / "report.json", row, stage="labelenc")
    evalkit.write_table_csv(out / "report.csv", [row], LABELENC_REPORT_COLUMNS)
    return {"checkpoint": str(ckpt), "metrics": m, "report": row, "model": (enc, head)}


def run_stage_student(cfg: ExperimentConfig, out_dir, teacher_ckpt=None, labelenc_ckpt=None,
                      data: Data | None = None) -> dict:
    sw = cfg.switches
    if sw.use_lidar_distill and teacher_ckpt is None:
        raise MissingCheckpointError("lidar distillation enabled: a teacher checkpoint is required")
    if sw.use_label_distill and labelenc_ckpt is None:
        raise MissingCheckpointError("label distillation enabled: a label-encoder checkpoint is required")
    teacher = load_teacher(teacher_ckpt, cfg) if sw.use_lidar_distill else None
    enc = load_label_encoder(labelenc_ckpt, cfg)[0] if sw.use_label_distill else None
    before = {p: file_sha256(p) for p in (teacher_ckpt, labelenc_ckpt) if p is not None}
    out = _prepare_run(out_dir, cfg)
    data = data or build_data(cfg)
    student, hist = train_student(cfg, data, teacher, enc, eval_every=max(1, cfg.student.epochs // 4),
                                  audit=True)
    hist.write_csv(out / "metrics.csv")
    ckpt = out / "student.pt"
    save_checkpoint(ckpt, "student", {"student": student}, cfg)
    after = {p: file_sha256(p) for p in before}
    if before != after:
        raise RuntimeError("an upstream checkpoint changed during student training")
    metrics = evaluate_student(student, data, cfg, with_buckets=True)
    evalkit.write_metrics_json(out / "report.json", metrics, stage="student", config_digest=cfg.digest())
    return {"checkpoint": str(ckpt), "metrics": metrics, "model": student}


# ---------------------------------------------------------------------------
# Ablation matrix

COMPONENT_ROWS = {
    "a": dict(use_lidar_distill=False, use_label_distill=False, use_partition=False),
    "b": dict(use_lidar_distill=True, use_label_distill=False, use_partition=False),
    "c": dict(use_lidar_distill=True, use_label_distill=True, use_partition=False),
    "d": dict(use_lidar_distill=True, use_label_distill=True, use_partition=True),
}
# (lidar, label, image) ratios, in the order they are usually tabulated
CHANNEL_RATIOS = ((1, 3, 2), (3, 1, 2), (2, 2, 2))
ABLATION_AXES = ("components", "channel_ratio", "labelenc_variant", "distance")


def with_switches(cfg: ExperimentConfig, **sw) -> ExperimentConfig:
    return cfg.replace(**{f"switches.{k}": v for k, v in sw.items()})


def with_ratio(cfg: ExperimentConfig, ratio) -> ExperimentConfig:
    p = PartitionSpec.from_ratio(*ratio, total=cfg.partition.total)
    return cfg.replace(**{"partition.image": p.image, "partition.lidar": p.lidar, "partition.label": p.label})


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return cfg.replace(seed=seed)


class Workbench:
    """Trains and caches the shared upstream models for an ablation study.

    One teacher and one label encoder per variant are trained on the base
    seed; students vary their own seed. Everything is keyed by config so
    repeated requests reuse earlier results.
    """

    def __init__(self, base: ExperimentConfig, out_dir=None):
        self.base = base.validate()
        self.out = Path(out_dir) if out_dir else None
        self.data = build_data(base)
        self._teacher = None
        self._encoders: dict = {}
        self._students: dict = {}
        self.timings: dict = {}

    def teacher(self):
        if self._teacher is None:
            t0 = time.time()
            self._teacher, hist = train_teacher(self.base, self.data)
            self.timings["teacher"] = time.time() - t0
            if self.out:
                self.out.mkdir(parents=True, exist_ok=True)
                save_checkpoint(self.out / "teacher.pt", "teacher", {"teacher": self._teacher}, self.base)
                hist.write_csv(self.out / "teacher_metrics.csv")
        return self._teacher

    def baseline_student(self):
        return self.student(with_switches(self.base, **COMPONENT_ROWS["a"]))[0]

    def label_encoder(self, variant: str = "inverse"):
        if variant not in self._encoders:
            t0 = time.time()
            feats = None
            if variant == "labelenc":
                s = self.baseline_student()
                s.eval()
                feats = _precompute(lambda b: s(b.panorama)[0], self.data.train)
            enc, head, hist = train_label_encoder(self.base, self.data, self.teacher().head, variant, feats)
            self._encoders[variant] = (enc, head)
            self.timings[f"labelenc_{variant}"] = time.time() - t0
            if self.out:
                save_checkpoint(self.out / f"label_encoder_{variant}.pt", "label_encoder",
                                {"label_encoder": enc, "head": head}, self.base, meta={"variant": variant})
        return self._encoders[variant]

    def student(self, cfg: ExperimentConfig):
        key = cfg.digest()
        if key not in self._students:
            sw = cfg.switches
            t0 = time.time()
            teacher = self.teacher() if sw.use_lidar_distill else None
            enc = self.label_encoder(sw.label_encoder_variant)[0] if sw.use_label_distill else None
            student, hist = train_student(cfg, self.data, teacher, enc)
            metrics = evaluate_student(student, self.data, cfg, with_buckets=True)
            self._students[key] = (student, metrics)
            self.timings[f"student_{key}"] = time.time() - t0
        return self._students[key]

    def metrics(self, cfg: ExperimentConfig) -> dict:
        return self.student(cfg)[1]


def _flat_row(name: str, seed: int, m: dict) -> dict:
    row = {"config": name, "seed": seed}
    for k in ("mAP", "NDS*", "mATE", "mASE", "mAOE"):
        row[k] = m[k]
    for b in ("near", "far"):
        if b in m:
            for k in ("mAP", "mATE", "mASE", "mAOE", "n_gt"):
                row[f"{b}_{k}"] = m[b][k]
    return row


def ablation_grid(base: ExperimentConfig, axis: str) -> list[tuple[str, ExperimentConfig]]:
    if axis == "components":
        return [(f"({k})", with_switches(base, **sw)) for k, sw in COMPONENT_ROWS.items()]
    if axis == "channel_ratio":
        full = with_switches(base, **COMPONENT_ROWS["d"])
        return [(f"{r[0]}:{r[1]}:{r[2]}", with_ratio(full, r)) for r in CHANNEL_RATIOS]
    if axis == "labelenc_variant":
        full = with_switches(base, use_lidar_distill=True, use_label_distill=True, use_partition=True)
        return [(v, with_switches(full, label_encoder_variant=v)) for v in ("autoencoder", "labelenc", "inverse")]
    if axis == "distance":
        return [("lidar", with_switches(base, **COMPONENT_ROWS["b"])),
                ("lidar+label", with_switches(base, **COMPONENT_ROWS["c"]))]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {ABLATION_AXES}")


def run_ablation_matrix(base: ExperimentConfig, axis: str, seeds=(0, 1, 2), bench: Workbench | None = None,
                        out_dir=None) -> dict:
    """Train every config of ``axis`` for each seed; returns per-seed rows and the mean table.

    The ``distance`` axis reports near/far buckets for lidar-only and
    lidar+label distillation.
    """
    grid = ablation_grid(base, axis)
    bench = bench or Workbench(base, out_dir)
    per_seed = []
    for name, cfg in grid:
        for s in seeds:
            per_seed.append(_flat_row(name, s, bench.metrics(with_seed(cfg, s))))
    table = []
    for name, _ in grid:
        rows = [r for r in per_seed if r["config"] == name]
        mean = {"config": name}
        for k in rows[0]:
            if k not in ("config", "seed"):
                vals = np.array([r[k] for r in rows], float)
                mean[k] = float(vals.mean())
                mean[f"{k}_std"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        table.append(mean)
    if axis == "distance":
        dist_rows = []
        for r in table:
            for b in ("near", "far"):
                dist_rows.append({"config": f"{b}/{r['config']}", "mAP": r[f"{b}_mAP"],
                                  "mATE": r[f"{b}_mATE"], "mASE": r[f"{b}_mASE"],
                                  "mAOE": r[f"{b}_mAOE"], "n_gt": r[f"{b}_n_gt"]})
        table_out = dist_rows
    else:
        table_out = table
    result = {"axis": axis, "seeds": list(seeds), "per_seed": per_seed, "table": table_out, "summary": table}
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = DISTANCE_COLUMNS if axis == "distance" else evalkit.TABLE_COLUMNS
        evalkit.write_table_csv(out / f"{axis}.csv", table_out, cols)
        evalkit.write_table_csv(out / f"{axis}_per_seed.csv", per_seed, ("config", "seed") + evalkit.TABLE_COLUMNS[1:])
        evalkit.write_metrics_json(out / f"{axis}.json", result, axis=axis)
    return result


DISTANCE_COLUMNS = ("config", "n_gt", "mAP", "mATE", "mASE", "mAOE")
