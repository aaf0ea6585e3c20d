"""Command-line entry point: ``bevkd {gen-data,train,eval,ablate,report}``.

Every artifact-producing command writes ``manifest.json`` into its output
directory before doing any work and ``report.json`` (or the axis tables) when
it finishes, so a crashed run shows up as a manifest without a report.

Exit codes: 0 success, 1 unexpected failure, 2 malformed config or bad
arguments, 3 missing checkpoint.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

from . import __version__, evalkit, pipeline, plots
from .config import ConfigError, ExperimentConfig, load_config
from .dataset import SceneTensors
from .synthworld import load_dataset, serialize_dataset, generate_scenes

OUT_ENV = "BEVKD_OUT"
EXIT_CONFIG = 2
EXIT_MISSING_CHECKPOINT = 3

log = logging.getLogger("bevkd")


# ---------------------------------------------------------------------------
# helpers

def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _revision() -> str:
    try:
        r = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                           cwd=Path(__file__).parent, timeout=5)
        if r.returncode == 0 and r.stdout.strip():
            return r.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"bevkd-{__version__}"


def write_manifest(out: Path, command: str, cfg: ExperimentConfig, config_path, argv) -> dict:
    """Write the run manifest once; refuses to overwrite an existing one."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / "manifest.json"
    if path.exists():
        raise FileExistsError(f"{path} exists; manifests are immutable, choose a fresh --out")
    manifest = {
        "command": command,
        "argv": list(argv),
        "config_path": str(config_path) if config_path else None,
        "config_sha256": hashlib.sha256(Path(config_path).read_bytes()).hexdigest() if config_path else None,
        "config_digest": cfg.digest(),
        "seed": cfg.seed,
        "revision": _revision(),
        "started": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "out": str(out),
    }
    evalkit.atomic_write_text(path, json.dumps(manifest, indent=2))
    return manifest


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        import yaml
        out[k.strip()] = yaml.safe_load(v)
    return out


def resolve_config(args) -> ExperimentConfig:
    """Default < config file < ``--set`` overrides < ``--seed``."""
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = _parse_set(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if over:
        cfg = cfg.replace(**over)
    return cfg.validate()


def _out_dir(args, name: str) -> Path:
    return Path(args.out) if args.out else default_out_root() / name


def _data(cfg: ExperimentConfig, dataset):
    if dataset is None:
        return pipeline.build_data(cfg)
    scenes, world = load_dataset(dataset)
    if world != cfg.world:
        raise ConfigError("dataset was generated with a different world spec", "world")
    if len(scenes) < cfg.data.n_train + 1:
        raise ConfigError(f"dataset has {len(scenes)} scenes, need more than n_train={cfg.data.n_train}",
                          "data.n_train")
    return pipeline.build_data(cfg, scenes)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, "data")
    write_manifest(out, "gen-data", cfg, args.config, sys.argv)
    n = cfg.data.n_train + cfg.data.n_val
    path = out / "dataset.bin"
    serialize_dataset(generate_scenes(cfg.world, n), path, cfg.world)
    evalkit.write_metrics_json(out / "report.json", {"scenes": n, "sha256": pipeline.file_sha256(path)},
                               command="gen-data")
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if args.stage == "labelenc":
        cfg = cfg.replace(**{"switches.label_encoder_variant": args.variant or cfg.switches.label_encoder_variant})
    sw = cfg.switches
    # check upstream checkpoints before any output is produced
    if args.stage == "labelenc":
        pipeline.load_checkpoint(args.teacher_ckpt, "teacher")
        if sw.label_encoder_variant == "labelenc":
            pipeline.load_checkpoint(args.ckpt, "student")
    if args.stage == "student":
        if sw.use_lidar_distill:
            pipeline.load_checkpoint(args.teacher_ckpt, "teacher")
        if sw.use_label_distill:
            pipeline.load_checkpoint(args.labelenc_ckpt, "label_encoder")
    out = _out_dir(args, args.stage)
    write_manifest(out, f"train {args.stage}", cfg, args.config, sys.argv)
    data = _data(cfg, args.dataset)
    if args.stage == "teacher":
        res = pipeline.run_stage_teacher(cfg, out, data)
    elif args.stage == "labelenc":
        res = pipeline.run_stage_labelenc(cfg, out, args.teacher_ckpt, data, student_ckpt=args.ckpt)
    else:
        res = pipeline.run_stage_student(cfg, out, args.teacher_ckpt, args.labelenc_ckpt, data)
    m = res["metrics"]
    print(f"{args.stage}: mAP={m['mAP']:.4f} NDS*={m['NDS*']:.4f} -> {res['checkpoint']}")
    return 0


def cmd_eval(args) -> int:
    payload = pipeline.load_checkpoint(args.ckpt)
    cfg = ExperimentConfig.from_dict(payload["config"])
    if args.config or args.seed is not None or args.set:
        cfg = resolve_config(args)
    out = _out_dir(args, "eval")
    write_manifest(out, "eval", cfg, args.config, sys.argv)
    grid = pipeline.grid_for(cfg)
    if args.dataset:
        scenes, world = load_dataset(args.dataset)
        split = SceneTensors(scenes, cfg.replace(world=world.to_dict()), grid)
    else:
        split = pipeline.build_data(cfg).val
    kind = payload["kind"]
    if kind == "teacher":
        forward = pipeline.teacher_maps_fn(pipeline.load_teacher(args.ckpt, cfg))
    elif kind == "student":
        forward = pipeline.student_maps_fn(pipeline.load_student(args.ckpt, cfg, grid))
    elif kind == "label_encoder":
        enc, head = pipeline.load_label_encoder(args.ckpt, cfg)
        forward = lambda b: head(enc.forward_batch(b))  # noqa: E731
    else:
        raise pipeline.CheckpointFormatError(f"cannot evaluate a {kind} checkpoint")
    preds = pipeline.predict(forward, split, grid, cfg)
    metrics = pipeline.evaluate_predictions(preds, split, cfg, with_buckets=True)
    evalkit.write_metrics_json(out / "report.json", metrics, kind=kind, checkpoint=str(args.ckpt),
                               config_digest=cfg.digest())
    evalkit.write_table_csv(out / "metrics.csv", [{"config": kind, **metrics}])
    print(f"{kind}: mAP={metrics['mAP']:.4f} NDS*={metrics['NDS*']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args, f"ablate_{args.axis}")
    write_manifest(out, f"ablate {args.axis}", cfg, args.config, sys.argv)
    bench = pipeline.Workbench(cfg, out)
    if args.dataset:
        bench.data = _data(cfg, args.dataset)
    res = pipeline.run_ablation_matrix(cfg, args.axis, tuple(args.seeds), bench, out)
    plots.figures_for(res, out)
    evalkit.write_metrics_json(out / "report.json", {"axis": args.axis, "summary": res["summary"],
                                                     "table": res["table"], "timings": bench.timings})
    for r in res["table"]:
        print(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return 0


def cmd_report(args) -> int:
    """Re-render tables and figures from finished ablation directories."""
    done = 0
    for d in args.runs:
        d = Path(d)
        for js in sorted(d.glob("*.json")):
            data = json.loads(js.read_text())
            res = data.get("metrics", {})
            if not isinstance(res, dict) or "axis" not in res or "summary" not in res:
                continue
            plots.figures_for(res, d)
            cols = pipeline.DISTANCE_COLUMNS if res["axis"] == "distance" else evalkit.TABLE_COLUMNS
            evalkit.write_table_csv(d / f"{res['axis']}.csv", res["table"], cols)
            print(f"{d}: {res['axis']}")
            done += 1
    if not done:
        print("no ablation results found", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bevkd",
        description="Label-guided cross-modal distillation on a synthetic BEV world.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command> or runs/<command>)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a dotted config key, e.g. student.epochs=4 (repeatable)")
        sp.add_argument("--dataset", help="dataset file from gen-data (default: generate from config)")

    g = sub.add_parser("gen-data", help="generate and serialize a dataset")
    common(g)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("stage", choices=["teacher", "labelenc", "student"])
    common(t)
    t.add_argument("--teacher-ckpt", help="teacher checkpoint (labelenc; student with lidar distillation)")
    t.add_argument("--labelenc-ckpt", help="label-encoder checkpoint (student with label distillation)")
    t.add_argument("--ckpt", help="baseline student checkpoint (labelenc variant 'labelenc' only)")
    t.add_argument("--variant", choices=["inverse", "autoencoder", "labelenc"],
                   help="label-encoder variant (labelenc stage)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--ckpt", required=True, help="teacher, student or label-encoder checkpoint")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run an ablation matrix")
    a.add_argument("axis", choices=list(pipeline.ABLATION_AXES))
    common(a)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", help="re-render tables and plots of finished ablations")
    r.add_argument("runs", nargs="+", help="ablation output directories")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pipeline.MissingCheckpointError as exc:
        print(f"missing checkpoint: {exc}", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT
    except pipeline.CheckpointFormatError as exc:
        print(f"bad checkpoint: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
