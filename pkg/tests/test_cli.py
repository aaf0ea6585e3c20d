import csv
import json
import subprocess
import sys

import pytest

from bevkd.cli import build_parser, main
from bevkd.config import dump_config

from conftest import tiny_config


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "tiny.yaml"
    dump_config(tiny_config(), p)
    return p


def test_gen_data_is_byte_deterministic(tmp_path, cfg_file):
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(tmp_path / "a")]) == 0
    assert main(["gen-data", "--config", str(cfg_file), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "dataset.bin").read_bytes()
    assert a == (tmp_path / "b" / "dataset.bin").read_bytes()
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["command"] == "gen-data" and man["seed"] == 0 and man["config_sha256"]


def test_manifest_is_never_overwritten(tmp_path, cfg_file):
    out = str(tmp_path / "a")
    assert main(["gen-data", "--config", str(cfg_file), "--out", out]) == 0
    with pytest.raises(FileExistsError):
        main(["gen-data", "--config", str(cfg_file), "--out", out])


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("student:\n  epochs: 2\n  bogus: 1\n")
    assert main(["train", "teacher", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "student.bogus" in err and "line 3" in err
    assert not (tmp_path / "o").exists()


def test_bad_set_override_exits_2(tmp_path, cfg_file):
    assert main(["gen-data", "--config", str(cfg_file), "--set", "world.k_pts=-3",
                 "--out", str(tmp_path / "o")]) == 2


def test_student_without_labelenc_ckpt_exits_3(tmp_path, cfg_file):
    code = main(["train", "student", "--config", str(cfg_file), "--set", "switches.use_label_distill=true",
                 "--out", str(tmp_path / "s")])
    assert code == 3
    assert not (tmp_path / "s").exists()


def test_eval_missing_checkpoint_exits_3(tmp_path):
    assert main(["eval", "--ckpt", str(tmp_path / "none.pt"), "--out", str(tmp_path / "e")]) == 3


def test_unknown_flag_is_an_error():
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--frobnicate"])
    assert exc.value.code == 2


def test_help_lists_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    train_help = sub.choices["train"].format_help()
    for flag in ("--config", "--seed", "--out", "--ckpt", "--teacher-ckpt", "--labelenc-ckpt", "--set"):
        assert flag in train_help
    out = subprocess.run([sys.executable, "-m", "bevkd", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("gen-data", "train", "eval", "ablate", "report"):
        assert cmd in out.stdout


def test_env_var_sets_default_output_root(tmp_path, cfg_file, monkeypatch):
    monkeypatch.setenv("BEVKD_OUT", str(tmp_path / "root"))
    assert main(["gen-data", "--config", str(cfg_file)]) == 0
    assert (tmp_path / "root" / "data" / "dataset.bin").exists()


def test_full_stage_chain(tmp_path, cfg_file):
    c = str(cfg_file)
    assert main(["gen-data", "--config", c, "--out", str(tmp_path / "d")]) == 0
    ds = str(tmp_path / "d" / "dataset.bin")
    assert main(["train", "teacher", "--config", c, "--dataset", ds, "--out", str(tmp_path / "t")]) == 0
    t = str(tmp_path / "t" / "teacher.pt")
    assert main(["train", "labelenc", "--config", c, "--teacher-ckpt", t, "--out", str(tmp_path / "l")]) == 0
    le = str(tmp_path / "l" / "label_encoder.pt")
    assert main(["train", "student", "--config", c, "--set", "switches.use_lidar_distill=true",
                 "--set", "switches.use_label_distill=true", "--set", "switches.use_partition=true",
                 "--teacher-ckpt", t, "--labelenc-ckpt", le, "--out", str(tmp_path / "s")]) == 0
    for kind, ck in (("student", tmp_path / "s" / "student.pt"), ("teacher", t), ("label_encoder", le)):
        out = tmp_path / f"e_{kind}"
        assert main(["eval", "--ckpt", str(ck), "--dataset", ds, "--out", str(out)]) == 0
        rep = json.loads((out / "report.json").read_text())
        assert rep["kind"] == kind and 0 <= rep["metrics"]["mAP"] <= 1


def test_ablate_components_table(tmp_path, cfg_file):
    out = tmp_path / "abl"
    assert main(["ablate", "components", "--config", str(cfg_file), "--seeds", "0",
                 "--set", "student.epochs=1", "--out", str(out)]) == 0
    with open(out / "components.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["config", "mAP", "NDS*", "mATE", "mASE", "mAOE"]
    assert [r[0] for r in rows[1:]] == ["(a)", "(b)", "(c)", "(d)"]
    assert (out / "components_bars.png").exists() and (out / "report.json").exists()
    (out / "components_bars.png").unlink()
    assert main(["report", str(out)]) == 0
    assert (out / "components_bars.png").exists()
