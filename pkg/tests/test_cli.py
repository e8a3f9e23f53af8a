import csv
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from dvgo.cli import resolve_config, build_parser, run

FIXTURE = Path(__file__).parent / "fixtures" / "tiny_synthetic"
TINY = ["--m-coarse", "216", "--m-fine", "512", "--iters-coarse", "10", "--iters-fine", "10",
        "--batch-rays", "64", "--threads", "1", "--pg-ckpt", "3", "6"]


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_oracle1d_prints_table_values(capsys):
    assert run(["oracle1d", "--c", "0.5", "--eps", "1e-4", "--tol", "1e-2", "--delta", "0.5"]) == 0
    out = capsys.readouterr().out
    assert "a=-865.0" in out and "b=867.2" in out and "PASS" in out


def test_oracle1d_writes_csv_and_plot(tmp_path, capsys):
    assert run(["oracle1d", "--c", "0.3", "--out", str(tmp_path), "--n-probe", "11"]) == 0
    rows = list(csv.reader(open(tmp_path / "oracle1d.csv")))
    assert rows[0] == ["x", "S", "T"] and len(rows) == 12
    assert (tmp_path / "oracle1d.png").stat().st_size > 0


def test_oracle_verification_failure_exit_code(capsys):
    # A tolerance wider than the distance to the cell edge cannot hold everywhere.
    assert run(["oracle1d", "--c", "0.5", "--tol", "0.6", "--delta", "0.5"]) in (0, 2)
    assert run(["oracle1d", "--c", "0"]) == 1


def test_oracle2d(capsys, tmp_path):
    assert run(["oracle2d", "--c0", "0.3", "--c1", "0.8", "--tol", "0.2", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "V_tl=-24.9" in out and "V_br=18.4" in out
    assert (tmp_path / "oracle2d.png").exists()


def test_unknown_flag_is_usage_error(capsys):
    assert run(["oracle1d", "--c", "0.5", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run([]) == 1
    assert run(["train"]) == 1


def test_bad_value_is_usage_error(capsys):
    assert run(["info", "--alpha-init-fine", "2"]) == 1
    assert run(["info", "--white-bg", "maybe"]) == 1


def test_missing_dataset_is_runtime_error(tmp_path, capsys):
    assert run(["train", str(tmp_path / "none"), "--out", str(tmp_path / "o")] + TINY) == 2


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("m_coarse: 1000\nm_fine: 4096\nseed: 3\n")
    args = build_parser().parse_args(["info", "--config", str(cfg_file), "--m-fine", "8000"])
    cfg = resolve_config(args)
    assert cfg.m_coarse == 1000 and cfg.m_fine == 8000 and cfg.seed == 3
    assert cfg.alpha_init_coarse == 1e-6
    # bare exponents are strings under YAML 1.1 and must still parse
    cfg_file.write_text("alpha_init_fine: 1e-3\n")
    assert resolve_config(build_parser().parse_args(["info", "--config", str(cfg_file)])).alpha_init_fine == 1e-3
    (tmp_path / "c.json").write_text(json.dumps({"tau_fine": 0.0}))
    assert resolve_config(build_parser().parse_args(["info", "--config", str(tmp_path / "c.json")])).tau_fine == 0.0


def test_info_prints_resolved_config(capsys):
    assert run(["info", "--m-coarse", "1234"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["config"]["m_coarse"] == 1234
    assert info["config"]["fine_iters"] == 20000


def test_train_eval_render_info_roundtrip(tmp_path, capsys):
    out = tmp_path / "run"
    assert run(["train", str(FIXTURE), "--out", str(out)] + TINY) == 0
    for name in ("coarse.ckpt", "fine.ckpt", "loss_coarse.csv", "loss_fine.csv", "loss.png", "config.json"):
        assert (out / name).exists(), name
    assert run(["eval", str(out), "--data", str(FIXTURE), "--out", str(tmp_path / "ev")]) == 0
    rows = list(csv.reader(open(tmp_path / "ev" / "metrics.csv")))
    assert rows[0] == ["view_index", "psnr", "ssim"] and len(rows) == 2
    assert "mean PSNR" in capsys.readouterr().out
    assert run(["render", str(out), "--data", str(FIXTURE), "--split", "train", "--out", str(tmp_path / "r")]) == 0
    assert len(list((tmp_path / "r").glob("*.png"))) == 2
    capsys.readouterr()
    assert run(["info", str(out)]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["config"]["coarse_iters"] == 10
    assert set(info["checkpoints"]) == {"coarse.ckpt", "fine.ckpt"}
    assert run(["info", str(tmp_path)]) == 2


def test_repeated_train_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run(["train", str(FIXTURE), "--out", str(tmp_path / name), "--seed", "9"] + TINY) == 0
    for f in ("coarse.ckpt", "fine.ckpt", "config.json"):
        assert _digest(tmp_path / "a" / f) == _digest(tmp_path / "b" / f)


def test_genscene_and_seed(tmp_path):
    for name in ("a", "b"):
        assert run(["genscene", "--kind", "sphere", "--n-train", "2", "--n-test", "1", "--size", "16",
                    "--seed", "4", "--out", str(tmp_path / name)]) == 0
    assert _digest(tmp_path / "a" / "test" / "r_0.png") == _digest(tmp_path / "b" / "test" / "r_0.png")
    assert run(["genscene", "--kind", "teapot", "--out", str(tmp_path / "c")]) == 1


def test_toy2d_outputs(tmp_path, capsys):
    args = ["toy2d", "--size", "16", "--strides", "4", "--iters", "50", "--targets", "disk", "--out", str(tmp_path)]
    assert run(args) == 0
    rows = list(csv.reader(open(tmp_path / "toy2d.csv")))
    assert rows[0] == ["target", "mode", "stride", "psnr"] and len(rows) == 4
    assert (tmp_path / "psnr_vs_stride.png").exists() and (tmp_path / "fit_disk.png").exists()
    assert run(["toy2d", "--targets", "moon", "--out", str(tmp_path)]) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dvgo", "oracle1d", "--c", "0.7"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "a=-1211.4" in proc.stdout
