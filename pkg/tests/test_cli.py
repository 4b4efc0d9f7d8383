import csv
import json

import pytest

from bhvit.cli import main
from bhvit.data import write_synthetic_cifar


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def cifar_dir(tmp_path):
    d = tmp_path / "cifar"
    write_synthetic_cifar(d, n_train=40, n_test=20)
    return d


class TestVerify:
    def test_bitpack_suite_passes(self, capsys):
        code, out, _ = run(capsys, "verify", "--suite", "bitpack")
        assert code == 0
        assert "PASS" in out and "FAIL" not in out

    def test_all_suites(self, capsys):
        assert run(capsys, "verify")[0] == 0


class TestCountOps:
    def test_small_preset(self, capsys):
        code, out, _ = run(capsys, "count-ops", "--preset", "small", "--input-size", "224", "--json")
        assert code == 0
        rep = json.loads(out)
        assert abs(rep["ops"] - 0.8e8) <= 0.2 * 0.8e8

    def test_fdl_flag(self, capsys):
        code, out, _ = run(capsys, "count-ops", "--preset", "small", "--input-size", "224", "--fdl", "--json")
        assert code == 0 and abs(json.loads(out)["ops"] - 1.5e8) <= 0.2 * 1.5e8

    def test_from_config_file(self, capsys, tmp_path):
        cfg = tmp_path / "m.yaml"
        cfg.write_text("preset: micro\n")
        code, out, _ = run(capsys, "count-ops", "--config", str(cfg))
        assert code == 0 and "OPs" in out and "size" in out


class TestObserve:
    def test_adam_csv(self, capsys, tmp_path):
        path = tmp_path / "adam.csv"
        assert run(capsys, "observe", "--experiment", "adam", "--out", str(path))[0] == 0
        with open(path) as fh:
            rows = {int(r["t"]): float(r["factor"]) for r in csv.DictReader(fh)}
        assert rows[5000] == pytest.approx(3.51, abs=0.02)

    def test_figure_written(self, capsys, tmp_path):
        fig = tmp_path / "demoivre.png"
        code, out, _ = run(capsys, "observe", "--experiment", "demoivre", "--figure", str(fig))
        assert code == 0 and out.startswith("d,")
        assert fig.stat().st_size > 0


class TestErrors:
    def test_missing_config_names_path(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--config", str(tmp_path / "none.yaml"),
                           "--data", str(tmp_path), "--out", str(tmp_path / "o"))
        assert code == 2 and "none.yaml" in err

    def test_missing_checkpoint_names_path(self, capsys, cifar_dir, tmp_path):
        code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "gone.bhvt"), "--data", str(cifar_dir))
        assert code == 2 and "gone.bhvt" in err

    def test_unknown_flag(self, capsys):
        assert run(capsys, "verify", "--bogus")[0] == 2

    def test_unknown_command(self, capsys):
        assert run(capsys, "fly")[0] == 2

    def test_bad_gemm_size(self, capsys):
        code, _, err = run(capsys, "bench-gemm", "--sizes", "8x8")
        assert code == 2 and "MxKxN" in err


def test_bench_gemm(capsys):
    code, out, _ = run(capsys, "bench-gemm", "--sizes", "8x64x8,16x128x16", "--repeat", "1")
    lines = out.strip().splitlines()
    assert code == 0 and lines[0].startswith("m,k,n") and len(lines) == 3


def test_train_then_eval(capsys, cifar_dir, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("preset: micro\ntrain:\n  epochs: 1\n  batch_size: 20\n  lam: 0.0\n")
    out_dir = tmp_path / "run"
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--data", str(cifar_dir), "--out", str(out_dir),
                       "--seed", "1", "--figure", str(tmp_path / "flips.png"))
    assert code == 0
    rec = json.loads(out.strip().splitlines()[-1])
    assert rec["epoch"] == 0 and "eval_accuracy" in rec
    assert (out_dir / "metrics.jsonl").exists() and (tmp_path / "flips.png").exists()
    ckpt = out_dir / "last.bhvt"
    code, out, _ = run(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(cifar_dir))
    dense = json.loads(out)
    code_bits, out_bits, _ = run(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(cifar_dir), "--bits")
    assert code == code_bits == 0
    bits = json.loads(out_bits)
    assert dense["samples"] == 20
    assert dense["accuracy"] == bits["accuracy"] and dense["loss"] == bits["loss"]


def test_data_env_default(capsys, cifar_dir, tmp_path, monkeypatch):
    monkeypatch.delenv("BHVIT_DATA", raising=False)
    cfg = tmp_path / "c.yaml"
    cfg.write_text("preset: micro\n")
    code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert code == 2 and "BHVIT_DATA" in err
