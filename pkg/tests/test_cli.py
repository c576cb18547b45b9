import csv
import json

import numpy as np
import pytest

from divfree.cli import apply_overrides, build_parser, diagnose_divergence, main
from divfree.common import ConfigError, GridConfig, RunSettings

DATA_FLAGS = ["--n-dat", "4", "--n-tra", "3", "--n-dis", "8", "--n-res", "16", "--seed", "0",
              "--f22", "1.002", "1.004"]
MODEL_FLAGS = ["--modes", "3", "--width", "4", "--depth", "1", "--lr0", "0.01"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    assert main(["generate", "--out", str(root)] + DATA_FLAGS) == 0
    return root


def _train(root, *extra):
    return main(["train", "--out", str(root), "--epochs", "5"] + MODEL_FLAGS + list(extra))


def test_overrides_follow_flags():
    args = build_parser().parse_args(["train", "--n-dis", "16", "--n-dat", "8", "--variant", "pi",
                                      "--c-div", "0.3", "--seed", "4", "--s-u", "1/6"])
    s = apply_overrides(RunSettings(), args)
    assert s.grid.n_dis == 16 and s.dataset.n_res == 16
    assert s.dataset.n_dat == 8 and s.dataset.n_tra == 6
    assert s.loss.variant == "pi" and s.loss.c_div == 0.3
    assert s.dataset.seed == s.microstructure.seed == s.training.seed == 4
    assert s.microstructure.s_U == pytest.approx(1 / 6)


def test_evaluate_keeps_grain_size_for_ood():
    args = build_parser().parse_args(["evaluate", "--s-u", "0.5"])
    assert apply_overrides(RunSettings(), args).microstructure.s_U == pytest.approx(1 / 3)


def test_invalid_flag_value_is_a_config_error(tmp_path):
    args = build_parser().parse_args(["generate", "--n-dis", "7"])
    with pytest.raises(ConfigError):
        apply_overrides(RunSettings(), args)
    assert main(["generate", "--out", str(tmp_path), "--n-dis", "7"]) == 4
    assert main(["train", "--out", str(tmp_path), "--epochs", "-1"]) == 4


def test_generate_is_reproducible(workspace, tmp_path):
    assert main(["generate", "--out", str(tmp_path)] + DATA_FLAGS) == 0
    first = sorted((workspace / "dataset").iterdir())
    assert [p.name for p in first] == sorted(p.name for p in (tmp_path / "dataset").iterdir())
    for p in first:
        assert p.read_bytes() == (tmp_path / "dataset" / p.name).read_bytes()


def test_unwritable_output_is_an_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["generate", "--out", str(blocker / "sub")] + DATA_FLAGS) == 2


def test_missing_dataset_is_an_io_error(tmp_path):
    assert _train(tmp_path / "empty", "--variant", "pe") == 2


def test_missing_config_exits_with_config_code(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "absent.yml")]) == 4


def test_train_writes_history_and_checkpoint(workspace):
    assert _train(workspace, "--variant", "pe") == 0
    with (workspace / "pe" / "history.csv").open(newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 5
    assert [int(r["epoch"]) for r in rows] == list(range(5))
    ckpt = json.loads((workspace / "pe" / "checkpoint.json").read_text())
    assert ckpt["variant"] == "pe" and ckpt["epoch"] == 5
    assert (workspace / "pe" / "loss.svg").is_file()


def test_pi_run_records_its_weight(workspace):
    assert _train(workspace, "--variant", "pi", "--c-div", "0.5") == 0
    ckpt = json.loads((workspace / "pi_c0.5" / "checkpoint.json").read_text())
    assert ckpt["loss"]["c_div"] == 0.5
    assert ckpt["loss"]["variant"] == "pi"


def test_resume_extends_the_history(workspace):
    assert _train(workspace, "--variant", "pg") == 0
    assert main(["train", "--out", str(workspace), "--variant", "pg", "--resume", "--epochs", "7"]
                + MODEL_FLAGS) == 0
    with (workspace / "pg" / "history.csv").open(newline="") as f:
        assert [int(r["epoch"]) for r in csv.DictReader(f)] == list(range(7))


def test_resume_with_other_variant_is_rejected(workspace, tmp_path):
    ckpt = tmp_path / "ckpt"
    assert _train(workspace, "--variant", "pe", "--checkpoint", str(ckpt)) == 0
    assert _train(workspace, "--variant", "pg", "--checkpoint", str(ckpt), "--resume") == 4


def test_evaluate_variant_mismatch(workspace):
    assert _train(workspace, "--variant", "pe") == 0
    assert main(["evaluate", "--out", str(workspace), "--checkpoint", str(workspace / "pe"),
                 "--variant", "pg"]) == 4


def test_evaluate_pe_writes_metrics_and_maps(workspace):
    assert _train(workspace, "--variant", "pe") == 0
    assert main(["evaluate", "--out", str(workspace), "--variant", "pe"]) == 0
    eval_dir = workspace / "pe" / "eval"
    metrics = json.loads((eval_dir / "metrics.json").read_text())
    assert metrics["rel_div_norm"] <= 1e-10
    assert metrics["split"] == "test" and metrics["n_samples"] == 1
    assert metrics["max_error_MPa"] >= metrics["median_error_MPa"] >= 0.0
    assert "error_000.pgm" in metrics["maps"]
    assert (eval_dir / "error_000.pgm").read_bytes().startswith(b"P5\n8 8\n65535\n")
    assert (eval_dir / "div_000.pgm.json").is_file()
    assert np.fromfile(eval_dir / "error_000.f64", dtype="<f8").size == 64


def test_evaluate_out_of_distribution(workspace, tmp_path):
    assert _train(workspace, "--variant", "pe") == 0
    assert main(["evaluate", "--out", str(workspace), "--variant", "pe", "--s-u", "1/2",
                 "--n-ood", "2", "--max-maps", "1", "--eval-dir", str(tmp_path)]) == 0
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["split"] == "ood"
    assert metrics["n_samples"] == 2
    assert metrics["s_U"] == 0.5


def test_diagnose_constant_field(tmp_path, capsys):
    path = tmp_path / "field.f64"
    np.full((8, 8, 3, 3), 2.0).astype("<f8").tofile(path)
    assert main(["diagnose-div", "--field", str(path), "--n-dis", "8"]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    rel = float(line.split("rel_div_norm=")[1].split()[0])
    assert rel <= 1e-12


def test_diagnose_wrong_size_is_a_config_error(tmp_path):
    path = tmp_path / "field.f64"
    np.zeros(10).astype("<f8").tofile(path)
    assert main(["diagnose-div", "--field", str(path), "--n-dis", "8"]) == 4


def test_diagnose_dataset_sample(workspace, capsys):
    assert main(["diagnose-div", "--out", str(workspace), "--sample", "1"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("sample 1:")
    rel = float(out.split("rel_div_norm=")[1].split()[0])
    assert np.isfinite(rel) and rel > 0.0


def test_diagnose_divergence_of_single_mode():
    grid = GridConfig(n_dis=8)
    x = np.arange(8) / 8
    P = np.zeros((8, 8, 3, 3))
    P[..., 0, 0] = np.sin(2 * np.pi * x)[:, None]
    report = diagnose_divergence(P, grid)
    assert report["max_div"] == pytest.approx(2 * np.pi, rel=1e-12)


def test_compare_writes_tradeoff(workspace, tmp_path):
    out = tmp_path / "cmp"
    assert main(["compare", "--out", str(out), "--dataset", str(workspace / "dataset"),
                 "--epochs", "2", "--c-div-list", "0.1", "1"] + MODEL_FLAGS) == 0
    with (out / "tradeoff.csv").open(newline="") as f:
        rows = list(csv.DictReader(f))
    assert [(r["variant"], float(r["c_div"])) for r in rows] == [("pg", 0.0), ("pe", 0.0), ("pi", 0.1), ("pi", 1.0)]
    pe = rows[1]
    assert float(pe["rel_div_norm"]) <= 1e-10
    assert (out / "tradeoff.svg").is_file()
    assert (out / "pi_c0.1" / "checkpoint.json").is_file()


def test_verify_appendix(capsys):
    assert main(["verify-appendix", "--trials", "2", "--n-dis", "8"]) == 0
    assert "FAIL" not in capsys.readouterr().out
