"""End-to-end command-line interface behaviour (in-process)."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from hallucilab.cli import main
from hallucilab.metrics import read_metrics_rows

FAST = [
    "--n-train", "8",
    "--n-test", "4",
    "--image-size", "48,64",
    "--det-width", "4",
    "--unet-widths", "2,4",
    "--epochs", "1",
    "--seeds", "0",
]


def run_cli(*argv: str) -> int:
    return main(list(argv))


@pytest.fixture(scope="module")
def bench(tmp_path_factory) -> Path:
    """A shared output root with one pretrained seed-0 detector."""
    root = tmp_path_factory.mktemp("cli-bench")
    assert run_cli("pretrain", "--out", str(root), *FAST) == 0
    return root


def test_pretrain_writes_every_artifact(bench):
    exp = bench / "bench"
    assert (exp / "detectors" / "seed0.ckpt").is_file()
    assert (exp / "resolved" / "pretrain.json").is_file()
    rows = read_metrics_rows(exp / "metrics.csv")
    assert {r.method for r in rows} == {"rgb", "none"}
    assert all(r.seed == 0 for r in rows)
    summary = json.loads((exp / "summary.json").read_text())
    assert set(summary["bench"]) == {"rgb", "none"}
    assert summary["bench"]["rgb"]["n_seeds"] == 1


def test_resolved_config_records_flag_overrides(bench):
    resolved = json.loads((bench / "bench" / "resolved" / "pretrain.json").read_text())
    assert resolved["schema_version"] == 1
    assert resolved["command"] == "pretrain"
    assert resolved["dataset"]["n_train"] == 8
    assert resolved["detector"]["width"] == 4
    assert resolved["seeds"] == [0]


def test_out_root_falls_back_to_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("HALLUCILAB_OUT", str(tmp_path / "envroot"))
    assert run_cli("report") == 2  # nothing recorded yet, but the root resolves
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2
    assert "metrics" in err["message"]


def test_baseline_rerun_appends_identical_values(bench):
    assert run_cli("baseline", "--out", str(bench), "--method", "invert", *FAST) == 0
    assert run_cli("baseline", "--out", str(bench), "--method", "invert", *FAST) == 0
    rows = [r for r in read_metrics_rows(bench / "bench" / "metrics.csv") if r.method == "invert"]
    assert len(rows) == 2
    assert len({r.ap50 for r in rows}) == 1


def test_unknown_baseline_method_fails_clean(bench, capsys):
    assert run_cli("baseline", "--out", str(bench), "--method", "sharpen", *FAST) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["exit_code"] == 2
    assert "sharpen" in err["message"]


def test_hallucidet_requires_pretrained_detectors(tmp_path, capsys):
    assert run_cli("hallucidet", "--out", str(tmp_path), *FAST) == 2
    err = json.loads(capsys.readouterr().err)
    assert "pretrain" in err["message"]


def test_hallucidet_trains_and_records(bench):
    assert run_cli("hallucidet", "--out", str(bench), *FAST) == 0
    exp = bench / "bench"
    assert (exp / "translators" / "hallucidet_seed0.ckpt").is_file()
    rows = [r for r in read_metrics_rows(exp / "metrics.csv") if r.method == "hallucidet"]
    assert len(rows) == 1


def test_eval_explicit_checkpoint_with_label(bench):
    ckpt = bench / "bench" / "detectors" / "seed0.ckpt"
    assert run_cli(
        "eval", "--out", str(bench), "--detector", str(ckpt),
        "--source", "rgb", "--label", "rgb-again", "--seed", "0", *FAST,
    ) == 0
    rows = read_metrics_rows(bench / "bench" / "metrics.csv")
    again = [r for r in rows if r.method == "rgb-again"]
    rgb = [r for r in rows if r.method == "rgb"]
    assert len(again) == 1
    assert again[0].ap50 == rgb[0].ap50


def test_eval_rejects_conflicting_translators(bench, capsys):
    ckpt = bench / "bench" / "detectors" / "seed0.ckpt"
    code = run_cli(
        "eval", "--out", str(bench), "--detector", str(ckpt),
        "--method", "invert", "--translator", str(ckpt), *FAST,
    )
    assert code == 2
    capsys.readouterr()


def test_report_prints_method_lines(bench, capsys):
    assert run_cli("report", "--out", str(bench)) == 0
    out = capsys.readouterr().out
    assert "rgb" in out and "invert" in out


def test_panel_renders_and_reruns_identically(bench):
    argv = ["panel", "--out", str(bench), "--rows", "rgb,none,invert,hallucidet",
            "--samples", "2", *FAST]
    assert run_cli(*argv) == 0
    path = bench / "bench" / "panels" / "panel.png"
    first = path.read_bytes()
    assert run_cli(*argv) == 0
    assert path.read_bytes() == first


def test_check_min_ap_gate_fails_with_exit_4(tmp_path, capsys):
    code = run_cli("pretrain", "--out", str(tmp_path), *FAST, "--check-min-ap", "0.999")
    assert code == 4
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "AcceptanceFailure"


def test_report_gate_checks_best_method_mean(bench, capsys):
    assert run_cli("report", "--out", str(bench), "--exp", "bench", "--check-min-ap", "0.999") == 4
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "AcceptanceFailure"
    assert run_cli("report", "--out", str(bench), "--exp", "bench", "--check-min-ap", "0.0") == 0


def test_divergence_exits_3(tmp_path, capsys):
    code = run_cli(
        "pretrain", "--out", str(tmp_path), *FAST,
        "--epochs", "2", "--optimizer", "sgd", "--lr", "1e30",
    )
    assert code == 3
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "TrainingDiverged"


def test_config_file_supplies_defaults_and_flags_win(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "dataset": {"n_train": 8, "n_test": 4, "image_size": [48, 64]},
        "detector": {"width": 4},
        "train": {"epochs": 1},
        "seeds": [0],
    }))
    assert run_cli("pretrain", "--out", str(tmp_path), "--config", str(cfg),
                   "--epochs", "2") == 0
    resolved = json.loads((tmp_path / "bench" / "resolved" / "pretrain.json").read_text())
    assert resolved["dataset"]["n_train"] == 8  # from the file
    assert resolved["train"]["epochs"] == 2     # flag beats file


def test_config_file_rejects_unknown_keys(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"dataset": {"n_trian": 8}}))
    assert run_cli("pretrain", "--out", str(tmp_path), "--config", str(cfg)) == 2
    err = json.loads(capsys.readouterr().err)
    assert "n_trian" in err["message"]


def test_finetune_writes_tuned_detector(bench):
    assert run_cli("finetune", "--out", str(bench), *FAST) == 0
    assert (bench / "bench" / "finetuned" / "seed0.ckpt").is_file()
    rows = [r for r in read_metrics_rows(bench / "bench" / "metrics.csv") if r.method == "finetune"]
    assert len(rows) == 1


def test_recon_writes_translator(bench):
    assert run_cli("recon", "--out", str(bench), *FAST) == 0
    assert (bench / "bench" / "translators" / "recon_seed0.ckpt").is_file()
    rows = [r for r in read_metrics_rows(bench / "bench" / "metrics.csv") if r.method == "recon"]
    assert len(rows) == 1


def test_sweep_lambda_labels_rows_by_weights(bench):
    assert run_cli("sweep-lambda", "--out", str(bench), "--grid", "0,1,1;1,0,0", *FAST) == 0
    methods = {r.method for r in read_metrics_rows(bench / "bench" / "metrics.csv")}
    assert {"hallucidet@l=0:1:1", "hallucidet@l=1:0:0"} <= methods
    assert (bench / "bench" / "translators" / "hallucidet_l0-1-1_seed0.ckpt").is_file()


def test_sweep_capacity_labels_rows_by_widths(bench):
    assert run_cli("sweep-capacity", "--out", str(bench), "--widths-grid", "2,4;3,6", *FAST) == 0
    methods = {r.method for r in read_metrics_rows(bench / "bench" / "metrics.csv")}
    assert {"hallucidet@w=2-4", "hallucidet@w=3-6"} <= methods


def test_sweep_fraction_records_one_method_per_fraction(bench):
    assert run_cli("sweep-fraction", "--out", str(bench), "--fractions", "0.5,1.0", *FAST) == 0
    rows = read_metrics_rows(bench / "bench" / "metrics.csv")
    methods = {r.method for r in rows}
    assert {"hallucidet@f=0.5", "hallucidet@f=1"} <= methods
    assert (bench / "bench" / "panels" / "sweep_fraction.png").is_file()
