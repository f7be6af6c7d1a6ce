import csv
import json

import pytest

from maskmix.cli import main
from maskmix.report import read_run_report, render_run_curves, write_run_report
from maskmix.trainer import EpochRecord, RunReport


def strip_wall_time(csv_path) -> str:
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    drop = rows[0].index("wall_time_s")
    return "\n".join(",".join(col for i, col in enumerate(row) if i != drop) for row in rows)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthetic data + corpus + a tiny config shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    assert main([
        "synth-data", "--out", str(root / "data"), "--classes", "3", "--per-class", "10",
        "--size", "8", "--difficulty", "0.2", "--seed", "3",
    ]) == 0
    assert main([
        "synth-data", "--corpus", "--count", "24", "--size", "8",
        "--out", str(root / "corpus"), "--seed", "4",
    ]) == 0
    cfg = {
        "epochs": 2,
        "batch_size": 6,
        "lr": 1e-3,
        "seed": 5,
        "projection_dim": 8,
        "eval_every": 1,
        "encoder": {
            "image_size": 8, "patch_size": 4, "channels": 1, "embed_dim": 12,
            "depth": 1, "num_heads": 2, "mlp_ratio": 2.0,
            "decoder_dim": 8, "decoder_depth": 1, "decoder_num_heads": 2,
        },
    }
    (root / "cfg.json").write_text(json.dumps(cfg))
    return root


class TestUsage:
    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "maskmix" in capsys.readouterr().out

    def test_unknown_command_exits_two(self):
        assert main(["frobnicate"]) == 2

    def test_unknown_flag_exits_two(self):
        assert main(["gradcheck", "--bogus"]) == 2

    def test_missing_checkpoint_is_runtime_error(self, workspace, capsys):
        code = main([
            "eval", "--data", str(workspace / "data" / "test.csv"),
            "--checkpoint", str(workspace / "nope.ckpt"),
        ])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestPipeline:
    def test_pretrain_then_finetune_then_eval(self, workspace, capsys):
        pre = workspace / "pre"
        assert main([
            "pretrain", "--data", str(workspace / "corpus" / "corpus.csv"),
            "--config", str(workspace / "cfg.json"), "--out", str(pre),
        ]) == 0
        assert (pre / "checkpoint.ckpt").exists()
        assert (pre / "run_report.csv").exists()
        assert (pre / "run_curves.png").exists()

        ft = workspace / "ft"
        assert main([
            "finetune", "--data", str(workspace / "data" / "train.csv"),
            "--eval-data", str(workspace / "data" / "test.csv"),
            "--init", str(pre / "checkpoint.ckpt"),
            "--config", str(workspace / "cfg.json"), "--out", str(ft),
        ]) == 0
        assert (ft / "checkpoint.ckpt").exists()
        report = read_run_report(ft / "run_report.csv")
        assert len(report) == 2
        assert report.records[-1].eval_acc is not None

        assert main([
            "eval", "--data", str(workspace / "data" / "test.csv"),
            "--checkpoint", str(ft / "checkpoint.ckpt"), "--out", str(ft),
        ]) == 0
        payload = json.loads((ft / "eval.json").read_text())
        assert 0.0 <= payload["accuracy"] <= 1.0
        assert "accuracy:" in capsys.readouterr().out

    def test_seeded_rerun_is_byte_identical_minus_wall_time(self, workspace):
        runs = []
        for name in ("det_a", "det_b"):
            out = workspace / name
            assert main([
                "finetune", "--data", str(workspace / "data" / "train.csv"),
                "--eval-data", str(workspace / "data" / "test.csv"),
                "--config", str(workspace / "cfg.json"), "--seed", "21",
                "--out", str(out),
            ]) == 0
            runs.append(strip_wall_time(out / "run_report.csv"))
        assert runs[0] == runs[1]

    def test_export_embeddings(self, workspace):
        ft = workspace / "ft"
        out = workspace / "emb.csv"
        assert main([
            "export-embeddings", "--data", str(workspace / "data" / "test.csv"),
            "--checkpoint", str(ft / "checkpoint.ckpt"), "--out", str(out),
        ]) == 0
        lines = out.read_text().strip().splitlines()
        assert len(lines) > 1 and lines[0].startswith("source_id,class,r0")

    def test_synth_data_deterministic(self, workspace, tmp_path):
        for name in ("s1", "s2"):
            assert main([
                "synth-data", "--out", str(tmp_path / name), "--classes", "2",
                "--per-class", "5", "--size", "8", "--seed", "11",
            ]) == 0
        a = (tmp_path / "s1" / "train.csv").read_bytes()
        b = (tmp_path / "s2" / "train.csv").read_bytes()
        assert a == b


class TestSweep:
    def test_sweep_grid(self, workspace):
        out = workspace / "sweep"
        assert main([
            "sweep", "--data", str(workspace / "data" / "train.csv"),
            "--eval-data", str(workspace / "data" / "test.csv"),
            "--config", str(workspace / "cfg.json"), "--seed", "2",
            "--epochs", "1", "--out", str(out),
        ]) == 0
        with open(out / "sweep_summary.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 16
        parameters = {row["parameter"] for row in rows}
        assert parameters == {"temperature", "loss_weight", "projection_dim", "batch_size"}
        cell_reports = list(out.glob("*/run_report.csv"))
        assert len(cell_reports) == 16
        figures = list(out.glob("sweep_*.png"))
        assert len(figures) == 4


class TestReportModule:
    def test_csv_round_trip(self, tmp_path):
        report = RunReport()
        report.append(EpochRecord(epoch=1, stage="finetune", total_loss=1.5, ce_loss=1.25,
                                  contrastive_loss=2.5, train_acc=0.5, eval_acc=0.4,
                                  skipped_anchors=2, wall_time_s=0.1))
        report.append(EpochRecord(epoch=2, stage="finetune", total_loss=1.0, ce_loss=0.9,
                                  contrastive_loss=1.0, train_acc=0.7, wall_time_s=0.1))
        path = tmp_path / "report.csv"
        write_run_report(report, path)
        loaded = read_run_report(path)
        assert len(loaded) == 2
        assert loaded.records[0].total_loss == 1.5
        assert loaded.records[1].eval_acc is None
        assert loaded.records[0].skipped_anchors == 2

    def test_float_repr_round_trips_exactly(self, tmp_path):
        value = 0.1 + 0.2  # not representable prettily; repr must round-trip
        report = RunReport()
        report.append(EpochRecord(epoch=1, stage="pretrain", recon_loss=value, wall_time_s=0.0))
        path = tmp_path / "r.csv"
        write_run_report(report, path)
        assert read_run_report(path).records[0].recon_loss == value

    def test_curves_rendered(self, tmp_path):
        report = RunReport()
        for e in range(1, 4):
            report.append(EpochRecord(epoch=e, stage="pretrain", recon_loss=1.0 / e,
                                      total_loss=1.0 / e, wall_time_s=0.01))
        png = tmp_path / "curves.png"
        render_run_curves(report, png)
        assert png.stat().st_size > 0
