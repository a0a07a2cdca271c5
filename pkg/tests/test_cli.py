"""End-to-end subcommand tests on small synthetic corpora."""

import numpy as np
import pytest

from slabdet import cli
from slabdet.config import PipelineConfig, dump_config, from_dict
from slabdet.dataset import parse_manifest


def write_cfg(path, **overrides):
    cfg = from_dict(overrides)
    path.write_text(dump_config(cfg))
    return cfg


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Synth + preprocess + build-dataset, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = root / "cfg.yaml"
    cfg = write_cfg(
        cfg_path,
        seed=3,
        scan_dir=str(root / "scans"),
        annotations=str(root / "scans" / "annotations.csv"),
        output_root=str(root / "out"),
        synth={"n_scans": 8, "seed": 3},
        augment_copies=1,
    )
    assert cli.main(["--config", str(cfg_path), "synth"]) == 0
    assert cli.main(["--config", str(cfg_path), "preprocess"]) == 0
    assert cli.main(["--config", str(cfg_path), "build-dataset"]) == 0
    return cfg_path, cfg


def test_preprocess_empty_dir_warns(tmp_path, caplog):
    cfg_path = tmp_path / "cfg.yaml"
    (tmp_path / "scans").mkdir()
    write_cfg(cfg_path, scan_dir=str(tmp_path / "scans"),
              output_root=str(tmp_path / "out"))
    assert cli.main(["--config", str(cfg_path), "preprocess"]) == 0
    assert "no scans found" in caplog.text


def test_preprocess_two_scan_fixture(tmp_path):
    cfg_path = tmp_path / "cfg.yaml"
    write_cfg(cfg_path, scan_dir=str(tmp_path / "scans"),
              annotations=str(tmp_path / "scans" / "annotations.csv"),
              output_root=str(tmp_path / "out"),
              synth={"n_scans": 2, "dims": (24, 64, 64), "seed": 1})
    assert cli.main(["--config", str(cfg_path), "synth"]) == 0
    assert cli.main(["--config", str(cfg_path), "preprocess"]) == 0
    reports = (tmp_path / "out" / "v1" / "preprocessed" / "reports.csv")
    lines = reports.read_text().strip().splitlines()
    assert len(lines) == 3  # header + 2 scans
    header = lines[0].split(",")
    assert "threshold" in header and "z_lo" in header and "z_hi" in header
    for line in lines[1:]:
        row = dict(zip(header, line.split(",")))
        assert float(row["threshold"]) > 0.0
        assert int(row["z_hi"]) > int(row["z_lo"])


def test_preprocess_rerun_skips(pipeline, caplog):
    cfg_path, _ = pipeline
    with caplog.at_level("INFO"):
        assert cli.main(["--config", str(cfg_path), "preprocess"]) == 0
    assert "skipped 8" in caplog.text


def test_preprocess_unreadable_scan_fails_but_continues(tmp_path, caplog):
    cfg_path = tmp_path / "cfg.yaml"
    write_cfg(cfg_path, scan_dir=str(tmp_path / "scans"),
              annotations=str(tmp_path / "scans" / "annotations.csv"),
              output_root=str(tmp_path / "out"),
              synth={"n_scans": 3, "dims": (24, 64, 64), "seed": 1})
    assert cli.main(["--config", str(cfg_path), "synth"]) == 0
    raw = tmp_path / "scans" / "synth-001.raw"
    raw.write_bytes(raw.read_bytes()[:100])
    assert cli.main(["--config", str(cfg_path), "preprocess"]) == 1
    assert "synth-001" in caplog.text
    reports = (tmp_path / "out" / "v1" / "preprocessed" / "reports.csv")
    rows = reports.read_text().strip().splitlines()[1:]
    assert len(rows) == 2  # the two healthy scans still made it through


def test_build_dataset_manifest_byte_identical(pipeline):
    cfg_path, cfg = pipeline
    manifest_path = cli._manifest_path(cfg)
    before = manifest_path.read_bytes()
    assert cli.main(["--config", str(cfg_path), "build-dataset"]) == 0
    assert manifest_path.read_bytes() == before


def test_build_dataset_roles_and_rates(pipeline):
    _, cfg = pipeline
    manifest = parse_manifest(cli._manifest_path(cfg).read_text())
    rates = dict(manifest.achieved_rates)
    assert set(rates) == {"train", "val", "test"}
    for role in ("train", "val", "test"):
        assert len(manifest.role_entries(role)) > 0
    # augmented copies double the train role without changing its rate
    train = manifest.role_entries("train")
    augmented = [e for e in train if "-aug" in e.path]
    assert len(augmented) == len(train) // 2


def test_build_dataset_scan_level_split(pipeline):
    _, cfg = pipeline
    manifest = parse_manifest(cli._manifest_path(cfg).read_text())
    seen = {}
    for entry in manifest.entries:
        assert seen.setdefault(entry.scan_id, entry.role) == entry.role


def test_build_dataset_no_positives_errors(tmp_path, caplog):
    cfg_path = tmp_path / "cfg.yaml"
    write_cfg(cfg_path, scan_dir=str(tmp_path / "scans"),
              annotations=str(tmp_path / "scans" / "annotations.csv"),
              output_root=str(tmp_path / "out"),
              synth={"n_scans": 4, "dims": (24, 64, 64), "seed": 1,
                     "nodule_count_probs": (1.0, 0.0, 0.0)})
    assert cli.main(["--config", str(cfg_path), "synth"]) == 0
    assert cli.main(["--config", str(cfg_path), "preprocess"]) == 0
    assert cli.main(["--config", str(cfg_path), "build-dataset"]) == 1
    assert "infeasible" in caplog.text and "0 positive" in caplog.text


def test_config_snapshot_written(pipeline):
    _, cfg = pipeline
    assert (cli._root(cfg) / "config_used.yaml").exists()


def test_train_missing_manifest_errors(tmp_path, caplog):
    cfg_path = tmp_path / "cfg.yaml"
    write_cfg(cfg_path, output_root=str(tmp_path / "out"))
    assert cli.main(["--config", str(cfg_path), "train"]) == 1
    assert "manifest missing" in caplog.text


def test_eval_missing_checkpoint_errors(pipeline, tmp_path, caplog):
    cfg_path, cfg = pipeline
    assert cli.main(["--config", str(cfg_path), "eval"]) == 1
    assert "checkpoint missing" in caplog.text and "best.ckpt" in caplog.text


def test_report_missing_detections_errors(pipeline, caplog):
    cfg_path, _ = pipeline
    assert cli.main(["--config", str(cfg_path), "report", "--role", "val"]) == 1
    assert "detections missing" in caplog.text


class PerfectOracle:
    """Stub detector answering with the exact ground truth for each image."""

    def __init__(self, samples):
        self.by_image = {s.image.tobytes(): s.boxes for s in samples}

    def predict(self, image):
        boxes = self.by_image[np.asarray(image, dtype=np.float64).tobytes()]
        return boxes.reshape(-1, 4).copy(), np.ones(boxes.shape[0])


def test_eval_perfect_oracle_all_ones(pipeline, monkeypatch):
    cfg_path, cfg = pipeline
    manifest = parse_manifest(cli._manifest_path(cfg).read_text())
    stub = PerfectOracle(cli._load_samples(cfg, manifest, "val")
                         + cli._load_samples(cfg, manifest, "test"))
    monkeypatch.setattr(cli, "_load_model", lambda _cfg: (stub, {}))
    assert cli.main(["--config", str(cfg_path), "eval", "--role", "test"]) == 0
    text = (cli._eval_dir(cfg, "test") / "report.txt").read_text()
    for line in text.splitlines():
        name, _, value = line.rpartition(" ")
        if name.strip() in ("Average Precision @ IoU 0.5 (All Areas)",
                            "Average Recall @ IoU 0.5 (All Areas)",
                            "F1 Score"):
            assert value == "100.0%"


def test_report_renders_metric_rows(pipeline, monkeypatch):
    cfg_path, cfg = pipeline
    manifest = parse_manifest(cli._manifest_path(cfg).read_text())
    stub = PerfectOracle(cli._load_samples(cfg, manifest, "val")
                         + cli._load_samples(cfg, manifest, "test"))
    monkeypatch.setattr(cli, "_load_model", lambda _cfg: (stub, {}))
    assert cli.main(["--config", str(cfg_path), "eval", "--role", "test"]) == 0
    assert cli.main(["--config", str(cfg_path), "report", "--role", "test"]) == 0
    out = cli._eval_dir(cfg, "test")
    text = (out / "report.txt").read_text()
    for name in ("F1 Score",
                 "Average Precision @ IoU 0.5 (All Areas)",
                 "Average Precision @ IoU 0.5 (Small Areas)",
                 "Average Precision @ IoU 0.5 (Medium Areas)",
                 "Average Precision @ IoU 0.5 (Large Areas)",
                 "Average Recall @ IoU 0.5 (All Areas)",
                 "Average Recall @ IoU 0.5 (Small Areas)",
                 "Average Recall @ IoU 0.5 (Medium Areas)",
                 "Average Recall @ IoU 0.5 (Large Areas)"):
        assert name in text
    svg = (out / "pr_curve.svg").read_text()
    assert svg.startswith("<svg") and "polyline" in svg


def test_train_then_eval_tiny(tmp_path):
    """Real train/eval wiring on a dwarf model; quality is not asserted."""
    cfg_path = tmp_path / "cfg.yaml"
    write_cfg(cfg_path,
              seed=3,
              scan_dir=str(tmp_path / "scans"),
              annotations=str(tmp_path / "scans" / "annotations.csv"),
              output_root=str(tmp_path / "out"),
              synth={"n_scans": 8, "seed": 3},
              augment_copies=0,
              model={"d_model": 16, "n_heads": 2, "n_points": 2,
                     "n_encoder_layers": 1, "n_decoder_layers": 1,
                     "n_queries": 4, "ffn_dim": 32},
              optim={"epochs": 1, "batch_size": 4, "accumulation_steps": 1})
    for sub in ("synth", "preprocess", "build-dataset", "train"):
        assert cli.main(["--config", str(cfg_path), sub]) == 0
    assert (tmp_path / "out" / "v1" / "checkpoints" / "best.ckpt").exists()
    assert (tmp_path / "out" / "v1" / "train_log.csv").exists()
    assert cli.main(["--config", str(cfg_path), "eval", "--role", "val",
                     "--threshold", "0.5"]) == 0
    out = tmp_path / "out" / "v1" / "eval" / "val"
    assert (out / "report.txt").exists()
    assert (out / "detections.csv").exists()


def test_seed_flag_overrides_config(tmp_path):
    cfg_path = tmp_path / "cfg.yaml"
    write_cfg(cfg_path, scan_dir=str(tmp_path / "scans"),
              annotations=str(tmp_path / "scans" / "annotations.csv"),
              output_root=str(tmp_path / "out"),
              synth={"n_scans": 2, "dims": (24, 64, 64), "seed": 1})
    assert cli.main(["--config", str(cfg_path), "synth"]) == 0
    first = (tmp_path / "scans" / "synth-000.raw").read_bytes()
    assert cli.main(["--config", str(cfg_path), "--seed", "9", "synth"]) == 0
    assert (tmp_path / "scans" / "synth-000.raw").read_bytes() != first


def test_bad_config_exit_code(tmp_path):
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text("thickness_mm: -2\n")
    assert cli.main(["--config", str(cfg_path), "synth"]) == 2
