import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from footfield.cli import main


def run_cli(args):
    return main(args)


def data_tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run_manifest.json":
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def mini_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "ds"
    rc = run_cli(["gen-data", "--identities", "2", "--poses", "2",
                  "--val-identities", "1", "--quality", "0.6", "--seed", "5",
                  "--out-dir", str(out)])
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def mini_model(mini_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    rc = run_cli(["train", "--data", str(mini_data), "--out-dir", str(out),
                  "--seed", "0", "--epochs", "6", "--registration-steps", "40",
                  "--chamfer-samples", "150", "--texture-samples", "50",
                  "--train-resolution", "simplified-150"])
    assert rc == 0
    return out / "model.ckpt"


def test_gen_data_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    args = ["gen-data", "--identities", "2", "--poses", "2", "--val-identities",
            "1", "--quality", "0.5", "--seed", "7"]
    assert run_cli(args + ["--out-dir", str(a)]) == 0
    assert run_cli(args + ["--out-dir", str(b)]) == 0
    assert data_tree_hash(a) == data_tree_hash(b)


def test_gen_data_writes_manifest_and_layout(mini_data):
    assert (mini_data / "meta.json").exists()
    assert (mini_data / "template.ply").exists()
    assert (mini_data / "run_manifest.json").exists()
    meta = json.loads((mini_data / "meta.json").read_text())
    for scan in meta["scans"]:
        assert (mini_data / scan["file"]).exists()
        assert len(scan["pose_vector"]) == 8
        assert set(scan["keypoints"]) == {"heel", "toe1", "toe5", "ankle",
                                          "arch", "ball"}
    manifest = json.loads((mini_data / "run_manifest.json").read_text())
    assert "argv" in manifest and "effective_config" in manifest


def test_train_outputs(mini_model):
    run_dir = mini_model.parent
    assert mini_model.exists()
    assert (run_dir / "training_log.csv").exists()
    header = (run_dir / "training_log.csv").read_text().splitlines()[0]
    assert header.split(",")[:2] == ["epoch", "chamfer"]


def test_fit3d_and_eval_report_schema(mini_data, mini_model, tmp_path):
    out = tmp_path / "fit"
    rc = run_cli(["fit3d", "--data", str(mini_data), "--model", str(mini_model),
                  "--out-dir", str(out), "--seed", "0",
                  "--config", str(mini_model.parent / "effective_config.json")])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["mean"]) >= {"chamfer_um", "keypoint_mm"}
    for row in report["per_scan"]:
        assert {"scan_id", "chamfer_um", "keypoint_mm", "iou"} <= set(row)
    assert (out / "report.md").exists()


def test_eval_requires_fitted_instances(mini_data, mini_model, tmp_path):
    rc = run_cli(["eval", "--data", str(mini_data), "--model", str(mini_model),
                  "--split", "val", "--out-dir", str(tmp_path / "e")])
    assert rc == 1  # training checkpoint has no val instances


def test_eval_on_train_split(mini_data, mini_model, tmp_path):
    rc = run_cli(["eval", "--data", str(mini_data), "--model", str(mini_model),
                  "--split", "train", "--out-dir", str(tmp_path / "e2")])
    assert rc == 0
    report = json.loads((tmp_path / "e2" / "report.json").read_text())
    assert report["per_scan"]


def test_pca_subcommand(mini_data, tmp_path):
    out = tmp_path / "pca"
    rc = run_cli(["pca", "--data", str(mini_data), "--out-dir", str(out),
                  "--seed", "0", "--points", "200"])
    assert rc == 0
    assert (out / "pca.ckpt").exists()
    report = json.loads((out / "report.json").read_text())
    assert np.isfinite(report["mean"]["chamfer_um"])


def test_render_subcommand(mini_data, mini_model, tmp_path):
    meta = json.loads((mini_data / "meta.json").read_text())
    scan_id = meta["scans"][0]["scan_id"]
    out = tmp_path / "render"
    rc = run_cli(["render", "--model", str(mini_model), "--scan", scan_id,
                  "--channels", "rgb", "--image-size", "64",
                  "--out-dir", str(out)])
    assert rc == 0
    png = out / f"{scan_id}_rgb.png"
    assert png.exists() and png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_parts_subcommand(mini_data, tmp_path):
    out = tmp_path / "parts"
    rc = run_cli(["parts", "--data", str(mini_data), "--out-dir", str(out),
                  "--seed", "0", "--classes", "5", "--views", "4",
                  "--steps", "25", "--image-size", "40"])
    assert rc == 0
    assert (out / "classifier.json").exists()
    assert (out / "centroids.json").exists()
    assert (out / "template.parts.npyraw").exists()
    from footfield.parts import load_part_scores
    scores = load_part_scores(out / "template.parts.npyraw")
    assert scores.shape[1] == 5


def test_align_subcommand(tmp_path):
    raw_dir = tmp_path / "raw"
    rc = run_cli(["gen-data", "--identities", "2", "--quality", "0.6",
                  "--seed", "3", "--unaligned", "--out-dir", str(raw_dir)])
    assert rc == 0
    out = tmp_path / "aligned"
    rc = run_cli(["align", "--input", str(raw_dir), "--out-dir", str(out),
                  "--seed", "3"])
    assert rc == 0
    blob = json.loads((out / "alignment.json").read_text())
    assert len(blob) == 2
    from footfield.mesh import load_mesh
    for name, info in blob.items():
        mesh = load_mesh(out / "scans" / f"{name}.ply")
        assert abs(mesh.vertices[:, 2].max() - (info["heel_z"] + 0.10)) < 1e-9
        assert mesh.slice_face_mask.any()


def test_invalid_input_exit_code(tmp_path):
    rc = run_cli(["train", "--data", str(tmp_path / "nowhere"),
                  "--out-dir", str(tmp_path / "x")])
    assert rc == 1


def test_config_round_trip(mini_data, tmp_path):
    # rerunning with the dumped effective config reproduces the outputs
    a = tmp_path / "a"
    rc = run_cli(["gen-data", "--identities", "1", "--poses", "2",
                  "--val-identities", "1", "--quality", "0.5", "--seed", "9",
                  "--out-dir", str(a)])
    assert rc == 0
    b = tmp_path / "b"
    rc = run_cli(["gen-data", "--identities", "1", "--poses", "2",
                  "--val-identities", "1", "--quality", "0.5", "--seed", "9",
                  "--config", str(a / "effective_config.json"),
                  "--out-dir", str(b)])
    assert rc == 0
    assert data_tree_hash(a) == data_tree_hash(b)


def test_cli_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "footfield.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("gen-data", "align", "train", "refine", "fit3d", "fit2d",
                "pca", "eval", "render", "parts"):
        assert sub in proc.stdout
