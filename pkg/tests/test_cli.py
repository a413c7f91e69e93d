"""End-to-end tests of the command-line pipeline."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from mvposekit.cli import main
from mvposekit.sceneio import ScenePaths, load_annotations, load_topology, read_jsonl

pytestmark = pytest.mark.filterwarnings("ignore::pytest.PytestUnraisableExceptionWarning")


def write_config(tmp_path: Path, **overrides) -> Path:
    config = {
        "synth": {
            "view_count": 4,
            "sequence_length": 2,
            "rng_seed": 9,
            "noise_sigma_px": 0.0,
            "image_size": 48,
        },
        "confidence": {"margin": 4.0, "median_window": 1},
        "fit": {"lambda_mask": 0.0, "max_iterations": 30, "gradient_tolerance": 1e-5},
        "parallelism": 1,
    }
    for section, values in overrides.items():
        if isinstance(values, dict):
            config.setdefault(section, {}).update(values)
        else:
            config[section] = values
    path = tmp_path / "config.json"
    path.write_text(json.dumps(config))
    return path


def synth_scene(tmp_path: Path, name: str = "scene", **overrides) -> tuple[Path, Path]:
    config = write_config(tmp_path, **overrides)
    scene = tmp_path / name
    assert main(["synth", "--out", str(scene), "--config", str(config)]) == 0
    return scene, config


def directory_bytes(root: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file()
    }


class TestSynthCommand:
    def test_writes_expected_layout(self, tmp_path):
        scene, _ = synth_scene(tmp_path)
        paths = ScenePaths(scene)
        assert paths.rig.is_file()
        assert paths.topology.is_file()
        assert paths.model.is_file()
        assert paths.hands.is_file()
        assert paths.ground_truth.is_file()
        assert len(list(paths.detections_dir.glob("*.jsonl"))) == 4
        assert len(list(paths.masks_dir.glob("*/*.pgm"))) == 8

    def test_fixed_seed_twice_byte_identical(self, tmp_path):
        scene_a, _ = synth_scene(tmp_path, name="a")
        scene_b, _ = synth_scene(tmp_path, name="b")
        assert directory_bytes(scene_a) == directory_bytes(scene_b)

    def test_single_view_exits_2(self, tmp_path):
        config = write_config(tmp_path, synth={"view_count": 1})
        assert main(["synth", "--out", str(tmp_path / "s"), "--config", str(config)]) == 2

    def test_missing_out_exits_2(self, tmp_path):
        config = write_config(tmp_path)
        assert main(["synth", "--config", str(config)]) == 2

    def test_unknown_config_key_exits_2(self, tmp_path):
        config = tmp_path / "config.json"
        config.write_text('{"synth": {"bogus_knob": 1}}')
        assert main(["synth", "--out", str(tmp_path / "s"), "--config", str(config)]) == 2

    def test_synthesized_scene_validates(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        assert main(["validate", str(scene), "--config", str(config)]) == 0


class TestAnnotateCommand:
    def test_noiseless_annotations_match_ground_truth(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        assert main(["annotate", str(scene), "--config", str(config)]) == 0
        paths = ScenePaths(scene)
        topology = load_topology(paths.topology)
        annotations = load_annotations(paths.annotations, topology)
        ground_truth = load_annotations(paths.ground_truth, topology)
        for ann, gt in zip(annotations, ground_truth):
            error = np.linalg.norm(ann.positions() - gt.positions(), axis=1)
            # Both files carry 9-significant-digit coordinates, so each side
            # contributes up to ~5e-7 mm of rounding on top of the solver's
            # ~1e-10 mm triangulation error.
            assert np.nanmax(error) < 5e-6

    def test_missing_rig_exits_3(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        ScenePaths(scene).rig.unlink()
        assert main(["annotate", str(scene), "--config", str(config)]) == 3

    def test_malformed_detections_exit_3(self, tmp_path, capsys):
        scene, config = synth_scene(tmp_path)
        det = next(ScenePaths(scene).detections_dir.glob("*.jsonl"))
        det.write_text(det.read_text() + "garbage\n")
        assert main(["annotate", str(scene), "--config", str(config)]) == 3
        assert "line 3" in capsys.readouterr().err

    def test_worker_counts_do_not_change_bytes(self, tmp_path):
        scene, config = synth_scene(
            tmp_path, synth={"sequence_length": 3, "noise_sigma_px": 0.4}
        )
        paths = ScenePaths(scene)
        out_serial = tmp_path / "serial"
        out_parallel = tmp_path / "parallel"
        assert main(["annotate", str(scene), "--config", str(config), "--out", str(out_serial), "--workers", "1"]) == 0
        assert main(["annotate", str(scene), "--config", str(config), "--out", str(out_parallel), "--workers", "8"]) == 0
        assert (out_serial / "annotations.jsonl").read_bytes() == (
            out_parallel / "annotations.jsonl"
        ).read_bytes()

    def test_rerun_hash_stable(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        assert main(["annotate", str(scene), "--config", str(config)]) == 0
        first = json.loads((ScenePaths(scene).out_dir / "annotate_manifest.json").read_text())
        assert main(["annotate", str(scene), "--config", str(config)]) == 0
        second = json.loads((ScenePaths(scene).out_dir / "annotate_manifest.json").read_text())
        assert first["outputs"] == second["outputs"]


class TestFitCommand:
    def test_fits_annotations(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        assert main(["annotate", str(scene), "--config", str(config)]) == 0
        assert main(["fit", str(scene), "--config", str(config)]) == 0
        records = read_jsonl(ScenePaths(scene).fit)
        assert len(records) == 2
        assert {"frame", "beta", "theta", "root_rotation", "root_translation", "loss", "iterations", "converged"} <= set(records[0])

    def test_mask_term_without_masks_exits_3(self, tmp_path, capsys):
        scene, config = synth_scene(tmp_path, fit={"lambda_mask": 0.5})
        assert main(["annotate", str(scene), "--config", str(config)]) == 0
        import shutil

        shutil.rmtree(ScenePaths(scene).masks_dir)
        assert main(["fit", str(scene), "--config", str(config)]) == 3
        assert "masks" in capsys.readouterr().err

    def test_empty_annotations_give_empty_output(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert main(["fit", str(scene), "--annotations", str(empty), "--config", str(config)]) == 0
        assert ScenePaths(scene).fit.read_text() == ""

    def test_missing_annotations_exit_3(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        assert main(["fit", str(scene), "--config", str(config)]) == 3


class TestEvalCommand:
    def test_identical_inputs_give_zero_metrics(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        gt = ScenePaths(scene).ground_truth
        out = tmp_path / "eval"
        assert main(["eval", "--pred", str(gt), "--gt", str(gt), "--out", str(out), "--config", str(config)]) == 0
        rows = (out / "metrics.csv").read_text().strip().splitlines()
        assert rows[0] == "frame,mpjpe_mm,pa_mpjpe_mm"
        for row in rows[1:]:
            cells = row.split(",")
            assert float(cells[1]) == 0.0
            assert float(cells[2]) < 1e-9

    def test_metrics_match_library_calls(self, tmp_path):
        scene, config = synth_scene(tmp_path, synth={"noise_sigma_px": 1.0})
        assert main(["annotate", str(scene), "--config", str(config)]) == 0
        paths = ScenePaths(scene)
        out = tmp_path / "eval"
        assert main([
            "eval", "--pred", str(paths.annotations), "--gt", str(paths.ground_truth),
            "--topology", str(paths.topology), "--out", str(out), "--config", str(config),
        ]) == 0
        from mvposekit.evaluation import mpjpe, pa_mpjpe

        topology = load_topology(paths.topology)
        annotations = load_annotations(paths.annotations, topology)
        ground_truth = load_annotations(paths.ground_truth, topology)
        rows = (out / "metrics.csv").read_text().strip().splitlines()[1:-1]
        for row, ann, gt in zip(rows, annotations, ground_truth):
            cells = row.split(",")
            mask = ann.valid_mask() & gt.valid_mask()
            expected = mpjpe(ann.positions(), gt.positions(), mask)
            assert float(cells[1]) == pytest.approx(expected, rel=1e-8)
            expected_pa = pa_mpjpe(ann.positions(), gt.positions(), mask)
            assert float(cells[2]) == pytest.approx(expected_pa, rel=1e-6, abs=1e-9)

    def test_hand_subset(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        paths = ScenePaths(scene)
        out = tmp_path / "eval"
        assert main([
            "eval", "--pred", str(paths.ground_truth), "--gt", str(paths.ground_truth),
            "--joints", "hand", "--topology", str(paths.topology),
            "--out", str(out), "--config", str(config),
        ]) == 0
        assert (out / "metrics.csv").is_file()

    def test_labels_produce_confusion_report(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        gt = ScenePaths(scene).ground_truth
        labels = tmp_path / "labels.csv"
        labels.write_text("screw,screw\nscrew,unscrew\npick_up,pick_up\n")
        out = tmp_path / "eval"
        assert main([
            "eval", "--pred", str(gt), "--gt", str(gt), "--labels", str(labels),
            "--out", str(out), "--config", str(config),
        ]) == 0
        confusion = (out / "confusion.csv").read_text().splitlines()
        assert confusion[0].startswith("truth\\prediction")
        assert any(line.startswith("accuracy,") for line in confusion)
        svg = (out / "confusion.svg").read_text()
        assert svg.startswith("<svg") and "unscrew" in svg

    def test_bad_label_line_exits_3(self, tmp_path):
        scene, config = synth_scene(tmp_path)
        gt = ScenePaths(scene).ground_truth
        labels = tmp_path / "labels.csv"
        labels.write_text("screw,notalabel\n")
        assert main([
            "eval", "--pred", str(gt), "--gt", str(gt), "--labels", str(labels),
            "--out", str(tmp_path / "e"), "--config", str(config),
        ]) == 3


class TestValidateCommand:
    def test_broken_rotation_reported(self, tmp_path, capsys):
        scene, config = synth_scene(tmp_path)
        rig_path = ScenePaths(scene).rig
        payload = json.loads(rig_path.read_text())
        payload["views"][0]["R"][0] = 1.5
        rig_path.write_text(json.dumps(payload))
        assert main(["validate", str(scene), "--config", str(config)]) == 3
        assert "orthonormal" in capsys.readouterr().err

    def test_missing_scene_exits_3(self, tmp_path):
        assert main(["validate", str(tmp_path / "nowhere")]) == 3
