"""Batch pipeline CLI: synth, annotate, fit, eval, validate.

Exit codes: 0 success, 2 configuration error, 3 missing/invalid input,
4 internal numeric failure aborting a run. Stage outputs are written
atomically and are byte-identical across reruns and worker counts; run
manifests additionally record config, input/output hashes, and timings.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .confidence import ConfidenceConfig, process_view_sequence
from .errors import ConfigError, InputFileError, NonFiniteLoss
from .evaluation import (
    ACTION_CLASSES,
    ActionLabel,
    confusion_and_accuracy,
    mpjpe,
    pa_mpjpe,
)
from .fitting import FitConfig, fit_sequence
from .geometry import validate_rig
from .sceneio import (
    RunManifest,
    ScenePaths,
    atomic_write_text,
    fit_record,
    load_annotations,
    load_detections,
    load_mask_pgm,
    load_model,
    load_rig,
    load_topology,
    read_jsonl,
    save_annotations,
    save_detections,
    save_mask_pgm,
    save_model,
    save_rig,
    save_topology,
    sha256_file,
    write_jsonl,
)
from .silhouette import SilhouetteMask
from .synth import SynthConfig, generate_scene, observe, render_gt_masks
from .topology import PART_BODY, SkeletonSet3D, default_topology
from .triangulation import merge_keypoints, triangulate_frame

logger = logging.getLogger(__name__)

_EXIT_OK = 0
_EXIT_CONFIG = 2
_EXIT_INPUT = 3
_EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    confidence: ConfidenceConfig
    fit: FitConfig
    synth: SynthConfig
    parallelism: int = 1

    def as_dict(self) -> dict:
        return {
            "confidence": dataclasses.asdict(self.confidence),
            "fit": dataclasses.asdict(self.fit),
            "synth": dataclasses.asdict(self.synth),
            "parallelism": self.parallelism,
        }


def _build_section(cls, payload: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(payload) - known
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")
    try:
        return cls(**payload)
    except (ValueError, ConfigError, TypeError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def load_pipeline_config(
    path: str | None, seed: int | None = None, workers: int | None = None
) -> PipelineConfig:
    payload: dict = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        import json

        try:
            payload = json.loads(config_path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: malformed config JSON ({exc})") from exc
    unknown = set(payload) - {"confidence", "fit", "synth", "parallelism"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    synth_payload = dict(payload.get("synth", {}))
    if seed is not None:
        synth_payload["rng_seed"] = seed
    parallelism = int(payload.get("parallelism", 1))
    if workers is not None:
        parallelism = workers
    if parallelism < 1:
        raise ConfigError(f"worker count must be >= 1, got {parallelism}")
    return PipelineConfig(
        confidence=_build_section(ConfidenceConfig, dict(payload.get("confidence", {})), "confidence"),
        fit=_build_section(FitConfig, dict(payload.get("fit", {})), "fit"),
        synth=_build_section(SynthConfig, synth_payload, "synth"),
        parallelism=parallelism,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace, config: PipelineConfig) -> int:
    if args.out is None:
        raise ConfigError("synth requires --out <scene-dir>")
    paths = ScenePaths(Path(args.out))
    cfg = config.synth
    scene = generate_scene(cfg, with_masks=False)
    detections = observe(scene, cfg)
    masks = render_gt_masks(scene, scene.rig, hard=True, soft_sigma=config.fit.soft_sigma)

    save_rig(paths.rig, scene.rig)
    save_topology(paths.topology, scene.model.topology)
    save_model(paths.model, scene.model)
    for view_id, frames in detections.items():
        save_detections(paths.detections(view_id), frames)
    for view_id, view_masks in masks.items():
        for mask in view_masks:
            save_mask_pgm(paths.mask(view_id, mask.frame), mask)

    topology = scene.model.topology
    hand_mask = np.array([spec.part != PART_BODY for spec in topology.joints])
    hands_sets = []
    for skeleton in scene.joints_per_frame:
        hands_sets.append(
            SkeletonSet3D.from_positions(
                topology,
                skeleton.frame,
                skeleton.positions(),
                valid=hand_mask,
                support=cfg.view_count,
            )
        )
    save_annotations(paths.hands, hands_sets)
    save_annotations(paths.ground_truth, list(scene.joints_per_frame))
    logger.info("synthesized scene with %d frames, %d views at %s",
                cfg.sequence_length, cfg.view_count, paths.root)
    return _EXIT_OK


def cmd_annotate(args: argparse.Namespace, config: PipelineConfig) -> int:
    paths = ScenePaths(Path(args.scene_dir))
    manifest = RunManifest(command="annotate", version=__version__, config=config.as_dict())
    started = time.perf_counter()

    rig = load_rig(paths.rig)
    violations = validate_rig(rig)
    if violations:
        raise InputFileError(f"{paths.rig}: " + "; ".join(violations))
    topology = load_topology(paths.topology)
    if not paths.detections_dir.is_dir():
        raise InputFileError(f"missing detections directory: {paths.detections_dir}")
    per_view = {}
    for view in rig.views:
        det_path = paths.detections(view.id)
        per_view[view.id] = load_detections(det_path)
        manifest.add_input(paths.root, det_path)
    manifest.add_input(paths.root, paths.rig)
    manifest.add_input(paths.root, paths.topology)
    hands = None
    if paths.hands.is_file():
        hands = load_annotations(paths.hands, topology)
        manifest.add_input(paths.root, paths.hands)
    manifest.timings_ms["load"] = 1000.0 * (time.perf_counter() - started)

    stage = time.perf_counter()
    processed = {
        view.id: process_view_sequence(per_view[view.id], view, config.confidence, len(topology))
        for view in rig.views
    }
    manifest.timings_ms["confidence"] = 1000.0 * (time.perf_counter() - stage)

    stage = time.perf_counter()
    frame_indices = sorted({fd.frame for frames in processed.values() for fd in frames})
    by_frame: dict[int, dict] = {f: {} for f in frame_indices}
    for view_id, frames in processed.items():
        for fd in frames:
            by_frame[fd.frame][view_id] = fd
    hands_by_frame = {s.frame: s for s in hands} if hands else {}

    def annotate_frame(frame: int) -> SkeletonSet3D:
        skeleton = triangulate_frame(rig, by_frame[frame], topology)
        hand_set = hands_by_frame.get(frame)
        if hand_set is not None:
            skeleton = merge_keypoints(skeleton, hand_set)
        return skeleton

    if config.parallelism > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(annotate_frame, frame_indices))
    else:
        results = [annotate_frame(f) for f in frame_indices]
    manifest.timings_ms["triangulate"] = 1000.0 * (time.perf_counter() - stage)

    stage = time.perf_counter()
    out_path = Path(args.out) / "annotations.jsonl" if args.out else paths.annotations
    save_annotations(out_path, results)
    manifest.timings_ms["write"] = 1000.0 * (time.perf_counter() - stage)
    manifest.outputs["annotations.jsonl"] = sha256_file(out_path)
    manifest.save(out_path.parent / "annotate_manifest.json")
    logger.info("annotated %d frames -> %s", len(results), out_path)
    return _EXIT_OK


def cmd_fit(args: argparse.Namespace, config: PipelineConfig) -> int:
    paths = ScenePaths(Path(args.scene_dir))
    manifest = RunManifest(command="fit", version=__version__, config=config.as_dict())
    rig = load_rig(paths.rig)
    topology = load_topology(paths.topology)
    model = load_model(paths.model, topology)
    annotations_path = Path(args.annotations) if args.annotations else paths.annotations
    targets = load_annotations(annotations_path, topology)
    manifest.add_input(paths.root, paths.rig)
    manifest.add_input(paths.root, paths.topology)
    manifest.add_input(paths.root, paths.model)
    manifest.inputs[str(annotations_path)] = sha256_file(annotations_path)

    out_path = Path(args.out) / "fit.jsonl" if args.out else paths.fit
    if not targets:
        write_jsonl(out_path, [])
        manifest.save(out_path.parent / "fit_manifest.json")
        logger.info("no frames to fit")
        return _EXIT_OK

    masks: list[list[SilhouetteMask] | None] | None = None
    if config.fit.lambda_mask > 0.0:
        if not paths.masks_dir.is_dir():
            raise InputFileError(
                f"fit config has lambda_mask > 0 but masks are missing: {paths.masks_dir}"
            )
        masks = []
        for target in targets:
            frame_masks = []
            for view in rig.views:
                frame_masks.append(load_mask_pgm(paths.mask(view.id, target.frame), view.id, target.frame))
            masks.append(frame_masks)

    started = time.perf_counter()
    results = fit_sequence(model, targets, masks, rig, config.fit)
    manifest.timings_ms["fit"] = 1000.0 * (time.perf_counter() - started)

    records = [
        fit_record(target.frame, res.params, res.loss, res.iterations, res.converged)
        for target, res in zip(targets, results)
    ]
    write_jsonl(out_path, records)
    manifest.outputs["fit.jsonl"] = sha256_file(out_path)
    manifest.save(out_path.parent / "fit_manifest.json")

    converged = sum(1 for r in results if r.converged)
    failed = sum(1 for r in results if r.error is not None)
    print(
        f"fit: {converged}/{len(results)} frames converged, {failed} failed",
        file=sys.stderr,
    )
    return _EXIT_OK


def _annotation_arrays(records: list[dict], path: Path) -> tuple[list[str], np.ndarray, np.ndarray, list[int]]:
    """Names, (T, J, 3) positions, (T, J) validity, frame indices."""
    if not records:
        raise InputFileError(f"{path}: no annotation records")
    names = [str(j["name"]) for j in records[0]["joints"]]
    positions = np.zeros((len(records), len(names), 3))
    valid = np.zeros((len(records), len(names)), dtype=bool)
    frames = []
    for row, record in enumerate(records):
        entries = record["joints"]
        if [str(j["name"]) for j in entries] != names:
            raise InputFileError(f"{path}: record {row + 1} joint names differ")
        frames.append(int(record["frame"]))
        for col, entry in enumerate(entries):
            if entry["valid"] and entry["xyz_mm"] is not None:
                positions[row, col] = entry["xyz_mm"]
                valid[row, col] = True
    return names, positions, valid, frames


def _joint_subset(names: list[str], subset: str, topology_path: str | None) -> np.ndarray:
    if subset == "all":
        return np.ones(len(names), dtype=bool)
    if topology_path is not None:
        topology = load_topology(Path(topology_path))
    else:
        topology = default_topology()
        if set(names) - set(topology.names):
            raise ConfigError(
                "--joints hand/body needs --topology for non-default joint names"
            )
    part_of = {spec.name: spec.part for spec in topology.joints}
    try:
        if subset == "body":
            return np.array([part_of[name] == PART_BODY for name in names])
        return np.array([part_of[name] != PART_BODY for name in names])
    except KeyError as exc:
        raise InputFileError(f"joint {exc} not present in the topology") from exc


def cmd_eval(args: argparse.Namespace, config: PipelineConfig) -> int:
    pred_path = Path(args.pred)
    gt_path = Path(args.gt)
    names_p, pos_p, valid_p, frames_p = _annotation_arrays(read_jsonl(pred_path), pred_path)
    names_g, pos_g, valid_g, frames_g = _annotation_arrays(read_jsonl(gt_path), gt_path)
    if names_p != names_g:
        raise InputFileError("prediction and ground-truth joint names differ")
    if frames_p != frames_g:
        raise InputFileError("prediction and ground-truth frame indices differ")
    subset = _joint_subset(names_p, args.joints, args.topology)

    out_dir = Path(args.out) if args.out else pred_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = ["frame,mpjpe_mm,pa_mpjpe_mm"]
    errors = []
    aligned_errors = []
    for row, frame in enumerate(frames_p):
        mask = valid_p[row] & valid_g[row] & subset
        cells = [str(frame), "", ""]
        if mask.any():
            value = mpjpe(pos_p[row], pos_g[row], mask)
            errors.append(value)
            cells[1] = format(value, ".9g")
        if mask.sum() >= 3:
            try:
                value = pa_mpjpe(pos_p[row], pos_g[row], mask)
                aligned_errors.append(value)
                cells[2] = format(value, ".9g")
            except Exception:  # degenerate configurations leave the cell empty
                pass
        lines.append(",".join(cells))
    mean_cells = [
        "mean",
        format(float(np.mean(errors)), ".9g") if errors else "",
        format(float(np.mean(aligned_errors)), ".9g") if aligned_errors else "",
    ]
    lines.append(",".join(mean_cells))
    metrics_path = out_dir / "metrics.csv"
    atomic_write_text(metrics_path, "\n".join(lines) + "\n")
    logger.info("metrics -> %s", metrics_path)

    if args.labels:
        pairs = _load_label_pairs(Path(args.labels))
        matrix, accuracy = confusion_and_accuracy(pairs)
        _write_confusion_csv(out_dir / "confusion.csv", matrix.counts, accuracy)
        _write_confusion_svg(out_dir / "confusion.svg", matrix.row_percentages())
        logger.info("confusion report -> %s (accuracy %.4f)", out_dir, accuracy)
    return _EXIT_OK


def _load_label_pairs(path: Path) -> list[tuple[ActionLabel, ActionLabel]]:
    if not path.is_file():
        raise InputFileError(f"missing labels file: {path}")
    by_value = {label.value: label for label in ACTION_CLASSES}
    pairs = []
    for number, line in enumerate(path.read_text("utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or parts[0] not in by_value or parts[1] not in by_value:
            raise InputFileError(f"{path}: invalid label pair at line {number}")
        pairs.append((by_value[parts[0]], by_value[parts[1]]))
    return pairs


def _write_confusion_csv(path: Path, counts: np.ndarray, accuracy: float) -> None:
    names = [label.value for label in ACTION_CLASSES]
    lines = ["truth\\prediction," + ",".join(names)]
    for row, name in enumerate(names):
        lines.append(name + "," + ",".join(str(int(c)) for c in counts[row]))
    lines.append(f"accuracy,{format(accuracy, '.9g')}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def _write_confusion_svg(path: Path, row_percent: np.ndarray) -> None:
    cell = 64
    margin = 110
    size = len(ACTION_CLASSES)
    width = margin + size * cell + 20
    height = margin + size * cell + 20
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        '<style>text{font-family:sans-serif;font-size:11px;}</style>',
    ]
    for row in range(size):
        for col in range(size):
            value = row_percent[row, col]
            shade = int(round(255 - 1.55 * value))
            x = margin + col * cell
            y = margin + row * cell
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                f'fill="rgb({shade},{shade},255)" stroke="black"/>'
            )
            parts.append(
                f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" '
                f'text-anchor="middle">{value:.1f}</text>'
            )
    for index, label in enumerate(ACTION_CLASSES):
        parts.append(
            f'<text x="{margin - 6}" y="{margin + index * cell + cell / 2 + 4}" '
            f'text-anchor="end">{label.value}</text>'
        )
        parts.append(
            f'<text x="{margin + index * cell + cell / 2}" y="{margin - 8}" '
            f'text-anchor="middle" transform="rotate(-40 {margin + index * cell + cell / 2} {margin - 8})">{label.value}</text>'
        )
    parts.append("</svg>")
    atomic_write_text(path, "\n".join(parts) + "\n")


def cmd_validate(args: argparse.Namespace, config: PipelineConfig) -> int:
    paths = ScenePaths(Path(args.scene_dir))
    problems: list[str] = []
    rig = None
    topology = None
    try:
        rig = load_rig(paths.rig)
        problems.extend(validate_rig(rig))
    except InputFileError as exc:
        problems.append(str(exc))
    try:
        topology = load_topology(paths.topology)
    except InputFileError as exc:
        problems.append(str(exc))
    if paths.model.is_file() and topology is not None:
        try:
            load_model(paths.model, topology)
        except (InputFileError, ValueError) as exc:
            problems.append(str(exc))
    if rig is not None and topology is not None and paths.detections_dir.is_dir():
        for view in rig.views:
            det_path = paths.detections(view.id)
            if not det_path.is_file():
                problems.append(f"missing detections for view {view.id!r}")
                continue
            try:
                for fd in load_detections(det_path):
                    if len(fd.joints) != len(topology):
                        problems.append(
                            f"{det_path}: frame {fd.frame} has {len(fd.joints)} joints, "
                            f"topology has {len(topology)}"
                        )
                        break
            except InputFileError as exc:
                problems.append(str(exc))
    if paths.hands.is_file() and topology is not None:
        try:
            load_annotations(paths.hands, topology)
        except InputFileError as exc:
            problems.append(str(exc))
    for problem in problems:
        print(problem, file=sys.stderr)
    if problems:
        return _EXIT_INPUT
    print(f"scene {paths.root} OK", file=sys.stderr)
    return _EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON")
    common.add_argument("--workers", type=int, help="worker count")
    common.add_argument("--seed", type=int, help="override the synthesis RNG seed")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="mvposekit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("annotate", parents=[common], help="confidence -> triangulate -> merge")
    p.add_argument("scene_dir")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("fit", parents=[common], help="fit the capsule model per frame")
    p.add_argument("scene_dir")
    p.add_argument("--annotations", help="annotations JSONL (default: <scene>/out/annotations.jsonl)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", parents=[common], help="pose metrics and label reports")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--joints", choices=["all", "hand", "body"], default="all")
    p.add_argument("--topology", help="topology JSON defining the hand/body partition")
    p.add_argument("--labels", help="CSV of truth,prediction action labels")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", parents=[common], help="check a scene directory")
    p.add_argument("scene_dir")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_pipeline_config(args.config, seed=args.seed, workers=args.workers)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return _EXIT_CONFIG
    except InputFileError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return _EXIT_INPUT
    except (NonFiniteLoss, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return _EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
