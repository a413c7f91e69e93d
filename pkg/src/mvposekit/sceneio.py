"""Scene-directory file formats and atomic, deterministic serialization.

A scene directory contains:

    rig.json                      camera calibration (projection derived on load)
    topology.json                 skeleton joint tree
    model.json                    capsule model (references the topology file)
    detections/{view_id}.jsonl    per-view 2D detections, one record per frame
    hands_3d.jsonl                precomputed hand keypoints (annotation schema)
    masks/{view_id}/{frame:06d}.pgm   binary P5 silhouettes (0 bg / 255 person)
    ground_truth.jsonl            synthetic scenes only: exact 3D joints
    out/                          stage outputs + run manifests

All numeric output is serialized with 9 significant digits and files are
written to a temporary path then renamed, so an interrupted run never
leaves a truncated file. Writers are deterministic: identical data yields
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .confidence import Detection2D, FrameDetections
from .errors import InputFileError
from .geometry import CameraView, Rig
from .kinematics import CapsuleModel, KinematicParams
from .silhouette import SilhouetteMask
from .topology import Joint3D, JointSpec, SkeletonSet3D, SkeletonTopology

SIGNIFICANT_DIGITS = 9


# ---------------------------------------------------------------------------
# Low-level helpers
# ---------------------------------------------------------------------------


def round_floats(value: Any) -> Any:
    """Recursively round floats to 9 significant digits for serialization."""
    if isinstance(value, float):
        if not np.isfinite(value):
            raise ValueError("refusing to serialize a non-finite float")
        return float(format(value, f".{SIGNIFICANT_DIGITS}g"))
    if isinstance(value, (np.floating,)):
        return round_floats(float(value))
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, np.ndarray):
        return round_floats(value.tolist())
    if isinstance(value, dict):
        return {k: round_floats(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [round_floats(v) for v in value]
    return value


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path, payload: Any, full_precision: bool = False) -> None:
    """Write pretty JSON; floats round to 9 significant digits unless the
    payload is a calibration artifact that must round-trip exactly."""
    if not full_precision:
        payload = round_floats(payload)
    atomic_write_text(path, json.dumps(payload, indent=2) + "\n")


def write_jsonl(path: Path, records: Iterable[Any]) -> None:
    lines = [
        json.dumps(round_floats(record), separators=(",", ":")) for record in records
    ]
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_json(path: Path) -> Any:
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"missing input file: {path}")
    try:
        return json.loads(path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise InputFileError(f"{path}: malformed JSON ({exc})") from exc


def read_jsonl(path: Path) -> list[Any]:
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"missing input file: {path}")
    records = []
    with path.open("r", encoding="utf-8") as handle:
        for number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise InputFileError(f"{path}: malformed JSONL at line {number}") from exc
    return records


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Scene layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenePaths:
    """Fixed file layout of a scene directory."""

    root: Path

    def __post_init__(self) -> None:
        object.__setattr__(self, "root", Path(self.root))

    @property
    def rig(self) -> Path:
        return self.root / "rig.json"

    @property
    def topology(self) -> Path:
        return self.root / "topology.json"

    @property
    def model(self) -> Path:
        return self.root / "model.json"

    @property
    def detections_dir(self) -> Path:
        return self.root / "detections"

    def detections(self, view_id: str) -> Path:
        return self.detections_dir / f"{view_id}.jsonl"

    @property
    def hands(self) -> Path:
        return self.root / "hands_3d.jsonl"

    @property
    def ground_truth(self) -> Path:
        return self.root / "ground_truth.jsonl"

    @property
    def masks_dir(self) -> Path:
        return self.root / "masks"

    def mask(self, view_id: str, frame: int) -> Path:
        return self.masks_dir / view_id / f"{frame:06d}.pgm"

    @property
    def out_dir(self) -> Path:
        return self.root / "out"

    @property
    def annotations(self) -> Path:
        return self.out_dir / "annotations.jsonl"

    @property
    def fit(self) -> Path:
        return self.out_dir / "fit.jsonl"


# ---------------------------------------------------------------------------
# Rig / topology / model files
# ---------------------------------------------------------------------------


def save_rig(path: Path, rig: Rig) -> None:
    payload = {
        "units": rig.units,
        "views": [
            {
                "id": view.id,
                "K": view.intrinsics.ravel().tolist(),
                "R": view.rotation.ravel().tolist(),
                "t": view.translation.tolist(),
                "width": view.width,
                "height": view.height,
            }
            for view in rig.views
        ],
    }
    write_json(path, payload, full_precision=True)


def load_rig(path: Path) -> Rig:
    payload = read_json(path)
    try:
        views = tuple(
            CameraView(
                id=str(entry["id"]),
                intrinsics=np.array(entry["K"], dtype=np.float64).reshape(3, 3),
                rotation=np.array(entry["R"], dtype=np.float64).reshape(3, 3),
                translation=np.array(entry["t"], dtype=np.float64),
                width=int(entry["width"]),
                height=int(entry["height"]),
            )
            for entry in payload["views"]
        )
        return Rig(views=views, units=str(payload.get("units", "mm")))
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFileError(f"{path}: invalid rig file ({exc})") from exc


def save_topology(path: Path, topology: SkeletonTopology) -> None:
    payload = {
        "joints": [
            {"name": j.name, "parent": j.parent, "part": j.part}
            for j in topology.joints
        ]
    }
    write_json(path, payload)


def load_topology(path: Path) -> SkeletonTopology:
    payload = read_json(path)
    try:
        joints = tuple(
            JointSpec(
                name=str(entry["name"]),
                parent=None if entry["parent"] is None else int(entry["parent"]),
                part=str(entry["part"]),
            )
            for entry in payload["joints"]
        )
        return SkeletonTopology(joints=joints)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFileError(f"{path}: invalid topology file ({exc})") from exc


def save_model(path: Path, model: CapsuleModel, topology_ref: str = "topology.json") -> None:
    payload = {
        "topology_ref": topology_ref,
        "rest_offsets": model.rest_offsets.tolist(),
        "capsule_radii": model.capsule_radii.tolist(),
    }
    write_json(path, payload, full_precision=True)


def load_model(path: Path, topology: SkeletonTopology | None = None) -> CapsuleModel:
    path = Path(path)
    payload = read_json(path)
    try:
        if topology is None:
            topology = load_topology(path.parent / str(payload["topology_ref"]))
        return CapsuleModel(
            topology=topology,
            rest_offsets=np.array(payload["rest_offsets"], dtype=np.float64),
            capsule_radii=np.array(payload["capsule_radii"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFileError(f"{path}: invalid model file ({exc})") from exc


# ---------------------------------------------------------------------------
# Detections
# ---------------------------------------------------------------------------


def save_detections(path: Path, frames: list[FrameDetections]) -> None:
    records = []
    for fd in frames:
        joints = [
            None if det is None else {"x": det.x, "y": det.y, "w": det.confidence}
            for det in fd.joints
        ]
        records.append({"view_id": fd.view_id, "frame": fd.frame, "joints": joints})
    write_jsonl(path, records)


def load_detections(path: Path) -> list[FrameDetections]:
    frames = []
    for number, record in enumerate(read_jsonl(path), start=1):
        try:
            joints = tuple(
                None
                if entry is None
                else Detection2D(
                    x=float(entry["x"]), y=float(entry["y"]), confidence=float(entry["w"])
                )
                for entry in record["joints"]
            )
            frames.append(
                FrameDetections(
                    view_id=str(record["view_id"]),
                    frame=int(record["frame"]),
                    joints=joints,
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputFileError(f"{path}: invalid detection record {number} ({exc})") from exc
    return sorted(frames, key=lambda fd: fd.frame)


# ---------------------------------------------------------------------------
# 3D annotations (triangulation output, hand inputs, ground truth)
# ---------------------------------------------------------------------------


def skeleton_set_record(skeleton: SkeletonSet3D) -> dict:
    joints = []
    for spec, joint in zip(skeleton.topology.joints, skeleton.joints):
        if joint.valid:
            joints.append(
                {
                    "name": spec.name,
                    "xyz_mm": joint.position.tolist(),
                    "valid": True,
                    "support": joint.support,
                    "residual_px": joint.residual,
                }
            )
        else:
            joints.append(
                {
                    "name": spec.name,
                    "xyz_mm": None,
                    "valid": False,
                    "support": joint.support,
                    "residual_px": None,
                }
            )
    return {"frame": skeleton.frame, "joints": joints}


def save_annotations(path: Path, skeletons: list[SkeletonSet3D]) -> None:
    write_jsonl(path, [skeleton_set_record(s) for s in skeletons])


def load_annotations(path: Path, topology: SkeletonTopology) -> list[SkeletonSet3D]:
    names = topology.names
    skeletons = []
    for number, record in enumerate(read_jsonl(path), start=1):
        try:
            entries = record["joints"]
            if len(entries) != len(names):
                raise ValueError(f"{len(entries)} joints, topology has {len(names)}")
            joints = []
            for name, entry in zip(names, entries):
                if str(entry["name"]) != name:
                    raise ValueError(f"joint {entry['name']!r} does not match topology {name!r}")
                if entry["valid"] and entry["xyz_mm"] is not None:
                    joints.append(
                        Joint3D(
                            position=np.array(entry["xyz_mm"], dtype=np.float64),
                            valid=True,
                            support=int(entry.get("support", 0)),
                            residual=float(entry.get("residual_px") or 0.0),
                        )
                    )
                else:
                    joints.append(Joint3D.invalid_joint(support=int(entry.get("support", 0))))
            skeletons.append(
                SkeletonSet3D(topology=topology, frame=int(record["frame"]), joints=tuple(joints))
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InputFileError(f"{path}: invalid annotation record {number} ({exc})") from exc
    return sorted(skeletons, key=lambda s: s.frame)


# ---------------------------------------------------------------------------
# Fitted parameters
# ---------------------------------------------------------------------------


def fit_record(frame: int, params: KinematicParams, loss: float, iterations: int, converged: bool) -> dict:
    return {
        "frame": frame,
        "beta": params.beta.tolist(),
        "theta": params.theta.ravel().tolist(),
        "root_rotation": params.root_rotation.tolist(),
        "root_translation": params.root_translation.tolist(),
        "loss": loss if np.isfinite(loss) else None,
        "iterations": iterations,
        "converged": converged,
    }


def load_fit_records(path: Path) -> list[dict]:
    return read_jsonl(path)


# ---------------------------------------------------------------------------
# PGM masks
# ---------------------------------------------------------------------------


def save_mask_pgm(path: Path, mask: SilhouetteMask) -> None:
    grid = np.clip(np.rint(mask.grid * 255.0), 0, 255).astype(np.uint8)
    height, width = grid.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + grid.tobytes())


def load_mask_pgm(path: Path, view_id: str, frame: int) -> SilhouetteMask:
    """Load a P5 mask, thresholding at 128 into a binary [0, 1] grid."""
    path = Path(path)
    if not path.is_file():
        raise InputFileError(f"missing mask file: {path}")
    data = path.read_bytes()
    try:
        if not data.startswith(b"P5"):
            raise ValueError("not a binary PGM (P5) file")
        fields: list[int] = []
        position = 2
        while len(fields) < 3:
            while position < len(data) and data[position : position + 1].isspace():
                position += 1
            if data[position : position + 1] == b"#":
                while position < len(data) and data[position] != 0x0A:
                    position += 1
                continue
            start = position
            while position < len(data) and not data[position : position + 1].isspace():
                position += 1
            fields.append(int(data[start:position]))
        position += 1  # single whitespace after maxval
        width, height, maxval = fields
        if maxval > 255:
            raise ValueError("16-bit PGM not supported")
        pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=position)
        grid = (pixels.reshape(height, width) >= 128).astype(np.float64)
    except (ValueError, IndexError) as exc:
        raise InputFileError(f"{path}: invalid PGM ({exc})") from exc
    return SilhouetteMask(view_id=view_id, grid=grid, frame=frame)


# ---------------------------------------------------------------------------
# Run manifest
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    """Record of one CLI stage: config, input/output hashes, timings."""

    command: str
    version: str
    config: dict
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    timings_ms: dict[str, float] = field(default_factory=dict)

    def add_input(self, root: Path, path: Path) -> None:
        self.inputs[str(Path(path).relative_to(root))] = sha256_file(path)

    def add_output(self, root: Path, path: Path) -> None:
        self.outputs[str(Path(path).relative_to(root))] = sha256_file(path)

    def save(self, path: Path) -> None:
        payload = {
            "tool": "mvposekit",
            "version": self.version,
            "command": self.command,
            "config": self.config,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "timings_ms": self.timings_ms,
        }
        write_json(path, payload)
