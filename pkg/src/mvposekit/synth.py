"""Synthetic multi-camera scenes with exact ground truth.

Everything here is a pure function of its inputs and an explicit RNG seed:
a ring of inward-looking cameras, smooth sinusoidal joint motion for the
stock capsule model, simulated detector outputs (Gaussian pixel noise,
optional outliers with confidence coupled to the injected error), and
ground-truth silhouette masks rendered from the model itself. Per-frame
RNG streams are derived from (seed, stream, frame) so parallel and serial
generation produce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .confidence import Detection2D, FrameDetections
from .errors import ConfigError
from .geometry import CameraView, Rig, project_points
from .kinematics import CapsuleModel, KinematicParams, default_capsule_model, forward_kinematics
from .silhouette import SilhouetteMask, hard_mask, render_positions
from .topology import SkeletonSet3D

# RNG stream tags; frame indices are appended for per-frame streams.
_STREAM_RIG = 101
_STREAM_MOTION = 202
_STREAM_OBSERVE = 303

# Camera ring geometry (mm); focal length scales with the crop size so the
# body fills a comparable fraction of the field of view at any resolution.
RING_RADIUS_RANGE_MM = (2200.0, 3000.0)
RING_HEIGHT_RANGE_MM = (-300.0, 300.0)
FOCAL_PER_PIXEL_RANGE = (1.5, 1.75)

# Sinusoidal motion: cycles over the whole sequence, per joint axis.
MOTION_FREQ_RANGE = (0.5, 2.0)

# Keeps the body roughly centered on the world origin (see the default
# capsule model's rest offsets).
BODY_RECENTER_MM = np.array([0.0, 90.0, -315.0])

# Confidence simulation: jitter below 1.0 for inliers, and the coupling
# between an outlier's pixel offset and its reported confidence.
CONFIDENCE_JITTER = 0.02
OUTLIER_CONFIDENCE_SCALE_PX = 10.0

DEFAULT_SOFT_SIGMA_PX = 2.0


@dataclass(frozen=True)
class SynthConfig:
    """Scene-generation knobs; every output is deterministic given rng_seed."""

    view_count: int = 8
    noise_sigma_px: float = 1.0
    outlier_rate: float = 0.0
    outlier_sigma_px: float = 20.0
    sequence_length: int = 100
    rng_seed: int = 0
    motion_amplitude_rad: float = 0.5
    image_size: int = 96

    def __post_init__(self) -> None:
        if self.view_count < 2:
            raise ConfigError(f"view_count must be >= 2, got {self.view_count}")
        if not 0.0 <= self.outlier_rate <= 1.0:
            raise ConfigError(f"outlier_rate must lie in [0, 1], got {self.outlier_rate}")
        if self.noise_sigma_px < 0 or self.outlier_sigma_px < 0:
            raise ConfigError("noise sigmas must be >= 0")
        if self.sequence_length < 0:
            raise ConfigError("sequence_length must be >= 0")
        if self.motion_amplitude_rad < 0:
            raise ConfigError("motion_amplitude_rad must be >= 0")
        if self.image_size < 8:
            raise ConfigError("image_size must be >= 8")


@dataclass(frozen=True)
class GroundTruthScene:
    """A complete synthetic capture with exact 3D ground truth."""

    rig: Rig
    model: CapsuleModel
    params_per_frame: tuple[KinematicParams, ...]
    joints_per_frame: tuple[SkeletonSet3D, ...]
    masks_per_view: dict[str, tuple[SilhouetteMask, ...]] | None = None

    @property
    def frame_count(self) -> int:
        return len(self.params_per_frame)


def _look_at_origin(center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation for a camera at ``center``."""
    forward = -center / np.linalg.norm(center)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    return rotation, -rotation @ center


def generate_rig(cfg: SynthConfig) -> Rig:
    """Cameras on a ring around the origin, all looking inward."""
    rng = np.random.default_rng([cfg.rng_seed, _STREAM_RIG])
    size = cfg.image_size
    views = []
    for index in range(cfg.view_count):
        azimuth = 2.0 * np.pi * index / cfg.view_count + rng.uniform(-0.1, 0.1)
        radius = rng.uniform(*RING_RADIUS_RANGE_MM)
        height = rng.uniform(*RING_HEIGHT_RANGE_MM)
        center = np.array(
            [radius * np.cos(azimuth), radius * np.sin(azimuth), height]
        )
        rotation, translation = _look_at_origin(center)
        focal = size * rng.uniform(*FOCAL_PER_PIXEL_RANGE)
        intrinsics = np.array(
            [
                [focal, 0.0, size / 2.0 + rng.uniform(-3.0, 3.0)],
                [0.0, focal * rng.uniform(0.99, 1.01), size / 2.0 + rng.uniform(-3.0, 3.0)],
                [0.0, 0.0, 1.0],
            ]
        )
        views.append(
            CameraView(
                id=f"cam{index:02d}",
                intrinsics=intrinsics,
                rotation=rotation,
                translation=translation,
                width=size,
                height=size,
            )
        )
    return Rig(views=tuple(views))


def generate_motion(
    model: CapsuleModel, cfg: SynthConfig
) -> tuple[tuple[KinematicParams, ...], tuple[SkeletonSet3D, ...]]:
    """Smooth sinusoidal joint-angle trajectories with exact FK ground truth.

    Joint angles stay within +/- motion_amplitude_rad per axis; shape stays
    at zero and the root holds a fixed, seeded position near the origin.
    """
    rng = np.random.default_rng([cfg.rng_seed, _STREAM_MOTION])
    joints = model.joint_count
    amplitude = cfg.motion_amplitude_rad * rng.uniform(0.3, 1.0, size=(joints, 3))
    frequency = rng.uniform(*MOTION_FREQ_RANGE, size=(joints, 3))
    phase = rng.uniform(0.0, 2.0 * np.pi, size=(joints, 3))
    translation = BODY_RECENTER_MM + rng.uniform(-30.0, 30.0, size=3)

    length = cfg.sequence_length
    denominator = max(length, 1)
    params_list = []
    sets = []
    for frame in range(length):
        theta = amplitude * np.sin(
            2.0 * np.pi * frequency * frame / denominator + phase
        )
        params = KinematicParams(
            beta=np.zeros(model.bone_count),
            theta=theta,
            root_rotation=np.zeros(3),
            root_translation=translation,
        )
        positions = forward_kinematics(model, params)
        params_list.append(params)
        sets.append(
            SkeletonSet3D.from_positions(
                model.topology, frame, positions, support=cfg.view_count
            )
        )
    return tuple(params_list), tuple(sets)


def generate_scene(cfg: SynthConfig, with_masks: bool = False) -> GroundTruthScene:
    """Rig + model + motion (+ optional ground-truth masks) in one call."""
    rig = generate_rig(cfg)
    model = default_capsule_model()
    params, joints = generate_motion(model, cfg)
    scene = GroundTruthScene(
        rig=rig, model=model, params_per_frame=params, joints_per_frame=joints
    )
    if with_masks:
        masks = render_gt_masks(scene, rig, hard=True)
        scene = GroundTruthScene(
            rig=rig,
            model=model,
            params_per_frame=params,
            joints_per_frame=joints,
            masks_per_view=masks,
        )
    return scene


def observe(scene: GroundTruthScene, cfg: SynthConfig) -> dict[str, list[FrameDetections]]:
    """Simulated per-view detector outputs for every frame.

    Detections are the exact projections plus Gaussian pixel noise; with
    probability ``outlier_rate`` a detection is additionally perturbed by
    N(0, outlier_sigma^2) and its confidence divided by
    ``1 + offset / OUTLIER_CONFIDENCE_SCALE_PX``. Inlier confidences sit
    just below 1 with small jitter.
    """
    out: dict[str, list[FrameDetections]] = {view.id: [] for view in scene.rig.views}
    for frame in range(scene.frame_count):
        rng = np.random.default_rng([cfg.rng_seed, _STREAM_OBSERVE, frame])
        positions = scene.joints_per_frame[frame].positions()
        for view in scene.rig.views:
            projected = project_points(view, positions)
            detections: list[Detection2D | None] = []
            for row in projected:
                noisy = row + rng.normal(0.0, cfg.noise_sigma_px, size=2)
                confidence = float(np.clip(1.0 - abs(rng.normal(0.0, CONFIDENCE_JITTER)), 0.0, 1.0))
                if cfg.outlier_rate > 0 and rng.uniform() < cfg.outlier_rate:
                    extra = rng.normal(0.0, cfg.outlier_sigma_px, size=2)
                    noisy = noisy + extra
                    offset = float(np.linalg.norm(extra))
                    confidence /= 1.0 + offset / OUTLIER_CONFIDENCE_SCALE_PX
                detections.append(
                    Detection2D(x=float(noisy[0]), y=float(noisy[1]), confidence=confidence)
                )
            out[view.id].append(
                FrameDetections(view_id=view.id, frame=frame, joints=tuple(detections))
            )
    return out


def render_gt_masks(
    scene: GroundTruthScene,
    rig: Rig,
    hard: bool = True,
    soft_sigma: float = DEFAULT_SOFT_SIGMA_PX,
) -> dict[str, tuple[SilhouetteMask, ...]]:
    """Ground-truth silhouettes per view per frame.

    ``hard=True`` thresholds the soft capsule render at 0.5; otherwise the
    raw soft occupancy grid is kept.
    """
    out: dict[str, tuple[SilhouetteMask, ...]] = {}
    for view in rig.views:
        masks = []
        for frame in range(scene.frame_count):
            positions = scene.joints_per_frame[frame].positions()
            grid = render_positions(positions, scene.model, view, soft_sigma)
            if hard:
                grid = hard_mask(grid)
            masks.append(SilhouetteMask(view_id=view.id, grid=grid, frame=frame))
        out[view.id] = tuple(masks)
    return out
