"""2D detection post-processing: median filtering and confidence gating.

Per-view detector outputs go through three steps before triangulation:

1. temporal median filtering of each joint track (coordinates only),
2. boundary modulation: confidence is scaled by
   ``min(x/m, (W-x)/m, y/m, (H-y)/m, 1)`` so detections within ``m`` pixels
   of a crop edge are linearly downweighted (clamped at zero outside the
   crop),
3. threshold-rescale gating: adjusted confidences below ``tau`` drop to
   zero and the rest are remapped affinely onto [0, 1].

All functions are pure; per-joint tracks and per-view sequences can be
processed in parallel without shared state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import TopologyMismatch
from .geometry import CameraView

DEFAULT_MARGIN_PX = 20.0
DEFAULT_TAU = 0.15
DEFAULT_MEDIAN_WINDOW = 5


@dataclass(frozen=True)
class Detection2D:
    """A single 2D joint detection in crop coordinates with confidence in [0, 1]."""

    x: float
    y: float
    confidence: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("detection coordinates must be finite")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class FrameDetections:
    """All joint detections of one view at one frame; None marks a missing joint."""

    view_id: str
    frame: int
    joints: tuple[Detection2D | None, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "joints", tuple(self.joints))


@dataclass(frozen=True)
class ConfidenceConfig:
    """Knobs for the three-step confidence pipeline."""

    margin: float = DEFAULT_MARGIN_PX
    tau: float = DEFAULT_TAU
    median_window: int = DEFAULT_MEDIAN_WINDOW

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {self.tau}")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError(f"median_window must be odd and >= 1, got {self.median_window}")


def median_filter_track(
    track: Sequence[Detection2D | None], window: int
) -> list[Detection2D | None]:
    """Median-filter one joint's track across frames.

    Coordinates are replaced by the per-coordinate median over the present
    detections inside the centered window; confidences pass through
    untouched and absent entries stay absent. Windows are truncated at the
    sequence boundaries (no padding).
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd and >= 1, got {window}")
    if window == 1:
        return list(track)
    half = window // 2
    out: list[Detection2D | None] = []
    for index, det in enumerate(track):
        if det is None:
            out.append(None)
            continue
        lo = max(0, index - half)
        hi = min(len(track), index + half + 1)
        xs = [d.x for d in track[lo:hi] if d is not None]
        ys = [d.y for d in track[lo:hi] if d is not None]
        out.append(
            Detection2D(
                x=float(np.median(xs)), y=float(np.median(ys)), confidence=det.confidence
            )
        )
    return out


def modulate_confidence(
    det: Detection2D, width: float, height: float, margin: float
) -> float:
    """Downweight a detection's confidence near the crop boundary.

    Returns ``min(x/m, (W-x)/m, y/m, (H-y)/m, 1) * w``, clamped below at
    zero for detections outside the crop (where a ratio goes negative).
    """
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    ratio = min(
        det.x / margin,
        (width - det.x) / margin,
        det.y / margin,
        (height - det.y) / margin,
        1.0,
    )
    return max(ratio, 0.0) * det.confidence


def threshold_rescale(w_prime: float, tau: float) -> float:
    """Gate an adjusted confidence: zero below ``tau``, affine to [0, 1] above."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    if w_prime < tau:
        return 0.0
    return (w_prime - tau) / (1.0 - tau)


def gate_confidence(
    det: Detection2D, view: CameraView, cfg: ConfidenceConfig
) -> float:
    """Boundary modulation followed by threshold-rescale for one detection."""
    return threshold_rescale(
        modulate_confidence(det, view.width, view.height, cfg.margin), cfg.tau
    )


def process_view_sequence(
    frames: Sequence[FrameDetections],
    view: CameraView,
    cfg: ConfidenceConfig,
    joint_count: int | None = None,
) -> list[FrameDetections]:
    """Run the full confidence pipeline over one view's frame sequence.

    Frames must be sorted by frame index and belong to a single view. Each
    joint's track is median-filtered, then every surviving detection's
    confidence is replaced by its gated value. Joint presence/absence is
    preserved exactly.

    Raises:
        TopologyMismatch: If any frame's joint count differs from
            ``joint_count`` (or from the first frame's count when omitted).
    """
    if not frames:
        return []
    expected = joint_count if joint_count is not None else len(frames[0].joints)
    for fd in frames:
        if len(fd.joints) != expected:
            raise TopologyMismatch(
                f"view {fd.view_id!r} frame {fd.frame}: {len(fd.joints)} joints, "
                f"expected {expected}"
            )

    filtered_tracks: list[list[Detection2D | None]] = []
    for joint_index in range(expected):
        track = [fd.joints[joint_index] for fd in frames]
        filtered_tracks.append(median_filter_track(track, cfg.median_window))

    out: list[FrameDetections] = []
    for frame_pos, fd in enumerate(frames):
        joints: list[Detection2D | None] = []
        for joint_index in range(expected):
            det = filtered_tracks[joint_index][frame_pos]
            if det is None:
                joints.append(None)
            else:
                joints.append(
                    Detection2D(x=det.x, y=det.y, confidence=gate_confidence(det, view, cfg))
                )
        out.append(FrameDetections(view_id=fd.view_id, frame=fd.frame, joints=tuple(joints)))
    return out
