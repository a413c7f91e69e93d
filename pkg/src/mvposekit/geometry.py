"""Pinhole camera models and the multi-camera rig container.

All geometry is expressed in millimeters in a fixed world frame. A camera
maps a world point X to camera coordinates via ``R @ X + t`` and to pixels
via the intrinsic matrix; the derived 3x4 projection ``K @ [R | t]`` is the
quantity every downstream stage (triangulation, silhouette rendering)
consumes. Views and rigs are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDepth

# Tolerances for the structural invariants checked by validate_rig.
ROTATION_TOL = 1e-9
PROJECTION_TOL = 1e-9

# Depths smaller than this (mm) count as lying on the principal plane.
MIN_DEPTH_MM = 1e-9


def _frozen_array(values, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraView:
    """A single calibrated camera together with its crop geometry.

    Attributes:
        id: Unique view identifier within a rig.
        intrinsics: 3x3 intrinsic matrix in pixels.
        rotation: 3x3 world-to-camera rotation (orthonormal, det +1).
        translation: World-to-camera translation in millimeters.
        width: Crop width in pixels.
        height: Crop height in pixels.
        projection: Derived 3x4 matrix ``intrinsics @ [rotation | translation]``.
            Always recomputed from the calibration, never trusted from disk.
    """

    id: str
    intrinsics: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    projection: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        k = _frozen_array(self.intrinsics, (3, 3))
        r = _frozen_array(self.rotation, (3, 3))
        t = _frozen_array(self.translation, (3,))
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        proj = k @ np.hstack([r, t[:, None]])
        proj.flags.writeable = False
        object.__setattr__(self, "projection", proj)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates (mm)."""
        return -self.rotation.T @ self.translation

    def camera_coordinates(self, point3d: np.ndarray) -> np.ndarray:
        """Map a world point (mm) into this camera's frame."""
        return self.rotation @ np.asarray(point3d, dtype=np.float64) + self.translation


@dataclass(frozen=True)
class Rig:
    """An ordered collection of calibrated views sharing one world frame."""

    views: tuple[CameraView, ...]
    units: str = "mm"

    def __post_init__(self) -> None:
        object.__setattr__(self, "views", tuple(self.views))

    def __len__(self) -> int:
        return len(self.views)

    def view_by_id(self, view_id: str) -> CameraView:
        for view in self.views:
            if view.id == view_id:
                return view
        raise KeyError(f"no view with id {view_id!r}")

    @property
    def view_ids(self) -> tuple[str, ...]:
        return tuple(v.id for v in self.views)


def project_point(view: CameraView, point3d: np.ndarray) -> np.ndarray:
    """Project a world point (mm) to pixel coordinates in the given view.

    Args:
        view: Calibrated camera.
        point3d: World point, shape (3,), millimeters. Must lie in front of
            the camera.

    Returns:
        Pixel coordinates, shape (2,), float64.

    Raises:
        DegenerateDepth: If the point's depth magnitude is below
            ``MIN_DEPTH_MM``.
    """
    point3d = np.asarray(point3d, dtype=np.float64).reshape(3)
    homogeneous = view.projection @ np.append(point3d, 1.0)
    depth = homogeneous[2]
    if abs(depth) < MIN_DEPTH_MM:
        raise DegenerateDepth(
            f"view {view.id!r}: depth {depth:.3e} mm is below {MIN_DEPTH_MM} mm"
        )
    return homogeneous[:2] / depth


def project_points(view: CameraView, points3d: np.ndarray) -> np.ndarray:
    """Project an (N, 3) array of world points; returns (N, 2) pixels.

    Raises DegenerateDepth if any point has near-zero depth.
    """
    points3d = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    homogeneous = points3d @ view.projection[:, :3].T + view.projection[:, 3]
    depths = homogeneous[:, 2]
    if np.any(np.abs(depths) < MIN_DEPTH_MM):
        raise DegenerateDepth(f"view {view.id!r}: a point lies on the principal plane")
    return homogeneous[:, :2] / depths[:, None]


def validate_view(view: CameraView) -> list[str]:
    """Check one view's structural invariants; returns human-readable violations."""
    violations: list[str] = []
    r = view.rotation
    if not np.all(np.isfinite(view.intrinsics)) or not np.all(np.isfinite(r)):
        violations.append(f"view {view.id!r}: non-finite calibration entries")
        return violations
    orth_err = np.max(np.abs(r.T @ r - np.eye(3)))
    if orth_err > ROTATION_TOL:
        violations.append(
            f"view {view.id!r}: rotation not orthonormal (|R^T R - I| = {orth_err:.3e})"
        )
    elif np.linalg.det(r) < 0:
        violations.append(f"view {view.id!r}: rotation has determinant -1")
    proj_err = np.max(
        np.abs(view.projection - view.intrinsics @ np.hstack([r, view.translation[:, None]]))
    )
    if proj_err > PROJECTION_TOL:
        violations.append(
            f"view {view.id!r}: projection disagrees with K[R|t] by {proj_err:.3e}"
        )
    if view.width <= 0 or view.height <= 0:
        violations.append(f"view {view.id!r}: non-positive crop size")
    if view.intrinsics[0, 0] <= 0 or view.intrinsics[1, 1] <= 0:
        violations.append(f"view {view.id!r}: non-positive focal length")
    return violations


def validate_rig(rig: Rig) -> list[str]:
    """Check every rig invariant; returns [] iff the rig is well formed.

    Reports problems instead of raising so callers can surface all of them
    at once (the CLI ``validate`` subcommand prints this list verbatim).
    """
    violations: list[str] = []
    if len(rig.views) < 2:
        violations.append(f"rig needs >=2 views, has {len(rig.views)}")
    seen: set[str] = set()
    for view in rig.views:
        if view.id in seen:
            violations.append(f"duplicate view id {view.id!r}")
        seen.add(view.id)
        violations.extend(validate_view(view))
    return violations
