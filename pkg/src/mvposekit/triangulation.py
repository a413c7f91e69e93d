"""Confidence-weighted linear triangulation and body/hand merging.

Each view contributes two homogeneous constraint rows built from its 3x4
projection P and the 2D detection (x, y):

    x * P[2] - P[0]
    y * P[2] - P[1]

The per-view gated confidence multiplies both of that view's rows, and the
3D point is the right singular vector of the stacked weighted system for
the smallest singular value. Views with zero weight are dropped before
stacking, which is mathematically identical to keeping them as null rows.
"""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import numpy as np

from .confidence import Detection2D, FrameDetections
from .errors import FrameMismatch, TopologyMismatch
from .geometry import CameraView, Rig, project_point
from .topology import (
    Joint3D,
    SkeletonSet3D,
    SkeletonTopology,
    WRIST_OVERRIDES,
)

logger = logging.getLogger(__name__)

# Minimum number of contributing views for a joint to count as valid.
MIN_SUPPORT = 2

# Relative gap between the two smallest singular values below which the
# solution direction is ambiguous (e.g. all rays parallel).
DEGENERACY_GAP_REL = 1e-12


def build_dlt_rows(view: CameraView, det: Detection2D) -> np.ndarray:
    """The view's 2x4 homogeneous constraint block for one detection."""
    p = view.projection
    return np.stack([det.x * p[2] - p[0], det.y * p[2] - p[1]])


def triangulate_joint(
    views: Sequence[CameraView],
    dets: Sequence[Detection2D | None],
    weights: Sequence[float],
) -> Joint3D:
    """Solve one joint's weighted homogeneous system.

    Args:
        views: Cameras, one per observation slot.
        dets: Per-view detections; None marks a missing observation.
        weights: Gated confidences; a view contributes only if its weight is
            strictly positive and its detection is present.

    Returns:
        A valid Joint3D when at least ``MIN_SUPPORT`` views contribute and
        the solve is well conditioned; otherwise an invalid joint (the
        ``degenerate`` flag marks ambiguous solves, which never raise).
    """
    if not len(views) == len(dets) == len(weights):
        raise TopologyMismatch(
            f"views/dets/weights lengths differ: {len(views)}/{len(dets)}/{len(weights)}"
        )
    contributing = [
        (view, det, float(w))
        for view, det, w in zip(views, dets, weights)
        if det is not None and w > 0.0
    ]
    support = len(contributing)
    if support < MIN_SUPPORT:
        return Joint3D.invalid_joint(support=support)

    rows = np.concatenate(
        [w * build_dlt_rows(view, det) for view, det, w in contributing]
    )
    _, singulars, vt = np.linalg.svd(rows)
    if singulars[0] <= 0.0 or singulars[-2] - singulars[-1] <= DEGENERACY_GAP_REL * singulars[0]:
        return Joint3D.invalid_joint(support=support, degenerate=True)
    homogeneous = vt[-1]
    if abs(homogeneous[3]) <= 1e-12 * np.linalg.norm(homogeneous[:3]):
        return Joint3D.invalid_joint(support=support, degenerate=True)
    position = homogeneous[:3] / homogeneous[3]
    if not np.all(np.isfinite(position)):
        return Joint3D.invalid_joint(support=support, degenerate=True)

    weighted_error = 0.0
    weight_total = 0.0
    for view, det, w in contributing:
        reproj = project_point(view, position)
        weighted_error += w * float(np.hypot(reproj[0] - det.x, reproj[1] - det.y))
        weight_total += w
    return Joint3D(
        position=position,
        valid=True,
        support=support,
        residual=weighted_error / weight_total,
    )


def triangulate_frame(
    rig: Rig,
    frame_dets: Mapping[str, FrameDetections],
    topology: SkeletonTopology,
) -> SkeletonSet3D:
    """Triangulate every joint of one frame from per-view detections.

    Per-joint failures yield invalid joints; the frame itself never aborts.

    Raises:
        TopologyMismatch: If a view's joint count disagrees with the topology.
        KeyError: If ``frame_dets`` references a view missing from the rig.
        FrameMismatch: If the per-view records disagree on the frame index.
    """
    joint_count = len(topology)
    view_ids = [vid for vid in rig.view_ids if vid in frame_dets]
    views = [rig.view_by_id(vid) for vid in view_ids]
    records = [frame_dets[vid] for vid in view_ids]
    for record in records:
        if len(record.joints) != joint_count:
            raise TopologyMismatch(
                f"view {record.view_id!r}: {len(record.joints)} joints, "
                f"topology has {joint_count}"
            )
    frames = {record.frame for record in records}
    if len(frames) > 1:
        raise FrameMismatch(f"views disagree on frame index: {sorted(frames)}")
    frame = frames.pop() if frames else 0

    joints: list[Joint3D] = []
    for joint_index in range(joint_count):
        dets = [record.joints[joint_index] for record in records]
        weights = [det.confidence if det is not None else 0.0 for det in dets]
        joints.append(triangulate_joint(views, dets, weights))
    return SkeletonSet3D(topology=topology, frame=frame, joints=tuple(joints))


def merge_keypoints(body: SkeletonSet3D, hands: SkeletonSet3D) -> SkeletonSet3D:
    """Fuse body-triangulated and hand-sourced joints into one skeleton.

    Both inputs span the full unified topology; the body set carries the
    body partition, the hands set the hand partitions. Hand data is the
    precise source, so where both sets provide a wrist (a hand part's root
    and the corresponding body wrist joint) the hand value wins.

    Raises:
        FrameMismatch: If the two sets are from different frames.
        TopologyMismatch: If the sets use different topologies.
    """
    if body.frame != hands.frame:
        raise FrameMismatch(f"body frame {body.frame} != hands frame {hands.frame}")
    if body.topology != hands.topology:
        raise TopologyMismatch("body and hands sets use different topologies")
    topology = body.topology

    joints = [
        hands.joints[i] if spec.part != "body" else body.joints[i]
        for i, spec in enumerate(topology.joints)
    ]
    for part, wrist_name in WRIST_OVERRIDES.items():
        part_indices = topology.part_indices(part)
        if not part_indices:
            continue
        root = topology.part_root(part)
        try:
            wrist = topology.index_of(wrist_name)
        except KeyError:
            continue
        if hands.joints[root].valid:
            joints[wrist] = hands.joints[root]
    return SkeletonSet3D(topology=topology, frame=body.frame, joints=tuple(joints))
