"""Skeleton topology and triangulated 3D joint containers.

A topology is an ordered, topologically sorted joint tree partitioned into
a body part and two hand parts. The default topology carries a 13-joint
upper body plus two 21-joint hands (55 joints total). The hand wrist joints
are distinct slots from the body wrists but are parented to the elbows with
the same rest offsets, so both copies of a wrist coincide in a rest-shaped
model; the merge stage exploits this to reconcile the two sources.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TopologyMismatch

PART_BODY = "body"
PART_LEFT_HAND = "left_hand"
PART_RIGHT_HAND = "right_hand"
PARTS = (PART_BODY, PART_LEFT_HAND, PART_RIGHT_HAND)

# Which body joint a hand part's root overrides during the merge.
WRIST_OVERRIDES = {PART_LEFT_HAND: "left_wrist", PART_RIGHT_HAND: "right_wrist"}


@dataclass(frozen=True)
class JointSpec:
    """One joint: display name, parent index (None for the root), part tag."""

    name: str
    parent: int | None
    part: str


@dataclass(frozen=True)
class SkeletonTopology:
    """Ordered joint tree shared by detections, triangulation, and fitting."""

    joints: tuple[JointSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "joints", tuple(self.joints))
        names: set[str] = set()
        roots = 0
        for index, joint in enumerate(self.joints):
            if joint.part not in PARTS:
                raise TopologyMismatch(f"unknown part {joint.part!r} at joint {index}")
            if joint.name in names:
                raise TopologyMismatch(f"duplicate joint name {joint.name!r}")
            names.add(joint.name)
            if joint.parent is None:
                roots += 1
            elif not 0 <= joint.parent < index:
                raise TopologyMismatch(
                    f"joint {index} ({joint.name!r}) has parent {joint.parent}; "
                    "parents must precede children"
                )
        if roots == 0:
            raise TopologyMismatch("topology has no root joint")

    def __len__(self) -> int:
        return len(self.joints)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(j.name for j in self.joints)

    @property
    def body_count(self) -> int:
        return sum(1 for j in self.joints if j.part == PART_BODY)

    @property
    def hand_count(self) -> int:
        return sum(1 for j in self.joints if j.part != PART_BODY)

    def index_of(self, name: str) -> int:
        for index, joint in enumerate(self.joints):
            if joint.name == name:
                return index
        raise KeyError(f"no joint named {name!r}")

    def part_indices(self, part: str) -> tuple[int, ...]:
        return tuple(i for i, j in enumerate(self.joints) if j.part == part)

    def part_root(self, part: str) -> int:
        """Lowest-index joint of the part; for hand parts this is the wrist."""
        indices = self.part_indices(part)
        if not indices:
            raise KeyError(f"topology has no {part!r} joints")
        return indices[0]

    def children(self) -> tuple[tuple[int, ...], ...]:
        """Child indices per joint (same order as ``joints``)."""
        kids: list[list[int]] = [[] for _ in self.joints]
        for index, joint in enumerate(self.joints):
            if joint.parent is not None:
                kids[joint.parent].append(index)
        return tuple(tuple(k) for k in kids)

    def descendants(self) -> tuple[tuple[int, ...], ...]:
        """Strict descendants per joint, ascending; used by kinematic Jacobians."""
        kids = self.children()
        result: list[list[int]] = [[] for _ in self.joints]
        # Joints are topologically sorted, so a reverse sweep sees every
        # child's descendant list fully built before its parent's.
        for index in range(len(self.joints) - 1, -1, -1):
            for child in kids[index]:
                result[index].append(child)
                result[index].extend(result[child])
        return tuple(tuple(sorted(d)) for d in result)


@dataclass(frozen=True)
class Joint3D:
    """One triangulated joint.

    ``valid`` requires support from at least two views and a finite position;
    invalid joints carry NaN positions and residuals. ``degenerate`` flags a
    numerically ambiguous solve (near-equal smallest singular values).
    """

    position: np.ndarray
    valid: bool
    support: int
    residual: float
    degenerate: bool = False

    def __post_init__(self) -> None:
        pos = np.array(self.position, dtype=np.float64).reshape(3)
        pos.flags.writeable = False
        object.__setattr__(self, "position", pos)

    @staticmethod
    def invalid_joint(support: int = 0, degenerate: bool = False) -> "Joint3D":
        return Joint3D(
            position=np.full(3, np.nan),
            valid=False,
            support=support,
            residual=float("nan"),
            degenerate=degenerate,
        )


@dataclass(frozen=True)
class SkeletonSet3D:
    """A full skeleton's 3D joints for one frame."""

    topology: SkeletonTopology
    frame: int
    joints: tuple[Joint3D, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "joints", tuple(self.joints))
        if len(self.joints) != len(self.topology):
            raise TopologyMismatch(
                f"frame {self.frame}: {len(self.joints)} joints for a "
                f"{len(self.topology)}-joint topology"
            )

    def positions(self) -> np.ndarray:
        """(J, 3) positions in mm; NaN rows for invalid joints."""
        return np.stack([j.position for j in self.joints])

    def valid_mask(self) -> np.ndarray:
        return np.array([j.valid for j in self.joints], dtype=bool)

    @staticmethod
    def from_positions(
        topology: SkeletonTopology,
        frame: int,
        positions: np.ndarray,
        valid: np.ndarray | None = None,
        support: int = 2,
    ) -> "SkeletonSet3D":
        """Build a set from raw positions, marking every finite row valid."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        if len(positions) != len(topology):
            raise TopologyMismatch(
                f"{len(positions)} positions for a {len(topology)}-joint topology"
            )
        if valid is None:
            valid = np.ones(len(positions), dtype=bool)
        joints: list[Joint3D] = []
        for row, flag in zip(positions, valid):
            if flag and np.all(np.isfinite(row)):
                joints.append(Joint3D(position=row, valid=True, support=support, residual=0.0))
            else:
                joints.append(Joint3D.invalid_joint())
        return SkeletonSet3D(topology=topology, frame=frame, joints=tuple(joints))


def _hand_joints(side: str, wrist_parent: int, start: int) -> list[JointSpec]:
    part = f"{side}_hand"
    joints = [JointSpec(f"{side}_hand_wrist", wrist_parent, part)]
    wrist = start
    for finger in ("thumb", "index", "middle", "ring", "pinky"):
        parent = wrist
        for segment in range(1, 5):
            joints.append(JointSpec(f"{side}_{finger}{segment}", parent, part))
            parent = start + len(joints) - 1
    return joints


def default_topology() -> SkeletonTopology:
    """The stock 55-joint upper-body-plus-hands topology.

    Thirteen body joints (nose, eyes, ears, shoulders, elbows, wrists, hips)
    followed by 21 joints per hand. Single global root at the left hip.
    """
    body = [
        JointSpec("left_hip", None, PART_BODY),  # 0
        JointSpec("right_hip", 0, PART_BODY),  # 1
        JointSpec("left_shoulder", 0, PART_BODY),  # 2
        JointSpec("right_shoulder", 1, PART_BODY),  # 3
        JointSpec("nose", 2, PART_BODY),  # 4
        JointSpec("left_eye", 4, PART_BODY),  # 5
        JointSpec("right_eye", 4, PART_BODY),  # 6
        JointSpec("left_ear", 5, PART_BODY),  # 7
        JointSpec("right_ear", 6, PART_BODY),  # 8
        JointSpec("left_elbow", 2, PART_BODY),  # 9
        JointSpec("right_elbow", 3, PART_BODY),  # 10
        JointSpec("left_wrist", 9, PART_BODY),  # 11
        JointSpec("right_wrist", 10, PART_BODY),  # 12
    ]
    joints = list(body)
    joints += _hand_joints("left", wrist_parent=9, start=13)
    joints += _hand_joints("right", wrist_parent=10, start=34)
    return SkeletonTopology(joints=tuple(joints))
