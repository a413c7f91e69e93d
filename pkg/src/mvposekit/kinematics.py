"""Capsule-skeleton kinematics: parameters, forward pass, and Jacobians.

The articulated model is a joint tree where every bone (parent->child edge)
carries a rest offset, a log-scale shape coefficient, and a capsule radius
used by the silhouette stage. A parameter vector consists of a root
transform (axis-angle rotation + translation in mm), per-bone log-scales
``beta``, and per-joint axis-angle rotations ``theta``.

Joint positions follow the recursion

    pos(j) = pos(parent) + cum_rot(parent) @ (exp(beta_bone) * rest_offset_j)
    cum_rot(j) = cum_rot(parent) @ R(theta_j)

with ``cum_rot(root) = R(root_rotation) @ R(theta_root)`` and
``pos(root) = root_translation``. The analytic position Jacobian with
respect to every parameter is assembled from closed-form derivatives of the
axis-angle map; the flat parameter packing is
``[root_rotation, root_translation, beta, theta]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .topology import SkeletonTopology, default_topology

# Below this rotation angle (radians) the axis-angle maps switch to their
# zero-angle limits to avoid catastrophic cancellation.
SMALL_ANGLE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _skew_many(v: np.ndarray) -> np.ndarray:
    """Cross-product matrices of (N, 3) vectors, shape (N, 3, 3)."""
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


# Below this angle the sin/cos quotients switch to their Taylor series,
# whose truncation error (~angle^4 / 120) is below double precision there.
_SERIES_ANGLE = 1e-4


def axis_angle_to_matrices(vectors: np.ndarray) -> np.ndarray:
    """Rodrigues map for a batch of axis-angle vectors; (N, 3) -> (N, 3, 3).

    Uses ``R = I + a K + b K^2`` with ``K = [v]x``, ``a = sin(t)/t`` and
    ``b = (1 - cos(t))/t^2``, which is smooth through the origin.
    """
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
    angle_sq = np.einsum("nk,nk->n", v, v)
    angle = np.sqrt(angle_sq)
    safe = np.where(angle > 0.0, angle, 1.0)
    safe_sq = np.where(angle_sq > 0.0, angle_sq, 1.0)
    small = angle < _SERIES_ANGLE
    a = np.where(small, 1.0 - angle_sq / 6.0, np.sin(angle) / safe)
    b = np.where(small, 0.5 - angle_sq / 24.0, (1.0 - np.cos(angle)) / safe_sq)
    k = _skew_many(v)
    return np.eye(3) + a[:, None, None] * k + b[:, None, None] * (k @ k)


def axis_angle_to_matrix(v: np.ndarray) -> np.ndarray:
    """Rodrigues map from an axis-angle 3-vector to a rotation matrix."""
    return axis_angle_to_matrices(np.asarray(v, dtype=np.float64).reshape(1, 3))[0]


def _cross_many(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product of (N, 3) arrays without np.cross overhead."""
    out = np.empty_like(a)
    out[:, 0] = a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]
    out[:, 1] = a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]
    out[:, 2] = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    return out


def axis_angle_derivatives_many(
    vectors: np.ndarray, rotations: np.ndarray | None = None
) -> np.ndarray:
    """Partial derivatives of the Rodrigues map for a batch.

    Returns shape (N, 3, 3, 3) where entry [n, i] is dR/dv_i for vector n,
    using the closed form
    ``dR/dv_i = ((v_i [v]x + [v x ((I - R) e_i)]x) / |v|^2) R`` away from
    the origin and the limit ``[e_i]x`` at it.
    """
    v = np.asarray(vectors, dtype=np.float64).reshape(-1, 3)
    count = v.shape[0]
    rot = axis_angle_to_matrices(v) if rotations is None else rotations
    angle_sq = np.einsum("nk,nk->n", v, v)
    small = angle_sq < SMALL_ANGLE**2
    safe_sq = np.where(small, 1.0, angle_sq)
    vx = _skew_many(v)
    eye_minus_rot = np.eye(3) - rot  # (N, 3, 3)
    out = np.empty((count, 3, 3, 3))
    for i in range(3):
        column = eye_minus_rot[:, :, i]  # (I - R) e_i per vector
        term = v[:, i, None, None] * vx + _skew_many(_cross_many(v, column))
        out[:, i] = (term / safe_sq[:, None, None]) @ rot
    if small.any():
        basis = np.eye(3)
        limits = np.stack([skew(basis[i]) for i in range(3)])
        out[small] = limits
    return out


def axis_angle_derivatives(v: np.ndarray) -> np.ndarray:
    """Partial derivatives dR/dv_i of the Rodrigues map, shape (3, 3, 3)."""
    return axis_angle_derivatives_many(np.asarray(v, dtype=np.float64).reshape(1, 3))[0]


def canonicalize_axis_angle(v: np.ndarray) -> np.ndarray:
    """Wrap an axis-angle vector to magnitude <= pi (same rotation)."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    angle = float(np.linalg.norm(v))
    if angle <= np.pi:
        return v.copy()
    wrapped = np.remainder(angle + np.pi, 2.0 * np.pi) - np.pi
    return v * (wrapped / angle)


@dataclass(frozen=True)
class KinematicParams:
    """Shape, pose, and root transform of a capsule skeleton.

    Attributes:
        beta: Per-bone log length scales, shape (B,).
        theta: Per-joint axis-angle rotations, shape (J, 3), radians.
        root_rotation: Global axis-angle rotation, shape (3,).
        root_translation: Global translation, shape (3,), mm.
    """

    beta: np.ndarray
    theta: np.ndarray
    root_rotation: np.ndarray
    root_translation: np.ndarray

    def __post_init__(self) -> None:
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        theta = np.array(self.theta, dtype=np.float64).reshape(-1, 3)
        rot = np.array(self.root_rotation, dtype=np.float64).reshape(3)
        trans = np.array(self.root_translation, dtype=np.float64).reshape(3)
        for arr in (beta, theta, rot, trans):
            if not np.all(np.isfinite(arr)):
                raise ValueError("kinematic parameters must be finite")
            arr.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "root_rotation", rot)
        object.__setattr__(self, "root_translation", trans)

    @property
    def joint_count(self) -> int:
        return self.theta.shape[0]

    @property
    def bone_count(self) -> int:
        return self.beta.shape[0]

    def canonicalized(self) -> "KinematicParams":
        """Wrap every axis-angle block to magnitude <= pi."""
        root_ok = float(np.linalg.norm(self.root_rotation)) <= np.pi
        norms = np.linalg.norm(self.theta, axis=1)
        if root_ok and np.all(norms <= np.pi):
            return self
        theta = self.theta.copy()
        for j in np.nonzero(norms > np.pi)[0]:
            theta[j] = canonicalize_axis_angle(theta[j])
        return KinematicParams(
            beta=self.beta,
            theta=theta,
            root_rotation=canonicalize_axis_angle(self.root_rotation),
            root_translation=self.root_translation,
        )

    def as_vector(self) -> np.ndarray:
        """Flat packing ``[root_rotation, root_translation, beta, theta]``."""
        return np.concatenate(
            [self.root_rotation, self.root_translation, self.beta, self.theta.ravel()]
        )

    @staticmethod
    def from_vector(vector: np.ndarray, bone_count: int, joint_count: int) -> "KinematicParams":
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        expected = 6 + bone_count + 3 * joint_count
        if vector.size != expected:
            raise DimensionMismatch(f"parameter vector has {vector.size} entries, expected {expected}")
        return KinematicParams(
            beta=vector[6 : 6 + bone_count],
            theta=vector[6 + bone_count :].reshape(joint_count, 3),
            root_rotation=vector[0:3],
            root_translation=vector[3:6],
        )

    @staticmethod
    def zeros(bone_count: int, joint_count: int) -> "KinematicParams":
        return KinematicParams(
            beta=np.zeros(bone_count),
            theta=np.zeros((joint_count, 3)),
            root_rotation=np.zeros(3),
            root_translation=np.zeros(3),
        )


@dataclass(frozen=True)
class CapsuleModel:
    """A skeleton whose bones carry capsules for silhouette rendering.

    Attributes:
        topology: Joint tree the model articulates.
        rest_offsets: (J, 3) rest-pose bone vectors in mm (root rows zero).
        capsule_radii: (B,) capsule radius per bone in mm, ordered by the
            bone's child joint index ascending.
    """

    topology: SkeletonTopology
    rest_offsets: np.ndarray
    capsule_radii: np.ndarray

    def __post_init__(self) -> None:
        offsets = np.array(self.rest_offsets, dtype=np.float64).reshape(-1, 3)
        radii = np.array(self.capsule_radii, dtype=np.float64).reshape(-1)
        if offsets.shape[0] != len(self.topology):
            raise DimensionMismatch(
                f"{offsets.shape[0]} rest offsets for {len(self.topology)} joints"
            )
        bones = self.bone_children_of(self.topology)
        if radii.shape[0] != len(bones):
            raise DimensionMismatch(f"{radii.shape[0]} radii for {len(bones)} bones")
        if np.any(radii <= 0):
            raise ValueError("capsule radii must be positive")
        for child in bones:
            if np.linalg.norm(offsets[child]) == 0.0:
                raise ValueError(
                    f"rest offset of non-root joint {self.topology.joints[child].name!r} is zero"
                )
        offsets.flags.writeable = False
        radii.flags.writeable = False
        object.__setattr__(self, "rest_offsets", offsets)
        object.__setattr__(self, "capsule_radii", radii)

    @staticmethod
    def bone_children_of(topology: SkeletonTopology) -> tuple[int, ...]:
        """Child joint index of every bone, ascending."""
        return tuple(i for i, j in enumerate(topology.joints) if j.parent is not None)

    @property
    def bone_children(self) -> tuple[int, ...]:
        return self.bone_children_of(self.topology)

    @property
    def bone_count(self) -> int:
        return len(self.bone_children)

    @property
    def joint_count(self) -> int:
        return len(self.topology)

    def zero_params(self) -> KinematicParams:
        return KinematicParams.zeros(self.bone_count, self.joint_count)


def _check_dimensions(model: CapsuleModel, params: KinematicParams) -> None:
    if params.joint_count != model.joint_count or params.bone_count != model.bone_count:
        raise DimensionMismatch(
            f"params ({params.bone_count} bones, {params.joint_count} joints) do not "
            f"match model ({model.bone_count} bones, {model.joint_count} joints)"
        )


def forward_kinematics(model: CapsuleModel, params: KinematicParams) -> np.ndarray:
    """Joint positions (J, 3) in mm for the given parameters."""
    positions, _, _ = _fk_state(model, params)
    return positions


def _fk_state(
    model: CapsuleModel, params: KinematicParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions (J, 3), cumulative rotations (J, 3, 3), local rotations."""
    _check_dimensions(model, params)
    topology = model.topology
    count = len(topology)
    root_rot = axis_angle_to_matrix(params.root_rotation)
    local_rots = axis_angle_to_matrices(params.theta)
    bone_index = _bone_index_map(model)
    scales = np.ones(count)
    for child in model.bone_children:
        scales[child] = np.exp(params.beta[bone_index[child]])
    positions = np.empty((count, 3))
    cumulative = np.empty((count, 3, 3))
    for j, spec in enumerate(topology.joints):
        if spec.parent is None:
            positions[j] = params.root_translation
            cumulative[j] = root_rot @ local_rots[j]
        else:
            positions[j] = positions[spec.parent] + cumulative[spec.parent] @ (
                scales[j] * model.rest_offsets[j]
            )
            cumulative[j] = cumulative[spec.parent] @ local_rots[j]
    return positions, cumulative, local_rots


def _bone_index_map(model: CapsuleModel) -> np.ndarray:
    mapping = np.full(model.joint_count, -1, dtype=int)
    for b, child in enumerate(model.bone_children):
        mapping[child] = b
    return mapping


def fk_with_jacobian(
    model: CapsuleModel, params: KinematicParams
) -> tuple[np.ndarray, np.ndarray]:
    """Forward kinematics plus the full position Jacobian.

    Returns:
        positions: (J, 3) joint positions in mm.
        jacobian: (3J, P) with P = 6 + B + 3J, columns ordered as
            ``[root_rotation, root_translation, beta, theta]``; row 3j + c
            is d positions[j, c] / d parameter.
    """
    topology = model.topology
    count = len(topology)
    positions, cumulative, local_rots = _fk_state(model, params)
    descendants = topology.descendants()
    bone_index = _bone_index_map(model)
    param_count = 6 + model.bone_count + 3 * count
    jac = np.zeros((count, 3, param_count))

    # Root translation shifts everything.
    jac[:, :, 3:6] = np.eye(3)

    # Root rotation: d pos / d rho_i = dR_i(rho) R(rho)^T (pos - t).
    root_rot = axis_angle_to_matrix(params.root_rotation)
    root_derivs = axis_angle_derivatives(params.root_rotation)
    lever = positions - params.root_translation
    for i in range(3):
        jac[:, :, i] = lever @ (root_derivs[i] @ root_rot.T).T

    # Bone scales: the derivative is the bone's world vector, inherited by
    # the child and every joint below it.
    for child in model.bone_children:
        bone_vec = positions[child] - positions[topology.joints[child].parent]
        column = 6 + bone_index[child]
        jac[child, :, column] = bone_vec
        for j in descendants[child]:
            jac[j, :, column] = bone_vec

    # Joint rotations act on strict descendants through the cumulative frame.
    theta_base = 6 + model.bone_count
    theta_derivs = axis_angle_derivatives_many(params.theta, local_rots)
    for k, spec in enumerate(topology.joints):
        below = list(descendants[k])
        if not below:
            continue
        prefix = root_rot if spec.parent is None else cumulative[spec.parent]
        offsets = positions[below] - positions[k]
        # (3, 3, 3): per axis, prefix @ dR_i @ cumulative[k]^T.
        mats = prefix @ theta_derivs[k] @ cumulative[k].T
        jac[below, :, theta_base + 3 * k : theta_base + 3 * k + 3] = np.einsum(
            "ink,dk->dni", mats, offsets
        )
    return positions, jac.reshape(3 * count, param_count)


# ---------------------------------------------------------------------------
# Default model
# ---------------------------------------------------------------------------

# Rest offsets (mm, from parent) and capsule radii (mm) for the stock
# topology. The person stands along +Z facing +X with the left side at +Y.
_BODY_OFFSETS: dict[str, tuple[tuple[float, float, float], float]] = {
    "right_hip": ((0.0, -180.0, 0.0), 70.0),
    "left_shoulder": ((0.0, 10.0, 470.0), 75.0),
    "right_shoulder": ((0.0, -10.0, 470.0), 75.0),
    "nose": ((70.0, -100.0, 130.0), 55.0),
    "left_eye": ((10.0, 30.0, 30.0), 30.0),
    "right_eye": ((10.0, -30.0, 30.0), 30.0),
    "left_ear": ((-50.0, 30.0, -10.0), 25.0),
    "right_ear": ((-50.0, -30.0, -10.0), 25.0),
    "left_elbow": ((0.0, 260.0, 0.0), 42.0),
    "right_elbow": ((0.0, -260.0, 0.0), 42.0),
    "left_wrist": ((0.0, 250.0, 0.0), 34.0),
    "right_wrist": ((0.0, -250.0, 0.0), 34.0),
    # Hand wrists share the body wrists' offsets from the elbows so both
    # copies of each wrist coincide in the rest shape.
    "left_hand_wrist": ((0.0, 250.0, 0.0), 30.0),
    "right_hand_wrist": ((0.0, -250.0, 0.0), 30.0),
}

_FINGER_OFFSETS: dict[str, tuple[tuple[float, float, float], ...]] = {
    "thumb": ((25.0, 25.0, 0.0), (10.0, 20.0, 0.0), (8.0, 15.0, 0.0), (6.0, 12.0, 0.0)),
    "index": ((20.0, 70.0, 0.0), (0.0, 35.0, 0.0), (0.0, 25.0, 0.0), (0.0, 20.0, 0.0)),
    "middle": ((7.0, 75.0, 0.0), (0.0, 40.0, 0.0), (0.0, 28.0, 0.0), (0.0, 22.0, 0.0)),
    "ring": ((-7.0, 70.0, 0.0), (0.0, 35.0, 0.0), (0.0, 25.0, 0.0), (0.0, 20.0, 0.0)),
    "pinky": ((-20.0, 60.0, 0.0), (0.0, 28.0, 0.0), (0.0, 20.0, 0.0), (0.0, 16.0, 0.0)),
}

_FINGER_RADII: dict[str, tuple[float, float, float, float]] = {
    "thumb": (11.0, 10.0, 9.0, 8.0),
    "index": (10.0, 9.0, 8.0, 7.0),
    "middle": (10.0, 9.0, 8.0, 7.0),
    "ring": (9.0, 8.0, 8.0, 7.0),
    "pinky": (8.0, 7.0, 7.0, 6.0),
}


def default_capsule_model(topology: SkeletonTopology | None = None) -> CapsuleModel:
    """The stock upper-body capsule model matching ``default_topology``."""
    topology = topology if topology is not None else default_topology()
    offsets = np.zeros((len(topology), 3))
    radii_by_joint: dict[int, float] = {}
    for index, spec in enumerate(topology.joints):
        if spec.parent is None:
            continue
        if spec.name in _BODY_OFFSETS:
            offset, radius = _BODY_OFFSETS[spec.name]
        else:
            side, rest = spec.name.split("_", 1)
            finger, segment = rest[:-1], int(rest[-1])
            offset = np.array(_FINGER_OFFSETS[finger][segment - 1], dtype=np.float64)
            if side == "right":
                offset = offset * np.array([1.0, -1.0, 1.0])
            radius = _FINGER_RADII[finger][segment - 1]
        offsets[index] = offset
        radii_by_joint[index] = radius
    bones = CapsuleModel.bone_children_of(topology)
    radii = np.array([radii_by_joint[child] for child in bones])
    return CapsuleModel(topology=topology, rest_offsets=offsets, capsule_radii=radii)
