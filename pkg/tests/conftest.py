"""Shared fixtures: small deterministic rigs, models, and scenes."""

from __future__ import annotations

import numpy as np
import pytest

from mvposekit.geometry import CameraView, Rig
from mvposekit.kinematics import CapsuleModel
from mvposekit.synth import SynthConfig, generate_rig
from mvposekit.topology import JointSpec, SkeletonTopology


def make_identity_view(view_id: str = "ident", width: int = 100, height: int = 100) -> CameraView:
    return CameraView(
        id=view_id,
        intrinsics=np.eye(3),
        rotation=np.eye(3),
        translation=np.zeros(3),
        width=width,
        height=height,
    )


def make_chain_model(joint_count: int = 5, seed: int = 0) -> CapsuleModel:
    """A small single-branch chain with randomized but fixed offsets."""
    rng = np.random.default_rng(seed)
    joints = [JointSpec("j0", None, "body")]
    for j in range(1, joint_count):
        joints.append(JointSpec(f"j{j}", j - 1, "body"))
    offsets = np.zeros((joint_count, 3))
    offsets[1:] = rng.uniform(30.0, 160.0, (joint_count - 1, 3)) * rng.choice(
        [-1.0, 1.0], (joint_count - 1, 3)
    )
    radii = rng.uniform(10.0, 40.0, joint_count - 1)
    return CapsuleModel(
        topology=SkeletonTopology(joints=tuple(joints)),
        rest_offsets=offsets,
        capsule_radii=radii,
    )


@pytest.fixture
def small_rig() -> Rig:
    return generate_rig(SynthConfig(view_count=4, rng_seed=11))


@pytest.fixture
def eight_view_rig() -> Rig:
    return generate_rig(SynthConfig(view_count=8, rng_seed=3))
