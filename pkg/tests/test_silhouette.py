"""Tests for soft capsule rendering and the silhouette loss."""

from __future__ import annotations

import numpy as np
import pytest

from mvposekit.errors import DegenerateDepth, DimensionMismatch
from mvposekit.geometry import CameraView
from mvposekit.kinematics import CapsuleModel, KinematicParams, forward_kinematics
from mvposekit.silhouette import (
    SilhouetteMask,
    hard_mask,
    mask_iou,
    mask_loss,
    mask_loss_with_gradient,
    render_positions,
    render_soft_silhouette,
)
from mvposekit.topology import JointSpec, SkeletonTopology

from conftest import make_chain_model


def single_capsule_model(radius: float = 40.0, length: float = 200.0) -> CapsuleModel:
    topology = SkeletonTopology(
        joints=(JointSpec("a", None, "body"), JointSpec("b", 0, "body"))
    )
    return CapsuleModel(
        topology=topology,
        rest_offsets=np.array([[0.0, 0.0, 0.0], [length, 0.0, 0.0]]),
        capsule_radii=np.array([radius]),
    )


def frontal_view(size: int = 48, focal: float = 50.0, depth: float = 1000.0) -> CameraView:
    return CameraView(
        id="front",
        intrinsics=np.array([[focal, 0.0, size / 2], [0.0, focal, size / 2], [0.0, 0.0, 1.0]]),
        rotation=np.eye(3),
        translation=np.array([0.0, 0.0, depth]),
        width=size,
        height=size,
    )


def centered_params(model: CapsuleModel, length: float = 200.0) -> KinematicParams:
    params = model.zero_params()
    return KinematicParams(
        beta=params.beta,
        theta=params.theta,
        root_rotation=params.root_rotation,
        root_translation=np.array([-length / 2.0, 0.0, 0.0]),
    )


class TestRenderSoftSilhouette:
    def test_saturates_inside_capsule(self):
        """A pixel with d far below -sigma approaches occupancy 1."""
        model = single_capsule_model(radius=100.0)  # projects to 5 px
        view = frontal_view()
        grid = render_soft_silhouette(model, centered_params(model), view, soft_sigma=0.5)
        center = grid[view.height // 2, view.width // 2]
        assert center > 0.99

    def test_decays_far_outside(self):
        model = single_capsule_model()
        view = frontal_view()
        grid = render_soft_silhouette(model, centered_params(model), view, soft_sigma=1.0)
        assert grid[0, 0] < 0.01
        assert grid[-1, -1] < 0.01

    def test_values_in_unit_interval(self):
        model = make_chain_model(joint_count=6, seed=1)
        view = frontal_view(depth=1200.0)
        grid = render_soft_silhouette(model, model.zero_params(), view, soft_sigma=2.0)
        assert grid.min() >= 0.0 and grid.max() <= 1.0

    def test_behind_camera_raises(self):
        model = single_capsule_model()
        view = frontal_view(depth=-100.0)
        with pytest.raises(DegenerateDepth):
            render_soft_silhouette(model, centered_params(model), view, soft_sigma=1.0)

    def test_wider_capsule_covers_more(self):
        view = frontal_view()
        areas = []
        for radius in (10.0, 20.0, 40.0):
            model = single_capsule_model(radius=radius)
            grid = render_soft_silhouette(model, centered_params(model), view, 1.0)
            areas.append(hard_mask(grid).sum())
        assert areas[0] < areas[1] < areas[2]


class TestMaskLoss:
    def test_zero_when_rendered_equals_observed(self):
        model = single_capsule_model()
        view = frontal_view()
        grid = render_soft_silhouette(model, centered_params(model), view, 1.0)
        observed = SilhouetteMask(view_id="front", grid=grid, frame=0)
        assert mask_loss([grid], [observed]) == 0.0

    def test_all_zero_vs_all_one_is_one(self):
        zeros = np.zeros((8, 8))
        ones = SilhouetteMask(view_id="v", grid=np.ones((8, 8)), frame=0)
        assert mask_loss([zeros], [ones]) == 1.0

    def test_dimension_mismatch_raises(self):
        with pytest.raises(DimensionMismatch):
            mask_loss([np.zeros((4, 4))], [SilhouetteMask("v", np.zeros((5, 5)), 0)])
        with pytest.raises(DimensionMismatch):
            mask_loss([], [])

    def test_translating_toward_silhouette_decreases_loss(self):
        """Sampled along the approach segment, the loss strictly drops."""
        model = single_capsule_model()
        view = frontal_view()
        reference = render_soft_silhouette(model, centered_params(model), view, 2.0)
        observed = [SilhouetteMask(view_id="front", grid=hard_mask(reference), frame=0)]
        params = centered_params(model)
        start_offset = np.array([0.0, 120.0, 0.0])
        losses = []
        for step in np.linspace(0.0, 1.0, 10):
            moved = KinematicParams(
                beta=params.beta,
                theta=params.theta,
                root_rotation=params.root_rotation,
                root_translation=params.root_translation + (1.0 - step) * start_offset,
            )
            rendered = render_soft_silhouette(model, moved, view, 2.0)
            losses.append(mask_loss([rendered], observed))
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestMaskGradient:
    def test_gradient_matches_finite_differences(self):
        model = make_chain_model(joint_count=5, seed=3)
        view = frontal_view(size=32, depth=1100.0)
        rng = np.random.default_rng(0)
        positions = forward_kinematics(model, model.zero_params()) + rng.uniform(-30, 30, (5, 3))
        observed = [SilhouetteMask("front", rng.uniform(0, 1, (32, 32)), 0)]
        loss, grad = mask_loss_with_gradient(positions, model, [view], observed, 2.0)
        h = 1e-5
        for j in range(5):
            for c in range(3):
                plus, minus = positions.copy(), positions.copy()
                plus[j, c] += h
                minus[j, c] -= h
                fd = (
                    mask_loss([render_positions(plus, model, view, 2.0)], observed)
                    - mask_loss([render_positions(minus, model, view, 2.0)], observed)
                ) / (2 * h)
                assert abs(grad[j, c] - fd) <= 1e-4 * max(abs(fd), abs(grad[j, c]), 1e-9)

    def test_view_count_mismatch_raises(self):
        model = single_capsule_model()
        with pytest.raises(DimensionMismatch):
            mask_loss_with_gradient(
                np.zeros((2, 3)), model, [frontal_view()], [], 1.0
            )


class TestMaskIou:
    def test_identical_masks_score_one(self):
        grid = np.zeros((6, 6))
        grid[2:4, 2:4] = 1.0
        assert mask_iou(grid, grid) == 1.0

    def test_disjoint_masks_score_zero(self):
        a = np.zeros((6, 6))
        b = np.zeros((6, 6))
        a[0, 0] = 1.0
        b[5, 5] = 1.0
        assert mask_iou(a, b) == 0.0

    def test_both_empty_score_one(self):
        assert mask_iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0

    def test_half_overlap(self):
        a = np.zeros((2, 4))
        b = np.zeros((2, 4))
        a[:, :2] = 1.0
        b[:, 1:3] = 1.0
        assert mask_iou(a, b) == pytest.approx(1.0 / 3.0)


class TestSilhouetteMask:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            SilhouetteMask("v", np.full((3, 3), 1.5), 0)

    def test_rejects_wrong_rank(self):
        with pytest.raises(DimensionMismatch):
            SilhouetteMask("v", np.zeros((3, 3, 3)), 0)

    def test_grid_immutable(self):
        mask = SilhouetteMask("v", np.zeros((3, 3)), 0)
        with pytest.raises(ValueError):
            mask.grid[0, 0] = 1.0
