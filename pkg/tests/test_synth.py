"""Tests for the synthetic scene generator and its statistical soundness."""

from __future__ import annotations

import numpy as np
import pytest

from mvposekit.confidence import ConfidenceConfig, process_view_sequence
from mvposekit.errors import ConfigError
from mvposekit.geometry import project_point, validate_rig
from mvposekit.kinematics import default_capsule_model
from mvposekit.silhouette import mask_iou, render_positions, hard_mask
from mvposekit.synth import (
    MOTION_FREQ_RANGE,
    GroundTruthScene,
    SynthConfig,
    generate_motion,
    generate_rig,
    generate_scene,
    observe,
    render_gt_masks,
)
from mvposekit.triangulation import triangulate_frame, triangulate_joint
from mvposekit.confidence import Detection2D


class TestSynthConfig:
    def test_rejects_single_view(self):
        with pytest.raises(ConfigError):
            SynthConfig(view_count=1)

    def test_rejects_bad_rate_and_sigma(self):
        with pytest.raises(ConfigError):
            SynthConfig(outlier_rate=1.5)
        with pytest.raises(ConfigError):
            SynthConfig(noise_sigma_px=-1.0)


class TestGenerateRig:
    def test_deterministic_given_seed(self):
        a = generate_rig(SynthConfig(view_count=8, rng_seed=7))
        b = generate_rig(SynthConfig(view_count=8, rng_seed=7))
        for va, vb in zip(a.views, b.views):
            assert va.id == vb.id
            np.testing.assert_array_equal(va.intrinsics, vb.intrinsics)
            np.testing.assert_array_equal(va.rotation, vb.rotation)
            np.testing.assert_array_equal(va.translation, vb.translation)

    def test_different_seed_differs(self):
        a = generate_rig(SynthConfig(view_count=4, rng_seed=1))
        b = generate_rig(SynthConfig(view_count=4, rng_seed=2))
        assert not np.array_equal(a.views[0].rotation, b.views[0].rotation)

    def test_generated_rig_validates(self):
        for seed in range(5):
            rig = generate_rig(SynthConfig(view_count=6, rng_seed=seed))
            assert validate_rig(rig) == []

    def test_projection_triangulation_roundtrip(self):
        rig = generate_rig(SynthConfig(view_count=5, rng_seed=13))
        rng = np.random.default_rng(0)
        views = list(rig.views)
        for _ in range(20):
            point = rng.uniform(-400, 400, 3)
            dets = [Detection2D(*project_point(v, point), 1.0) for v in views]
            joint = triangulate_joint(views, dets, [1.0] * len(views))
            assert np.linalg.norm(joint.position - point) < 1e-6

    def test_cameras_look_at_origin(self):
        rig = generate_rig(SynthConfig(view_count=6, rng_seed=3))
        for view in rig.views:
            cam = view.camera_coordinates(np.zeros(3))
            assert cam[2] > 2000.0  # origin well in front
            assert abs(cam[0]) < 1e-9 and abs(cam[1]) < 1e-9


class TestGenerateMotion:
    def test_deterministic(self):
        model = default_capsule_model()
        cfg = SynthConfig(sequence_length=5, rng_seed=9)
        pa, ja = generate_motion(model, cfg)
        pb, jb = generate_motion(model, cfg)
        for a, b in zip(pa, pb):
            np.testing.assert_array_equal(a.theta, b.theta)
        for a, b in zip(ja, jb):
            np.testing.assert_array_equal(a.positions(), b.positions())

    def test_zero_amplitude_is_static(self):
        model = default_capsule_model()
        cfg = SynthConfig(sequence_length=6, rng_seed=10, motion_amplitude_rad=0.0)
        _, joints = generate_motion(model, cfg)
        first = joints[0].positions()
        for frame in joints[1:]:
            np.testing.assert_array_equal(frame.positions(), first)

    def test_angles_within_amplitude(self):
        model = default_capsule_model()
        amplitude = 0.5
        cfg = SynthConfig(sequence_length=20, rng_seed=11, motion_amplitude_rad=amplitude)
        params, _ = generate_motion(model, cfg)
        for p in params:
            assert np.max(np.abs(p.theta)) <= amplitude + 1e-12

    def test_displacement_bounded_by_angular_velocity_times_reach(self):
        """Per-frame joint displacement stays below the kinematic bound
        derived from the max per-axis angular step and subtree reach."""
        model = default_capsule_model()
        amplitude = 0.5
        length = 50
        cfg = SynthConfig(sequence_length=length, rng_seed=12, motion_amplitude_rad=amplitude)
        _, joints = generate_motion(model, cfg)
        # Max angular step per axis: amplitude * 2 pi f_max / T; a 3-axis
        # rotation changes by at most sqrt(3) of that.
        step = np.sqrt(3.0) * amplitude * 2.0 * np.pi * MOTION_FREQ_RANGE[1] / length
        total_reach = np.sum(np.linalg.norm(model.rest_offsets, axis=1))
        bound = step * len(model.topology.joints) * total_reach
        for previous, current in zip(joints, joints[1:]):
            displacement = np.linalg.norm(
                current.positions() - previous.positions(), axis=1
            ).max()
            assert displacement <= bound

    def test_ground_truth_consistent_with_fk(self):
        from mvposekit.kinematics import forward_kinematics

        model = default_capsule_model()
        cfg = SynthConfig(sequence_length=4, rng_seed=13)
        params, joints = generate_motion(model, cfg)
        for p, skeleton in zip(params, joints):
            np.testing.assert_allclose(
                skeleton.positions(), forward_kinematics(model, p), atol=1e-9
            )


class TestObserve:
    def test_deterministic(self):
        cfg = SynthConfig(view_count=4, sequence_length=3, rng_seed=14, outlier_rate=0.2)
        scene = generate_scene(cfg)
        a = observe(scene, cfg)
        b = observe(scene, cfg)
        for vid in a:
            for fa, fb in zip(a[vid], b[vid]):
                assert fa == fb

    def test_noiseless_detections_are_exact_projections(self):
        cfg = SynthConfig(view_count=4, sequence_length=2, rng_seed=15, noise_sigma_px=0.0)
        scene = generate_scene(cfg)
        dets = observe(scene, cfg)
        for view in scene.rig.views:
            for frame_index, fd in enumerate(dets[view.id]):
                gt = scene.joints_per_frame[frame_index].positions()
                for joint_index, det in enumerate(fd.joints):
                    expected = project_point(view, gt[joint_index])
                    assert det.x == pytest.approx(expected[0], abs=1e-12)
                    assert det.y == pytest.approx(expected[1], abs=1e-12)
                    assert 0.9 <= det.confidence <= 1.0

    def test_noise_std_within_five_percent(self):
        sigma = 2.0
        cfg = SynthConfig(view_count=2, sequence_length=60, rng_seed=16, noise_sigma_px=sigma)
        scene = generate_scene(cfg)
        dets = observe(scene, cfg)
        residuals = []
        for view in scene.rig.views:
            for frame_index, fd in enumerate(dets[view.id]):
                gt = scene.joints_per_frame[frame_index].positions()
                for joint_index, det in enumerate(fd.joints):
                    expected = project_point(view, gt[joint_index])
                    residuals.append(det.x - expected[0])
                    residuals.append(det.y - expected[1])
        residuals = np.asarray(residuals)
        assert residuals.size >= 10_000
        assert abs(residuals.std() - sigma) < 0.05 * sigma

    def test_outlier_count_within_binomial_bounds(self):
        rate = 0.05
        cfg = SynthConfig(
            view_count=2,
            sequence_length=40,
            rng_seed=17,
            noise_sigma_px=0.0,
            outlier_rate=rate,
            outlier_sigma_px=30.0,
        )
        scene = generate_scene(cfg)
        dets = observe(scene, cfg)
        outliers = 0
        trials = 0
        for view in scene.rig.views:
            for frame_index, fd in enumerate(dets[view.id]):
                gt = scene.joints_per_frame[frame_index].positions()
                for joint_index, det in enumerate(fd.joints):
                    expected = project_point(view, gt[joint_index])
                    trials += 1
                    if abs(det.x - expected[0]) > 1e-9 or abs(det.y - expected[1]) > 1e-9:
                        outliers += 1
        # 99% two-sided normal approximation of Binomial(trials, rate).
        mean = trials * rate
        spread = 2.58 * np.sqrt(trials * rate * (1 - rate))
        assert mean - spread <= outliers <= mean + spread

    def test_outlier_confidence_reduced(self):
        cfg = SynthConfig(
            view_count=2,
            sequence_length=20,
            rng_seed=18,
            noise_sigma_px=0.0,
            outlier_rate=0.3,
            outlier_sigma_px=40.0,
        )
        scene = generate_scene(cfg)
        dets = observe(scene, cfg)
        clean_conf = []
        outlier_conf = []
        for view in scene.rig.views:
            for frame_index, fd in enumerate(dets[view.id]):
                gt = scene.joints_per_frame[frame_index].positions()
                for joint_index, det in enumerate(fd.joints):
                    expected = project_point(view, gt[joint_index])
                    offset = np.hypot(det.x - expected[0], det.y - expected[1])
                    (outlier_conf if offset > 1e-9 else clean_conf).append(det.confidence)
        assert np.mean(outlier_conf) < np.mean(clean_conf)


class TestRenderGtMasks:
    def _small_scene(self, **kw):
        cfg = SynthConfig(view_count=2, sequence_length=1, rng_seed=19, image_size=64, **kw)
        return cfg, generate_scene(cfg)

    def test_ground_truth_model_matches_own_mask(self):
        cfg, scene = self._small_scene()
        masks = render_gt_masks(scene, scene.rig, hard=True)
        for view in scene.rig.views:
            rendered = render_positions(
                scene.joints_per_frame[0].positions(), scene.model, view, 2.0
            )
            assert mask_iou(hard_mask(rendered), masks[view.id][0].grid) == 1.0

    def test_translated_model_scores_below_one(self):
        cfg, scene = self._small_scene()
        masks = render_gt_masks(scene, scene.rig, hard=True)
        moved = scene.joints_per_frame[0].positions() + np.array([80.0, 0.0, 0.0])
        view = scene.rig.views[0]
        rendered = render_positions(moved, scene.model, view, 2.0)
        assert mask_iou(hard_mask(rendered), masks[view.id][0].grid) < 1.0

    def test_soft_masks_are_soft(self):
        cfg, scene = self._small_scene()
        soft = render_gt_masks(scene, scene.rig, hard=False)
        grid = soft[scene.rig.views[0].id][0].grid
        assert np.any((grid > 0.05) & (grid < 0.95))

    def test_mask_area_shrinks_with_radii(self):
        cfg, scene = self._small_scene()
        view = scene.rig.views[0]
        positions = scene.joints_per_frame[0].positions()
        areas = []
        for scale in (1.0, 0.7, 0.4):
            from mvposekit.kinematics import CapsuleModel

            slim = CapsuleModel(
                topology=scene.model.topology,
                rest_offsets=scene.model.rest_offsets,
                capsule_radii=scale * scene.model.capsule_radii,
            )
            areas.append(hard_mask(render_positions(positions, slim, view, 2.0)).sum())
        assert areas[0] > areas[1] > areas[2]


class TestEndToEndNoiseless:
    def test_observe_confidence_triangulate_recovers_ground_truth(self):
        """sigma = 0 detections, gated and filtered at identity window,
        reproduce the ground-truth joints to < 1e-6 mm."""
        cfg = SynthConfig(view_count=8, sequence_length=4, rng_seed=20, noise_sigma_px=0.0)
        scene = generate_scene(cfg)
        dets = observe(scene, cfg)
        conf_cfg = ConfidenceConfig(margin=6.0, tau=0.15, median_window=1)
        processed = {
            view.id: process_view_sequence(dets[view.id], view, conf_cfg)
            for view in scene.rig.views
        }
        for frame_index in range(cfg.sequence_length):
            frame_dets = {vid: processed[vid][frame_index] for vid in processed}
            skeleton = triangulate_frame(scene.rig, frame_dets, scene.model.topology)
            gt = scene.joints_per_frame[frame_index].positions()
            assert all(j.valid for j in skeleton.joints)
            assert np.linalg.norm(skeleton.positions() - gt, axis=1).max() < 1e-6
