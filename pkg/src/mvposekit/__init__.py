"""Markerless multi-view 3D pose annotation toolkit.

Detections from calibrated views are confidence-gated, triangulated with a
confidence-weighted linear solver, merged with precise hand keypoints, and
registered to a capsule-skeleton model by minimizing joint, silhouette,
and regularization losses. A deterministic synthetic multi-camera scene
generator provides exact ground truth for every stage.
"""

from .confidence import (
    ConfidenceConfig,
    Detection2D,
    FrameDetections,
    median_filter_track,
    modulate_confidence,
    process_view_sequence,
    threshold_rescale,
)
from .evaluation import (
    ActionLabel,
    ConfusionMatrix,
    PoseSequence,
    confusion_and_accuracy,
    mpjpe,
    pa_mpjpe,
    procrustes_align,
    standardize_sequence,
)
from .fitting import (
    FitConfig,
    FitResult,
    fit_frame,
    fit_sequence,
    joint_loss,
    total_loss,
)
from .geometry import CameraView, Rig, project_point, validate_rig
from .kinematics import (
    CapsuleModel,
    KinematicParams,
    default_capsule_model,
    fk_with_jacobian,
    forward_kinematics,
)
from .silhouette import (
    SilhouetteMask,
    mask_iou,
    mask_loss,
    render_soft_silhouette,
)
from .synth import (
    GroundTruthScene,
    SynthConfig,
    generate_motion,
    generate_rig,
    generate_scene,
    observe,
    render_gt_masks,
)
from .topology import (
    Joint3D,
    SkeletonSet3D,
    SkeletonTopology,
    default_topology,
)
from .triangulation import (
    build_dlt_rows,
    merge_keypoints,
    triangulate_frame,
    triangulate_joint,
)

__version__ = "0.1.0"
