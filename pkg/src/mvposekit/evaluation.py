"""Pose error metrics, sequence standardization, and label reporting.

MPJPE is the mean Euclidean distance over valid joints; the aligned
variant first fits the optimal similarity transform (rotation, uniform
scale, translation) from prediction to ground truth. Sequences are
standardized to a fixed length by tiling short inputs and truncating long
ones. Action-label utilities cover the six-verb vocabulary and the
confusion-matrix report format.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateConfiguration,
    EmptyInput,
    EmptySequence,
    NoValidJoints,
)

STANDARD_SEQUENCE_LENGTH = 100


class ActionLabel(enum.Enum):
    """The six verb classes used for action labels."""

    PICK_UP = "pick_up"
    PUT_DOWN = "put_down"
    POSITION = "position"
    REMOVE = "remove"
    SCREW = "screw"
    UNSCREW = "unscrew"


ACTION_CLASSES: tuple[ActionLabel, ...] = tuple(ActionLabel)


@dataclass(frozen=True)
class PoseSequence:
    """A (T, J, 3) pose array in mm with an optional action label."""

    frames: np.ndarray
    label: ActionLabel | None = None

    def __post_init__(self) -> None:
        frames = np.array(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[2] != 3:
            raise ValueError(f"frames must have shape (T, J, 3), got {frames.shape}")
        frames.flags.writeable = False
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return self.scale * points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class ConfusionMatrix:
    """Row = true class, column = predicted class, in ACTION_CLASSES order."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        counts = np.array(self.counts, dtype=np.int64)
        size = len(ACTION_CLASSES)
        if counts.shape != (size, size):
            raise ValueError(f"counts must be {size}x{size}, got {counts.shape}")
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def row_percentages(self) -> np.ndarray:
        """Row-normalized percentages (rows with no samples stay zero)."""
        sums = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            rows = np.where(sums > 0, 100.0 * self.counts / sums, 0.0)
        return rows


def _checked_mask(
    pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray | None
) -> np.ndarray:
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"pose arrays must both be (J, 3); got {pred.shape} and {gt.shape}")
    if valid_mask is None:
        return np.ones(pred.shape[0], dtype=bool)
    mask = np.asarray(valid_mask, dtype=bool).reshape(-1)
    if mask.shape[0] != pred.shape[0]:
        raise ValueError("valid_mask length does not match the joint count")
    return mask


def mpjpe(pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray | None = None) -> float:
    """Mean per-joint position error in mm over the valid joints."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = _checked_mask(pred, gt, valid_mask)
    if not mask.any():
        raise NoValidJoints("no valid joints to compare")
    return float(np.mean(np.linalg.norm(pred[mask] - gt[mask], axis=1)))


def procrustes_align(
    pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray | None = None
) -> tuple[SimilarityTransform, np.ndarray]:
    """Least-squares similarity alignment of pred onto gt.

    Returns the transform minimizing ``sum ||s R pred + t - gt||^2`` over
    the valid joints, and the prediction with that transform applied to
    every joint (valid or not).

    Raises:
        DegenerateConfiguration: With fewer than 3 valid joints, or when
            the valid joints are collinear/coincident (the two smallest
            singular values of the covariance fall below 1e-12 relative).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = _checked_mask(pred, gt, valid_mask)
    if mask.sum() < 3:
        raise DegenerateConfiguration(f"need >= 3 valid joints, have {int(mask.sum())}")
    x = pred[mask]
    y = gt[mask]
    mean_x = x.mean(axis=0)
    mean_y = y.mean(axis=0)
    xc = x - mean_x
    yc = y - mean_y
    covariance = yc.T @ xc / x.shape[0]
    u, singulars, vt = np.linalg.svd(covariance)
    if singulars[1] <= 1e-12 * max(singulars[0], np.finfo(float).tiny):
        raise DegenerateConfiguration("valid joints are collinear or coincident")
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    flip = np.array([1.0, 1.0, sign])
    rotation = u @ np.diag(flip) @ vt
    variance = float(np.mean(np.sum(xc**2, axis=1)))
    scale = float((singulars * flip).sum() / variance)
    translation = mean_y - scale * rotation @ mean_x
    transform = SimilarityTransform(scale=scale, rotation=rotation, translation=translation)
    return transform, transform.apply(pred)


def pa_mpjpe(pred: np.ndarray, gt: np.ndarray, valid_mask: np.ndarray | None = None) -> float:
    """MPJPE after similarity alignment (errors as procrustes_align)."""
    _, aligned = procrustes_align(pred, gt, valid_mask)
    return mpjpe(aligned, gt, valid_mask)


def standardize_sequence(
    seq: PoseSequence, target_len: int = STANDARD_SEQUENCE_LENGTH
) -> PoseSequence:
    """Tile-and-cut to exactly ``target_len`` frames.

    Output frame t is input frame ``t % len(seq)``: short sequences repeat
    from the start, long ones keep their first ``target_len`` frames.
    """
    if len(seq) == 0:
        raise EmptySequence("cannot standardize an empty sequence")
    indices = np.arange(target_len) % len(seq)
    return PoseSequence(frames=seq.frames[indices], label=seq.label)


def confusion_and_accuracy(
    pairs: list[tuple[ActionLabel, ActionLabel]],
) -> tuple[ConfusionMatrix, float]:
    """Count (truth, prediction) pairs and report trace-over-total accuracy."""
    if not pairs:
        raise EmptyInput("no (truth, prediction) pairs")
    index = {label: i for i, label in enumerate(ACTION_CLASSES)}
    counts = np.zeros((len(ACTION_CLASSES), len(ACTION_CLASSES)), dtype=np.int64)
    for truth, predicted in pairs:
        counts[index[truth], index[predicted]] += 1
    matrix = ConfusionMatrix(counts=counts)
    return matrix, matrix.accuracy
