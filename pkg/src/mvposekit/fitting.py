"""Per-frame capsule-model fitting to 3D joint targets and silhouettes.

The objective is a weighted sum of four terms: a joint term (mean squared
distance between predicted and valid target joints, mm^2), a silhouette
term (mean squared per-pixel difference between the soft render and the
observed masks), and squared-norm regularizers on the shape and pose
vectors. The root transform is never regularized.

Optimization is a damped Gauss-Newton loop: the joint and regularizer
terms contribute a Gauss-Newton Hessian approximation, the silhouette term
enters through its gradient only, and a Levenberg-Marquardt damping factor
adapts so that every accepted step decreases the total loss. A plain
backtracking gradient-descent policy is available as a fallback.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFiniteLoss, NoValidTargets
from .geometry import Rig
from .kinematics import CapsuleModel, KinematicParams, fk_with_jacobian, forward_kinematics
from .silhouette import SilhouetteMask, mask_loss_with_gradient
from .topology import SkeletonSet3D

logger = logging.getLogger(__name__)

STEP_GAUSS_NEWTON_LM = "gauss_newton_lm"
STEP_GRADIENT_DESCENT = "gradient_descent"

_LM_DAMPING_INIT = 1e-3
_LM_DAMPING_UP = 10.0
_LM_DAMPING_DOWN = 3.0
_LM_DAMPING_MAX = 1e16


@dataclass(frozen=True)
class FitConfig:
    """Loss weights and optimizer knobs for the fitting stage."""

    lambda_joint: float = 1.0
    lambda_mask: float = 0.01
    lambda_beta: float = 1e-3
    lambda_theta: float = 1e-3
    max_iterations: int = 60
    gradient_tolerance: float = 1e-6
    step_policy: str = STEP_GAUSS_NEWTON_LM
    soft_sigma: float = 2.0

    def __post_init__(self) -> None:
        for name in ("lambda_joint", "lambda_mask", "lambda_beta", "lambda_theta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_policy not in (STEP_GAUSS_NEWTON_LM, STEP_GRADIENT_DESCENT):
            raise ValueError(f"unknown step_policy {self.step_policy!r}")
        if self.soft_sigma <= 0:
            raise ValueError("soft_sigma must be positive")


@dataclass(frozen=True)
class FitResult:
    """Outcome of fitting one frame.

    ``loss_history`` holds the objective at the initial point and after
    every accepted step; it is non-increasing by construction.
    """

    params: KinematicParams
    loss: float
    iterations: int
    converged: bool
    loss_history: tuple[float, ...] = ()
    error: str | None = None


def joint_loss(predicted: np.ndarray, target: SkeletonSet3D) -> float:
    """Mean squared distance (mm^2) between predictions and valid targets.

    Raises:
        NoValidTargets: If every target joint is invalid.
        DimensionMismatch: If the prediction count differs from the topology.
    """
    predicted = np.asarray(predicted, dtype=np.float64).reshape(-1, 3)
    if predicted.shape[0] != len(target.topology):
        raise DimensionMismatch(
            f"{predicted.shape[0]} predictions for {len(target.topology)} joints"
        )
    mask = target.valid_mask()
    if not mask.any():
        raise NoValidTargets("every target joint is invalid")
    diff = predicted[mask] - target.positions()[mask]
    return float(np.mean(np.sum(diff**2, axis=1)))


def _param_slices(model: CapsuleModel) -> tuple[slice, slice]:
    beta = slice(6, 6 + model.bone_count)
    theta = slice(6 + model.bone_count, 6 + model.bone_count + 3 * model.joint_count)
    return beta, theta


def _evaluate(
    model: CapsuleModel,
    params: KinematicParams,
    target: SkeletonSet3D,
    masks: list[SilhouetteMask] | None,
    rig: Rig | None,
    cfg: FitConfig,
    with_derivatives: bool,
) -> tuple[float, np.ndarray | None, np.ndarray | None]:
    """Total loss and, when requested, its gradient and GN Hessian."""
    if with_derivatives:
        positions, jacobian = fk_with_jacobian(model, params)
        dim = jacobian.shape[1]
        grad = np.zeros(dim)
        gauss = np.zeros((dim, dim))
    else:
        positions = forward_kinematics(model, params)
        jacobian = None
        grad = None
        gauss = None

    loss = 0.0
    if cfg.lambda_joint > 0.0:
        mask = target.valid_mask()
        if not mask.any():
            raise NoValidTargets("every target joint is invalid")
        diff = positions[mask] - target.positions()[mask]
        count = diff.shape[0]
        loss += cfg.lambda_joint * float(np.mean(np.sum(diff**2, axis=1)))
        if with_derivatives:
            rows = jacobian.reshape(len(positions), 3, dim)[mask].reshape(-1, dim)
            scale = 2.0 * cfg.lambda_joint / count
            grad += scale * (rows.T @ diff.ravel())
            gauss += scale * (rows.T @ rows)

    beta_slice, theta_slice = _param_slices(model)
    loss += cfg.lambda_beta * float(params.beta @ params.beta)
    loss += cfg.lambda_theta * float(params.theta.ravel() @ params.theta.ravel())
    if with_derivatives:
        grad[beta_slice] += 2.0 * cfg.lambda_beta * params.beta
        grad[theta_slice] += 2.0 * cfg.lambda_theta * params.theta.ravel()
        diag = np.arange(dim)
        gauss[diag[beta_slice], diag[beta_slice]] += 2.0 * cfg.lambda_beta
        gauss[diag[theta_slice], diag[theta_slice]] += 2.0 * cfg.lambda_theta

    if cfg.lambda_mask > 0.0 and masks:
        if rig is None:
            raise DimensionMismatch("mask term requires a rig")
        views = [rig.view_by_id(m.view_id) for m in masks]
        if with_derivatives:
            term, dpositions = mask_loss_with_gradient(
                positions, model, views, masks, cfg.soft_sigma
            )
            grad += cfg.lambda_mask * (dpositions.ravel() @ jacobian)
        else:
            from .silhouette import mask_loss, render_positions

            rendered = [
                render_positions(positions, model, view, cfg.soft_sigma) for view in views
            ]
            term = mask_loss(rendered, masks)
        loss += cfg.lambda_mask * term
    return loss, grad, gauss


def total_loss(
    model: CapsuleModel,
    params: KinematicParams,
    target: SkeletonSet3D,
    masks: list[SilhouetteMask] | None,
    rig: Rig | None,
    cfg: FitConfig,
) -> tuple[float, np.ndarray]:
    """The weighted objective and its analytic gradient.

    The gradient is ordered like ``KinematicParams.as_vector()``:
    ``[root_rotation, root_translation, beta, theta]``.
    """
    loss, grad, _ = _evaluate(model, params, target, masks, rig, cfg, True)
    return loss, grad


def fit_frame(
    model: CapsuleModel,
    target: SkeletonSet3D,
    masks: list[SilhouetteMask] | None,
    rig: Rig | None,
    init: KinematicParams,
    cfg: FitConfig,
) -> FitResult:
    """Minimize the objective for one frame starting from ``init``.

    Accepted steps strictly decrease the loss, so the final loss never
    exceeds the initial one. Returns with ``converged=True`` once the
    gradient norm drops below ``cfg.gradient_tolerance``.

    Raises:
        NonFiniteLoss: If the objective is non-finite at the initial point
            (the optimizer itself never accepts a non-finite state).
    """
    params = init.canonicalized()
    loss, grad, gauss = _evaluate(model, params, target, masks, rig, cfg, True)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteLoss(f"objective non-finite at the initial point (loss={loss})")

    if cfg.step_policy == STEP_GRADIENT_DESCENT:
        return _fit_gradient_descent(model, target, masks, rig, cfg, params, loss, grad)

    dim = grad.shape[0]
    damping = _LM_DAMPING_INIT * max(float(np.max(np.diag(gauss))), 1e-12)
    history = [loss]
    iterations = 0
    converged = float(np.linalg.norm(grad)) < cfg.gradient_tolerance
    while not converged and iterations < cfg.max_iterations:
        accepted = False
        while damping <= _LM_DAMPING_MAX:
            try:
                step = np.linalg.solve(gauss + damping * np.eye(dim), -grad)
            except np.linalg.LinAlgError:
                damping *= _LM_DAMPING_UP
                continue
            candidate = KinematicParams.from_vector(
                params.as_vector() + step, model.bone_count, model.joint_count
            ).canonicalized()
            candidate_loss, _, _ = _evaluate(
                model, candidate, target, masks, rig, cfg, False
            )
            if np.isfinite(candidate_loss) and candidate_loss < loss:
                params = candidate
                loss = candidate_loss
                history.append(loss)
                damping = max(damping / _LM_DAMPING_DOWN, 1e-12)
                accepted = True
                break
            damping *= _LM_DAMPING_UP
        iterations += 1
        if not accepted:
            break
        loss, grad, gauss = _evaluate(model, params, target, masks, rig, cfg, True)
        converged = float(np.linalg.norm(grad)) < cfg.gradient_tolerance
    return FitResult(
        params=params, loss=loss, iterations=iterations, converged=converged,
        loss_history=tuple(history),
    )


def _fit_gradient_descent(
    model: CapsuleModel,
    target: SkeletonSet3D,
    masks: list[SilhouetteMask] | None,
    rig: Rig | None,
    cfg: FitConfig,
    params: KinematicParams,
    loss: float,
    grad: np.ndarray,
) -> FitResult:
    """Backtracking gradient descent with an adaptive step length."""
    step_length = 1.0 / max(float(np.linalg.norm(grad)), 1.0)
    history = [loss]
    iterations = 0
    converged = float(np.linalg.norm(grad)) < cfg.gradient_tolerance
    while not converged and iterations < cfg.max_iterations:
        accepted = False
        for _ in range(60):
            candidate = KinematicParams.from_vector(
                params.as_vector() - step_length * grad,
                model.bone_count,
                model.joint_count,
            ).canonicalized()
            candidate_loss, _, _ = _evaluate(
                model, candidate, target, masks, rig, cfg, False
            )
            if np.isfinite(candidate_loss) and candidate_loss < loss:
                params = candidate
                loss = candidate_loss
                history.append(loss)
                step_length *= 2.0
                accepted = True
                break
            step_length *= 0.5
            if step_length < 1e-18:
                break
        iterations += 1
        if not accepted:
            break
        loss, grad, _ = _evaluate(model, params, target, masks, rig, cfg, True)
        converged = float(np.linalg.norm(grad)) < cfg.gradient_tolerance
    return FitResult(
        params=params, loss=loss, iterations=iterations, converged=converged,
        loss_history=tuple(history),
    )


def initial_params_for_target(
    model: CapsuleModel, target: SkeletonSet3D
) -> KinematicParams:
    """Closed-form first-frame initialization: rest shape at the torso center.

    The root translation is the midpoint between the hip midpoint and the
    shoulder midpoint of the valid target joints (falling back to the valid
    centroid, then to the origin); shape and pose start at zero.
    """
    positions = target.positions()
    mask = target.valid_mask()

    def _mean_of(names: tuple[str, str]) -> np.ndarray | None:
        rows = []
        for name in names:
            try:
                index = target.topology.index_of(name)
            except KeyError:
                continue
            if mask[index]:
                rows.append(positions[index])
        if not rows:
            return None
        return np.mean(rows, axis=0)

    pelvis = _mean_of(("left_hip", "right_hip"))
    neck = _mean_of(("left_shoulder", "right_shoulder"))
    if pelvis is not None and neck is not None:
        translation = 0.5 * (pelvis + neck)
    elif mask.any():
        translation = positions[mask].mean(axis=0)
    else:
        translation = np.zeros(3)
    params = model.zero_params()
    return KinematicParams(
        beta=params.beta,
        theta=params.theta,
        root_rotation=params.root_rotation,
        root_translation=translation,
    )


def fit_sequence(
    model: CapsuleModel,
    targets: list[SkeletonSet3D],
    masks: list[list[SilhouetteMask] | None] | None,
    rig: Rig | None,
    cfg: FitConfig,
) -> list[FitResult]:
    """Fit a frame-ordered sequence with warm starts.

    Frame 0 starts from the closed-form root alignment; frame t starts from
    frame t-1's solution. Per-frame failures are recorded on the result and
    the sequence continues from the last good parameters.
    """
    results: list[FitResult] = []
    previous: KinematicParams | None = None
    for index, target in enumerate(targets):
        frame_masks = masks[index] if masks is not None else None
        init = previous if previous is not None else initial_params_for_target(model, target)
        try:
            result = fit_frame(model, target, frame_masks, rig, init, cfg)
        except (NonFiniteLoss, NoValidTargets) as exc:
            logger.warning("frame %d: fit failed: %s", target.frame, exc)
            result = FitResult(
                params=init, loss=float("nan"), iterations=0, converged=False,
                error=str(exc),
            )
        results.append(result)
        if result.error is None:
            previous = result.params
    return results
