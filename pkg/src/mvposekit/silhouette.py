"""Soft capsule silhouettes: rendering, mask loss, and analytic gradients.

Every bone of a capsule model projects to a thick 2D segment whose
per-endpoint radius is the capsule radius scaled by focal length over
depth. A capsule's occupancy at a pixel is ``sigmoid(-d / sigma)`` where
``d`` is the signed distance (pixels) to its projected region, with the
radius interpolated along a smoothly clamped closest-point parameter. The
image combines capsules with the probabilistic union

    occupancy = 1 - prod_b (1 - s_b)

which, unlike a hard maximum, keeps the render continuously
differentiable where capsules overlap; inside any single capsule the
union still saturates to 1 and far away it decays to 0.

The gradient path is fully closed-form: pixel occupancy -> per-capsule
signed distance -> projected endpoints and radii -> camera-frame points ->
world joint positions. The fitting stage chains the result through the
kinematic Jacobian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDepth, DimensionMismatch
from .geometry import CameraView
from .kinematics import CapsuleModel, KinematicParams, forward_kinematics

# Guard against division by zero for pixels exactly on a capsule spine and
# for bones that project to a single point.
_TINY = 1e-12

# Half-width of the C1 blending zone of the radius-interpolation clamp.
_CLAMP_BLEND = 0.25


@dataclass(frozen=True)
class SilhouetteMask:
    """A per-view occupancy grid in [0, 1]; 1 marks the person."""

    view_id: str
    grid: np.ndarray
    frame: int

    def __post_init__(self) -> None:
        grid = np.array(self.grid, dtype=np.float64)
        if grid.ndim != 2:
            raise DimensionMismatch(f"mask grid must be 2-D, got shape {grid.shape}")
        if grid.size and (grid.min() < 0.0 or grid.max() > 1.0):
            raise ValueError("mask values must lie in [0, 1]")
        grid.flags.writeable = False
        object.__setattr__(self, "grid", grid)


def _softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)) without overflow."""
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    """Stable logistic function: exp(-softplus(-z))."""
    return np.exp(-np.logaddexp(0.0, -z))


def _smooth_clamp(t: np.ndarray, want_derivative: bool) -> tuple[np.ndarray, np.ndarray | None]:
    """C1 clamp of t onto [0, 1] (and optionally its derivative).

    Quadratic blending of half-width ``_CLAMP_BLEND`` around 0 and 1 keeps
    the radius-interpolation term kink-free at the endpoint transitions.
    """
    eps = _CLAMP_BLEND
    value = np.clip(t, 0.0, 1.0)
    lower = np.abs(t) < eps
    upper = np.abs(1.0 - t) < eps
    value = np.where(lower, (t + eps) ** 2 / (4.0 * eps), value)
    value = np.where(upper, 1.0 - (1.0 - t + eps) ** 2 / (4.0 * eps), value)
    if not want_derivative:
        return value, None
    deriv = ((t > 0.0) & (t < 1.0)).astype(np.float64)
    deriv = np.where(lower, (t + eps) / (2.0 * eps), deriv)
    deriv = np.where(upper, (1.0 - t + eps) / (2.0 * eps), deriv)
    return value, deriv


_PIXEL_GRID_CACHE: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}


def _pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel center coordinates (H*W, 2) and their squared norms (cached)."""
    key = (height, width)
    cached = _PIXEL_GRID_CACHE.get(key)
    if cached is None:
        ys, xs = np.mgrid[0:height, 0:width]
        grid = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
        norms = np.einsum("nk,nk->n", grid, grid)
        grid.flags.writeable = False
        norms.flags.writeable = False
        cached = (grid, norms)
        _PIXEL_GRID_CACHE[key] = cached
    return cached


@dataclass(frozen=True)
class _CapsuleGeometry:
    """Per-view projected model quantities reused by the gradient pass."""

    cam_points: np.ndarray  # (J, 3) camera-frame joint positions
    pixels: np.ndarray  # (J, 2) projected joints
    radius_scale: np.ndarray  # (J,) focal / depth at each joint
    parents: np.ndarray  # (B,) parent joint per bone
    children: np.ndarray  # (B,) child joint per bone


def _project_model(
    positions: np.ndarray, model: CapsuleModel, view: CameraView
) -> _CapsuleGeometry:
    cam_points = positions @ view.rotation.T + view.translation
    depths = cam_points[:, 2]
    if np.any(depths <= 0.0):
        raise DegenerateDepth(
            f"view {view.id!r}: a capsule endpoint has non-positive depth"
        )
    k = view.intrinsics
    homogeneous = cam_points @ k.T
    pixels = homogeneous[:, :2] / homogeneous[:, 2:3]
    focal = 0.5 * (k[0, 0] + k[1, 1])
    children = np.array(model.bone_children, dtype=int)
    parents = np.array([model.topology.joints[c].parent for c in children], dtype=int)
    return _CapsuleGeometry(
        cam_points=cam_points,
        pixels=pixels,
        radius_scale=focal / depths,
        parents=parents,
        children=children,
    )


def _capsule_fields(
    geometry: _CapsuleGeometry,
    radii: np.ndarray,
    points: np.ndarray,
    point_norms: np.ndarray,
    sigma: float,
    want_gradient_terms: bool,
) -> dict[str, np.ndarray]:
    """Per-capsule signed distances plus the union occupancy.

    The squared point-to-segment distance is expanded as
    ``|w|^2 - t (2 w.e - t |e|^2)`` with ``w = p - a`` and the clamped
    closest-point parameter ``t``, so the per-pixel work reduces to two
    (B, 2) x (2, N) matrix products and a handful of fused elementwise
    passes. Gradient-only quantities are skipped for plain renders.
    """
    a2 = geometry.pixels[geometry.parents]  # (B, 2)
    b2 = geometry.pixels[geometry.children]
    ra = radii * geometry.radius_scale[geometry.parents]  # (B,)
    rb = radii * geometry.radius_scale[geometry.children]

    edge = b2 - a2  # (B, 2)
    length_sq = np.maximum(np.einsum("bk,bk->b", edge, edge), _TINY)
    dot_we = edge @ points.T - np.einsum("bk,bk->b", edge, a2)[:, None]  # (B, N)
    t_raw = dot_we / length_sq[:, None]
    t_dist = np.clip(t_raw, 0.0, 1.0)
    t_radius, dt_radius = _smooth_clamp(t_raw, want_gradient_terms)
    w_sq = (
        point_norms[None, :]
        - 2.0 * (a2 @ points.T)
        + np.einsum("bk,bk->b", a2, a2)[:, None]
    )
    dist = np.sqrt(
        np.maximum(w_sq - t_dist * (2.0 * dot_we - t_dist * length_sq[:, None]), 0.0)
    )
    signed = dist - (ra[:, None] + t_radius * (rb - ra)[:, None])
    # Probabilistic union across capsules, computed in log space:
    # 1 - occ = prod sigmoid(d_b / sigma) and log sigmoid(z) = -softplus(-z).
    miss_terms = _softplus(-signed / sigma)  # (B, N)
    log_miss = -miss_terms.sum(axis=0)  # (N,)
    fields = {
        "a2": a2,
        "b2": b2,
        "ra": ra,
        "rb": rb,
        "edge": edge,
        "length_sq": length_sq,
        "t_raw": t_raw,
        "t_dist": t_dist,
        "t_radius": t_radius,
        "dist": dist,
        "signed": signed,
        "occupancy": -np.expm1(log_miss),
    }
    if want_gradient_terms:
        fields["dt_radius"] = dt_radius
        fields["miss"] = np.exp(log_miss)  # (N,) = 1 - occupancy
        # sigmoid(-signed / sigma) = exp(-softplus(signed / sigma)) and
        # softplus(z) = z + softplus(-z).
        fields["occupancy_one"] = np.exp(-(signed / sigma) - miss_terms)
    return fields


def render_soft_silhouette(
    model: CapsuleModel,
    params: KinematicParams,
    view: CameraView,
    soft_sigma: float,
) -> np.ndarray:
    """Render the model's soft silhouette in one view; (H, W) grid in [0, 1].

    Raises:
        DegenerateDepth: If any capsule endpoint is at or behind the camera.
    """
    positions = forward_kinematics(model, params)
    return render_positions(positions, model, view, soft_sigma)


def render_positions(
    positions: np.ndarray,
    model: CapsuleModel,
    view: CameraView,
    soft_sigma: float,
) -> np.ndarray:
    """Render a soft silhouette from precomputed joint positions."""
    geometry = _project_model(positions, model, view)
    points, point_norms = _pixel_grid(view.height, view.width)
    fields = _capsule_fields(
        geometry, model.capsule_radii, points, point_norms, soft_sigma, False
    )
    return fields["occupancy"].reshape(view.height, view.width)


def hard_mask(grid: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binarize an occupancy grid at the given threshold."""
    return (np.asarray(grid) >= threshold).astype(np.float64)


def mask_iou(a: np.ndarray, b: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection over union of two occupancy grids after binarization."""
    a = np.asarray(a) >= threshold
    b = np.asarray(b) >= threshold
    if a.shape != b.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def mask_loss(rendered: list[np.ndarray], observed: list[SilhouetteMask]) -> float:
    """Mean over views of the mean squared per-pixel difference."""
    if len(rendered) != len(observed):
        raise DimensionMismatch(
            f"{len(rendered)} rendered grids vs {len(observed)} observed masks"
        )
    if not rendered:
        raise DimensionMismatch("mask loss needs at least one view")
    total = 0.0
    for grid, mask in zip(rendered, observed):
        if grid.shape != mask.grid.shape:
            raise DimensionMismatch(
                f"view {mask.view_id!r}: rendered {grid.shape} vs observed {mask.grid.shape}"
            )
        total += float(np.mean((grid - mask.grid) ** 2))
    return total / len(rendered)


def mask_loss_with_gradient(
    positions: np.ndarray,
    model: CapsuleModel,
    views: list[CameraView],
    observed: list[SilhouetteMask],
    soft_sigma: float,
) -> tuple[float, np.ndarray]:
    """Mask loss plus its gradient with respect to world joint positions.

    Returns:
        Tuple of (loss, gradient) with gradient of shape (J, 3) in 1/mm.
    """
    if len(views) != len(observed):
        raise DimensionMismatch(f"{len(views)} views vs {len(observed)} masks")
    if not views:
        raise DimensionMismatch("mask loss needs at least one view")
    loss = 0.0
    grad = np.zeros_like(positions)
    for view, mask in zip(views, observed):
        if (view.height, view.width) != mask.grid.shape:
            raise DimensionMismatch(
                f"view {view.id!r}: crop {(view.height, view.width)} vs "
                f"mask {mask.grid.shape}"
            )
        view_loss, view_grad = _view_loss_and_gradient(
            positions, model, view, mask.grid, soft_sigma, len(views)
        )
        loss += view_loss
        grad += view_grad
    return loss / len(views), grad


def _view_loss_and_gradient(
    positions: np.ndarray,
    model: CapsuleModel,
    view: CameraView,
    observed: np.ndarray,
    sigma: float,
    view_count: int,
) -> tuple[float, np.ndarray]:
    geometry = _project_model(positions, model, view)
    points, point_norms = _pixel_grid(view.height, view.width)
    fields = _capsule_fields(
        geometry, model.capsule_radii, points, point_norms, sigma, True
    )
    rendered = fields["occupancy"]  # (N,)
    diff = rendered - observed.ravel()
    pixel_count = diff.size
    view_loss = float(np.mean(diff**2))

    # d loss / d occupancy, with the mean-over-views fold-in.
    docc = 2.0 * diff / (pixel_count * view_count)
    # d occupancy / d signed_distance_b = -(1 - occ) * s_b / sigma.
    pixel_gain = docc[None, :] * (
        -fields["miss"][None, :] * fields["occupancy_one"] / sigma
    )  # (B, N): multiplies d(signed distance)/d(anything)

    a2 = fields["a2"]
    t_dist = fields["t_dist"]  # (B, N)
    t_raw = fields["t_raw"]
    t_radius = fields["t_radius"]
    dt_radius = fields["dt_radius"]
    edge = fields["edge"]  # (B, 2)
    length_sq = fields["length_sq"][:, None]  # (B, 1)
    delta_r = (fields["rb"] - fields["ra"])[:, None]  # (B, 1)
    inv_dist = 1.0 / np.maximum(fields["dist"], _TINY)

    # The endpoint gradients decompose into scalar-per-pixel coefficients of
    # rel = p - a2 and of the edge vector:
    #   dd/da2 = -(1 - t)(rel - t e)/dist - (dr dt'/L2)(-e - rel + 2 t_raw e)
    #   dd/db2 = -t (rel - t e)/dist - (dr dt'/L2)(rel - 2 t_raw e)
    # so the pixel sums become two (B, N) x (N, 2) matrix products.
    radius_term = delta_r * dt_radius / length_sq  # (B, N)
    gain_dist_a = pixel_gain * (1.0 - t_dist) * inv_dist
    gain_dist_b = pixel_gain * t_dist * inv_dist
    gain_radius = pixel_gain * radius_term

    coeff_rel_a = -gain_dist_a + gain_radius
    coeff_edge_a = gain_dist_a * t_dist + gain_radius * (1.0 - 2.0 * t_raw)
    coeff_rel_b = -gain_dist_b - gain_radius
    coeff_edge_b = gain_dist_b * t_dist + gain_radius * (2.0 * t_raw)

    sum_rel_a = coeff_rel_a.sum(axis=1)[:, None]
    sum_rel_b = coeff_rel_b.sum(axis=1)[:, None]
    grad_a2 = (coeff_rel_a @ points) - sum_rel_a * a2 + coeff_edge_a.sum(axis=1)[:, None] * edge
    grad_b2 = (coeff_rel_b @ points) - sum_rel_b * a2 + coeff_edge_b.sum(axis=1)[:, None] * edge
    grad_ra = -np.einsum("bn,bn->b", pixel_gain, 1.0 - t_radius)
    grad_rb = -np.einsum("bn,bn->b", pixel_gain, t_radius)

    # Chain projected endpoint/radius gradients back to world positions.
    joint_grad_px = np.zeros((len(positions), 2))
    joint_grad_scale = np.zeros(len(positions))  # d loss / d (focal / depth)
    radius_mm = model.capsule_radii
    np.add.at(joint_grad_px, geometry.parents, grad_a2)
    np.add.at(joint_grad_px, geometry.children, grad_b2)
    np.add.at(joint_grad_scale, geometry.parents, grad_ra * radius_mm)
    np.add.at(joint_grad_scale, geometry.children, grad_rb * radius_mm)

    grad_world = np.zeros_like(positions)
    k = view.intrinsics
    focal = 0.5 * (k[0, 0] + k[1, 1])
    depths = geometry.cam_points[:, 2]
    pixels = geometry.pixels
    for j in range(len(positions)):
        gpx = joint_grad_px[j]
        gscale = joint_grad_scale[j]
        if gpx[0] == 0.0 and gpx[1] == 0.0 and gscale == 0.0:
            continue
        z = depths[j]
        dpix_dcam = np.empty((2, 3))
        dpix_dcam[:, :2] = k[:2, :2] / z
        dpix_dcam[:, 2] = (k[:2, 2] - pixels[j]) / z
        dcam = dpix_dcam.T @ gpx
        # Projected radius r_px = r_mm * focal / z.
        dcam[2] += gscale * (-focal / z**2)
        grad_world[j] = view.rotation.T @ dcam
    return view_loss, grad_world
