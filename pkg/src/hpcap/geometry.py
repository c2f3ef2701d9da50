"""Affine pose parameterization and differentiable template warping.

Poses are 6-tuples ``(scale, shear, rot_x, rot_y, trans_x, trans_y)``.
``(rot_x, rot_y)`` is an unnormalized rotation direction (normalized before
use, which avoids the angle wrap-around discontinuity), and translations are
expressed in normalized image coordinates where both axes span ``[-1, 1]``.
A pose maps template space into image space; warping samples the template
through the inverse transform (standard grid-sampling semantics).
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

POSE_DIM = 6
POSE_FIELDS = ("scale", "shear", "rot_x", "rot_y", "trans_x", "trans_y")

# Out-of-support samples: templates fall back to the suppressed/background
# value, visibilities to zero.
TEMPLATE_FILL = -1.0
_ROT_EPS = 1e-8


SCALE_MIN = 0.1
SCALE_MAX = 1.0


def squash_raw_pose(raw: torch.Tensor) -> torch.Tensor:
    """Map unconstrained encoder outputs onto valid pose parameters.

    Scale is squashed into (SCALE_MIN, SCALE_MAX): an unbounded scale lets
    capsules degenerate into flat full-canvas patches (huge s) or vanish
    entirely (s -> 0), both of which collapse the mixture into a global
    color palette with no spatial structure. Shear and the rotation pair are
    left free; translations are squashed with tanh into [-1, 1].
    """
    if raw.shape[-1] != POSE_DIM:
        raise ValueError(f"expected last dim {POSE_DIM}, got {raw.shape[-1]}")
    scale = SCALE_MIN + (SCALE_MAX - SCALE_MIN) * torch.sigmoid(raw[..., 0:1])
    shear = raw[..., 1:2]
    rot = raw[..., 2:4]
    trans = torch.tanh(raw[..., 4:6])
    return torch.cat([scale, shear, rot, trans], dim=-1)


def pose_to_matrix(pose: torch.Tensor) -> torch.Tensor:
    """Build the 2x3 affine matrix for each pose (template -> image coords).

    With the normalized rotation pair (cosa, sina) = (rot_x, rot_y) / ||.||,
    the matrix is::

        [[s*cosa, -s*sina + s*h*cosa, t_x],
         [s*sina,  s*cosa + s*h*sina, t_y]]

    i.e. scale * rotation * unit-determinant shear, so the 2x2 block has
    determinant s**2.

    Raises:
        ValueError: if any rotation pair is degenerate (both components
            below 1e-8 in magnitude).
    """
    if pose.shape[-1] != POSE_DIM:
        raise ValueError(f"expected last dim {POSE_DIM}, got {pose.shape[-1]}")
    s = pose[..., 0]
    h = pose[..., 1]
    ax = pose[..., 2]
    ay = pose[..., 3]
    tx = pose[..., 4]
    ty = pose[..., 5]

    degenerate = (ax.abs() < _ROT_EPS) & (ay.abs() < _ROT_EPS)
    if bool(degenerate.any()):
        raise ValueError("degenerate rotation")

    norm = torch.sqrt(ax * ax + ay * ay)
    cosa = ax / norm
    sina = ay / norm

    row0 = torch.stack([s * cosa, -s * sina + s * h * cosa, tx], dim=-1)
    row1 = torch.stack([s * sina, s * cosa + s * h * sina, ty], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def invert_affine(matrix: torch.Tensor) -> torch.Tensor:
    """Invert 2x3 affine matrices (implicit third row [0, 0, 1])."""
    a = matrix[..., 0, 0]
    b = matrix[..., 0, 1]
    c = matrix[..., 1, 0]
    d = matrix[..., 1, 1]
    tx = matrix[..., 0, 2]
    ty = matrix[..., 1, 2]
    det = a * d - b * c
    ia = d / det
    ib = -b / det
    ic = -c / det
    id_ = a / det
    itx = -(ia * tx + ib * ty)
    ity = -(ic * tx + id_ * ty)
    row0 = torch.stack([ia, ib, itx], dim=-1)
    row1 = torch.stack([ic, id_, ity], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def warp_template(
    template: torch.Tensor,
    visibility: torch.Tensor,
    pose: torch.Tensor,
    out_h: int,
    out_w: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp templates and visibility maps into image space.

    Each output pixel is sampled bilinearly from template space through the
    inverse of ``pose_to_matrix(pose)``. Samples falling outside the template
    yield visibility 0 and template value -1. Differentiable w.r.t. template,
    visibility, and pose.

    Args:
        template: (N, Hs, Ws) template stack.
        visibility: (N, Hs, Ws) visibility stack, same shape as template.
        pose: (N, 6) poses.
        out_h, out_w: output (image) resolution.

    Returns:
        (warped_template, warped_visibility), each (N, out_h, out_w).
    """
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"output dims must be positive, got {out_h}x{out_w}")
    if template.shape != visibility.shape:
        raise ValueError(
            f"template/visibility shape mismatch: {tuple(template.shape)} vs "
            f"{tuple(visibility.shape)}"
        )

    theta = invert_affine(pose_to_matrix(pose))
    n = template.shape[0]
    grid = F.affine_grid(theta, (n, 1, out_h, out_w), align_corners=False)

    # Sampling template+1 with zero padding then shifting back gives the -1
    # fill outside the template support; visibility pads with plain zeros.
    stacked = torch.stack([template - TEMPLATE_FILL, visibility], dim=1)
    warped = F.grid_sample(
        stacked, grid, mode="bilinear", padding_mode="zeros", align_corners=False
    )
    warped_template = warped[:, 0] + TEMPLATE_FILL
    warped_visibility = warped[:, 1]
    return warped_template, warped_visibility


def identity_pose(n: int = 1, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Poses that map template space onto the image canvas unchanged."""
    pose = torch.zeros(n, POSE_DIM, dtype=dtype)
    pose[:, 0] = 1.0  # scale
    pose[:, 2] = 1.0  # rot_x: (1, 0) is angle zero
    return pose
