"""Subpart capsule autoencoder: encoder, shared template banks, visibility
gating, and the subpart objective.

An image is encoded into K capsules, each carrying a presence probability, a
6-dim affine pose, and a feature vector. Template and visibility banks are
learnable parameters shared across samples; per sample they are warped into
image space by the capsule poses, gated by visibility, tinted by a color
decoded from the feature, and mixed into a Gaussian-mixture reconstruction
of the input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from hpcap.config import TrainConfig
from hpcap.geometry import POSE_DIM, TEMPLATE_FILL, squash_raw_pose, warp_template

WEIGHT_FLOOR = 1e-8  # mixture-weight floor; keeps the likelihood finite


@dataclass
class SubpartCapsules:
    """Per-batch capsule quantities.

    Shapes: presence (B, K); pose (B, K, 6); features (B, K, D);
    colors (B, K, C); templates/visibilities (K, Hs, Ws) shared banks;
    warped_* and gated_templates (B, K, H, W) at image resolution.
    """

    presence: torch.Tensor
    pose: torch.Tensor
    features: torch.Tensor
    colors: torch.Tensor
    templates: torch.Tensor
    visibilities: torch.Tensor
    warped_templates: torch.Tensor
    warped_visibilities: torch.Tensor
    gated_templates: torch.Tensor


def visibility_gate(
    warped_template: torch.Tensor, warped_visibility: torch.Tensor, threshold: float
) -> torch.Tensor:
    """Suppress template pixels whose visibility falls below the threshold.

    Low-visibility pixels are replaced by the background value -1 and receive
    no gradient; the mask is hard in both forward and backward passes.
    """
    fill = torch.full_like(warped_template, TEMPLATE_FILL)
    return torch.where(warped_visibility >= threshold, warped_template, fill)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, channels)
        self.norm2 = nn.GroupNorm(4, channels)

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + x)


def _center_bump(size: int) -> torch.Tensor:
    """Raw visibility init: high logit in the middle, low at the border."""
    coords = torch.arange(size, dtype=torch.float32) - (size - 1) / 2
    d2 = coords[None, :] ** 2 + coords[:, None] ** 2
    radius = size / 4.0
    return 3.0 * torch.exp(-d2 / (2 * radius**2)) - 2.0


class SubpartAutoencoder(nn.Module):
    """Capsule encoder with shared template/visibility banks."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        k = config.num_subparts
        d = config.feature_dim
        ts = config.template_size
        w = config.encoder_width

        self.trunk = nn.Sequential(
            nn.Conv2d(config.image_channels, w, 3, stride=2, padding=1),
            nn.ReLU(),
            ResidualBlock(w),
            nn.Conv2d(w, w, 3, stride=2, padding=1),
            nn.ReLU(),
            ResidualBlock(w),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
        )
        flat = w * 16
        self.presence_head = nn.Linear(flat, k)
        self.pose_head = nn.Linear(flat, k * POSE_DIM)
        self.feature_head = nn.Linear(flat, k * d)

        # Zero-init pose deltas: initial poses come from the per-capsule bias,
        # scattering templates over the canvas before image dependence kicks in.
        nn.init.zeros_(self.pose_head.weight)
        nn.init.zeros_(self.pose_head.bias)
        pose_bias = torch.zeros(k, POSE_DIM)
        pose_bias[:, 0] = -0.5  # squashed scale ~ 0.44 canvas fraction
        pose_bias[:, 2] = 1.0
        pose_bias[:, 4:6] = (torch.rand(k, 2) * 2 - 1) * 0.8
        self.pose_bias = nn.Parameter(pose_bias)

        self.raw_templates = nn.Parameter(torch.randn(k, ts, ts) * 0.1)
        self.raw_visibilities = nn.Parameter(
            _center_bump(ts).expand(k, ts, ts).clone() + torch.randn(k, ts, ts) * 0.1
        )

        self.color_mlp = nn.Sequential(
            nn.Linear(d, 32), nn.ReLU(), nn.Linear(32, config.image_channels)
        )

    def templates(self) -> torch.Tensor:
        return torch.tanh(self.raw_templates)

    def visibilities(self) -> torch.Tensor:
        return torch.sigmoid(self.raw_visibilities)

    def decode_color(self, features: torch.Tensor) -> torch.Tensor:
        """Per-capsule color in [-1, 1], one value per image channel."""
        return torch.tanh(self.color_mlp(features))

    def forward(self, image: torch.Tensor) -> SubpartCapsules:
        cfg = self.config
        if image.dim() != 4 or image.shape[1] != cfg.image_channels or (
            image.shape[2] != cfg.image_size or image.shape[3] != cfg.image_size
        ):
            raise ValueError(
                f"expected image batch (B, {cfg.image_channels}, {cfg.image_size}, "
                f"{cfg.image_size}), got {tuple(image.shape)}"
            )
        b = image.shape[0]
        k = cfg.num_subparts

        h = self.trunk(image)
        presence = torch.sigmoid(self.presence_head(h))
        raw_pose = self.pose_head(h).view(b, k, POSE_DIM) + self.pose_bias
        pose = squash_raw_pose(raw_pose)
        features = self.feature_head(h).view(b, k, cfg.feature_dim)
        colors = self.decode_color(features)

        templates = self.templates()
        visibilities = self.visibilities()
        flat_t = templates[None].expand(b, -1, -1, -1).reshape(b * k, *templates.shape[1:])
        flat_v = visibilities[None].expand(b, -1, -1, -1).reshape(b * k, *templates.shape[1:])
        warped_t, warped_v = warp_template(
            flat_t, flat_v, pose.reshape(b * k, POSE_DIM), cfg.image_size, cfg.image_size
        )
        warped_t = warped_t.view(b, k, cfg.image_size, cfg.image_size)
        warped_v = warped_v.view(b, k, cfg.image_size, cfg.image_size)

        if cfg.use_visibility_gate:
            gated = visibility_gate(warped_t, warped_v, cfg.visibility_threshold)
        else:
            gated = warped_t

        return SubpartCapsules(
            presence=presence,
            pose=pose,
            features=features,
            colors=colors,
            templates=templates,
            visibilities=visibilities,
            warped_templates=warped_t,
            warped_visibilities=warped_v,
            gated_templates=gated,
        )


def reconstruction_loss(
    image: torch.Tensor, capsules: SubpartCapsules, sigma: float
) -> torch.Tensor:
    """Negative log-likelihood of the image under the capsule mixture.

    Per pixel, mixture weights are proportional to presence times warped
    visibility (floored and normalized over capsules); component means are
    the color-tinted gated templates with shared variance sigma**2. The
    result is averaged over batch and pixels, summed over channels.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    b, c, hh, ww = image.shape
    k = capsules.presence.shape[1]

    weight = capsules.presence[:, :, None, None] * capsules.warped_visibilities
    weight = weight + WEIGHT_FLOOR
    weight = weight / weight.sum(dim=1, keepdim=True)

    # means: (B, K, C, H, W) = color (B,K,C) x gated template (B,K,H,W)
    mean = capsules.colors[:, :, :, None, None] * capsules.gated_templates[:, :, None]
    diff = image[:, None] - mean
    log_norm = -math.log(sigma) - 0.5 * math.log(2 * math.pi)
    log_prob = (-0.5 * (diff / sigma) ** 2 + log_norm).sum(dim=2)  # (B, K, H, W)

    log_mix = torch.logsumexp(torch.log(weight) + log_prob, dim=1)  # (B, H, W)
    return -log_mix.mean()


def reconstruct(capsules: SubpartCapsules) -> torch.Tensor:
    """Posterior-mean reconstruction: mixture-weighted sum of component
    means, (B, C, H, W)."""
    weight = capsules.presence[:, :, None, None] * capsules.warped_visibilities
    weight = weight + WEIGHT_FLOOR
    weight = weight / weight.sum(dim=1, keepdim=True)
    mean = capsules.colors[:, :, :, None, None] * capsules.gated_templates[:, :, None]
    return (weight[:, :, None] * mean).sum(dim=1)


def presence_loss(presence: torch.Tensor, target_total: float) -> torch.Tensor:
    """Presence sparsity: each sample activates ``target_total`` mass, and
    activations spread evenly over capsules across the batch."""
    b, k = presence.shape
    per_sample = (presence.sum(dim=1) - target_total) ** 2
    per_capsule = (presence.sum(dim=0) - target_total * b / k) ** 2
    return per_sample.mean() + per_capsule.mean()


def concentration_loss(visibilities: torch.Tensor) -> torch.Tensor:
    """Distance-weighted visibility mass: pulls template support toward the
    center. Zero-based pixel indices against the (W/2, H/2) center."""
    k, h, w = visibilities.shape
    ii = torch.arange(h, dtype=visibilities.dtype, device=visibilities.device)
    jj = torch.arange(w, dtype=visibilities.dtype, device=visibilities.device)
    dist = torch.sqrt(
        (ii[:, None] - w / 2.0) ** 2 + (jj[None, :] - h / 2.0) ** 2
    )
    return (dist[None] * visibilities).sum()


def template_balance_loss(visibilities: torch.Tensor) -> torch.Tensor:
    """Population standard deviation of per-template visibility mass."""
    if visibilities.shape[0] < 2:
        return visibilities.new_zeros(())
    masses = visibilities.sum(dim=(-2, -1))
    return masses.std(correction=0)


@dataclass
class SubpartLossTerms:
    rec: torch.Tensor
    pres: torch.Tensor
    cen: torch.Tensor
    std: torch.Tensor
    total: torch.Tensor


def combine_subpart_terms(rec, pres, cen, std, config: TrainConfig):
    """Weighted combination of the four subpart terms."""
    for name in ("weight_recon", "weight_presence", "weight_concentration", "weight_balance"):
        if getattr(config, name) < 0:
            raise ValueError(f"{name} must be non-negative")
    return (
        config.weight_recon * rec
        + config.weight_presence * pres
        + config.weight_concentration * cen
        + config.weight_balance * std
    )


def subpart_objective(
    image: torch.Tensor, capsules: SubpartCapsules, config: TrainConfig
) -> SubpartLossTerms:
    """All four subpart losses and their weighted combination."""
    rec = reconstruction_loss(image, capsules, config.recon_sigma)
    pres = presence_loss(capsules.presence, config.presence_target)
    cen = concentration_loss(capsules.visibilities)
    std = template_balance_loss(capsules.visibilities)
    total = combine_subpart_terms(rec, pres, cen, std, config)
    return SubpartLossTerms(rec=rec, pres=pres, cen=cen, std=std, total=total)
