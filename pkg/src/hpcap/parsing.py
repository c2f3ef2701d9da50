"""Assembling subpart capsules into part capsules.

A slot-attention module with learnable slots attends over the K subpart
tokens for a fixed number of iterations; a decoder head turns slot/token
affinities into the M x K relationship matrix (each subpart's distribution
over parts). Part templates and visibilities are the relationship- and
presence-weighted sums of the warped subpart quantities. Training targets
for the relationships come from K-means over translation-offset visibility
features, kept identity-stable across batches by Hungarian matching against
exponential-moving-average prototypes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans

from hpcap.config import TrainConfig
from hpcap.subpart import SubpartCapsules

LOG_FLOOR = 1e-12

# 20 visually distinct label colors for indexed-PNG palettes (label 0 black)
_PALETTE = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
    (128, 128, 0), (255, 215, 180), (0, 0, 128),
]


@dataclass
class PartCapsules:
    """relationships (B, M, K); part_templates (B, M, C, H, W);
    part_visibilities (B, M, H, W)."""

    relationships: torch.Tensor
    part_templates: torch.Tensor
    part_visibilities: torch.Tensor


@dataclass
class PseudoRelationships:
    """One-hot cluster assignments (B, M, K) and the matched centroids."""

    assignments: torch.Tensor
    centroids: np.ndarray


class SlotAttention(nn.Module):
    """Iterative attention with learnable slot initializations."""

    def __init__(self, num_slots: int, dim: int, iterations: int = 3):
        super().__init__()
        self.iterations = iterations
        self.scale = dim**-0.5
        self.slots_init = nn.Parameter(torch.randn(num_slots, dim) * 0.5)
        self.norm_input = nn.LayerNorm(dim)
        self.norm_slots = nn.LayerNorm(dim)
        self.norm_mlp = nn.LayerNorm(dim)
        self.project_q = nn.Linear(dim, dim, bias=False)
        self.project_k = nn.Linear(dim, dim, bias=False)
        self.project_v = nn.Linear(dim, dim, bias=False)
        self.gru = nn.GRUCell(dim, dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.ReLU(), nn.Linear(dim * 2, dim))

    def forward(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, n, d = tokens.shape
        tokens = self.norm_input(tokens)
        k = self.project_k(tokens)
        v = self.project_v(tokens)
        slots = self.slots_init[None].expand(b, -1, -1)
        attn = None
        for _ in range(self.iterations):
            slots_prev = slots
            q = self.project_q(self.norm_slots(slots))
            logits = torch.einsum("bmd,bkd->bmk", q, k) * self.scale
            attn = torch.softmax(logits, dim=1)  # slots compete per token
            weights = attn + 1e-8
            weights = weights / weights.sum(dim=-1, keepdim=True)
            updates = torch.einsum("bmk,bkd->bmd", weights, v)
            slots = self.gru(
                updates.reshape(-1, d), slots_prev.reshape(-1, d)
            ).view(b, -1, d)
            slots = slots + self.mlp(self.norm_mlp(slots))
        return slots, attn


class PartParser(nn.Module):
    """Maps a subpart capsule set to part capsules and relationships."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        d = config.feature_dim
        # token: presence + pose + feature + pooled 4x4 template/visibility
        token_dim = 1 + 6 + d + 32
        self.input_proj = nn.Linear(token_dim, d)
        self.slot_attention = SlotAttention(config.num_parts, d, config.slot_iterations)
        self.slot_decoder = nn.Sequential(nn.Linear(d, d), nn.ReLU(), nn.Linear(d, d))
        self.token_key = nn.Linear(d, d)

    def tokens(self, capsules: SubpartCapsules) -> torch.Tensor:
        b, k = capsules.presence.shape
        pooled_t = F.adaptive_avg_pool2d(capsules.warped_templates, 4).reshape(b, k, 16)
        pooled_v = F.adaptive_avg_pool2d(capsules.warped_visibilities, 4).reshape(b, k, 16)
        return torch.cat(
            [capsules.presence[:, :, None], capsules.pose, capsules.features,
             pooled_t, pooled_v],
            dim=-1,
        )

    def forward(self, capsules: SubpartCapsules) -> PartCapsules:
        cfg = self.config
        b, k = capsules.presence.shape
        if cfg.num_parts > k:
            raise ValueError("more parts than subparts")

        x = self.input_proj(self.tokens(capsules))
        slots, _ = self.slot_attention(x)
        q = self.slot_decoder(slots)
        key = self.token_key(x)
        logits = torch.einsum("bmd,bkd->bmk", q, key) / math.sqrt(q.shape[-1])
        relationships = torch.softmax(logits, dim=1)

        templates, visibilities = aggregate_parts(capsules, relationships)
        return PartCapsules(
            relationships=relationships,
            part_templates=templates,
            part_visibilities=visibilities,
        )


def aggregate_parts(
    capsules: SubpartCapsules, relationships: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Relationship- and presence-weighted sums of warped subpart maps."""
    weighted = relationships * capsules.presence[:, None, :]  # (B, M, K)
    colored = capsules.colors[:, :, :, None, None] * capsules.warped_templates[:, :, None]
    templates = torch.einsum("bmk,bkchw->bmchw", weighted, colored)
    visibilities = torch.einsum("bmk,bkhw->bmhw", weighted, capsules.warped_visibilities)
    return templates, visibilities


def clustering_features(capsules: SubpartCapsules, downsample: int) -> torch.Tensor:
    """Per-(sample, subpart) feature: the downsampled warped visibility map
    offset by t_x, concatenated with the same map offset by t_y."""
    b, k = capsules.presence.shape
    vis = F.adaptive_avg_pool2d(capsules.warped_visibilities, downsample)
    flat = vis.reshape(b, k, -1)
    tx = capsules.pose[:, :, 4:5]
    ty = capsules.pose[:, :, 5:6]
    return torch.cat([flat + tx, flat + ty], dim=-1)


def pseudo_relationships(
    capsules: SubpartCapsules,
    num_parts: int,
    seed: int,
    prototypes: np.ndarray | None = None,
    downsample: int = 16,
    presence_min: float = 0.1,
    prototype_decay: float = 0.99,
) -> tuple[PseudoRelationships, np.ndarray]:
    """Cluster subparts into parts and one-hot encode the assignments.

    K-means (k-means++ init, fixed seed) runs over all subparts in the batch
    whose presence exceeds ``presence_min``; every subpart then gets the label
    of its nearest centroid. Cluster identities are aligned to the running
    prototypes by minimum-cost matching so part indices stay stable across
    batches. Returns the assignments and the updated prototypes.
    """
    with torch.no_grad():
        feats = clustering_features(capsules, downsample)
    b, k, fdim = feats.shape
    x = feats.reshape(b * k, fdim).double().numpy()
    presence = capsules.presence.detach().reshape(b * k).numpy()

    pool = x[presence > presence_min]
    if np.unique(pool, axis=0).shape[0] < num_parts:
        raise ValueError("degenerate clustering")

    km = KMeans(
        n_clusters=num_parts, random_state=seed, n_init=4, max_iter=100,
        init="k-means++",
    ).fit(pool)
    labels = km.predict(x)
    centroids = km.cluster_centers_

    if prototypes is None:
        mapping = np.arange(num_parts)
    else:
        cost = np.linalg.norm(centroids[:, None] - prototypes[None], axis=-1)
        rows, cols = linear_sum_assignment(cost)
        mapping = np.empty(num_parts, dtype=np.int64)
        mapping[rows] = cols

    ordered = np.empty_like(centroids)
    ordered[mapping] = centroids
    if prototypes is None:
        updated = ordered
    else:
        updated = prototype_decay * prototypes + (1 - prototype_decay) * ordered

    labels = mapping[labels].reshape(b, k)
    one_hot = torch.zeros(b, num_parts, k)
    one_hot[
        torch.arange(b)[:, None], torch.as_tensor(labels), torch.arange(k)[None]
    ] = 1.0
    return PseudoRelationships(assignments=one_hot, centroids=ordered), updated


def classification_loss(
    relationships: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    """Cross-entropy between predicted relationships and one-hot targets,
    averaged over subparts (and batch)."""
    k = relationships.shape[-1]
    log_r = torch.log(relationships.clamp_min(LOG_FLOOR))
    per_item = -(targets * log_r).sum(dim=(-2, -1)) / k
    return per_item.mean()


def silhouette_loss(
    part_visibilities: torch.Tensor, reference: torch.Tensor | None = None
) -> torch.Tensor:
    """Per-part L2 distance to the batch-mean visibility map (detached),
    averaged over parts and batch."""
    if reference is None:
        reference = part_visibilities.mean(dim=0, keepdim=True)
    reference = reference.detach()
    diff = part_visibilities - reference
    norms = torch.sqrt((diff**2).sum(dim=(-2, -1)) + 1e-24)
    return norms.mean()


def relation_entropy_loss(relationships: torch.Tensor) -> torch.Tensor:
    """Mean entropy of each subpart's part distribution."""
    log_r = torch.log(relationships.clamp_min(LOG_FLOOR))
    ent = -(relationships * log_r).sum(dim=-2)  # (B, K) or (K,)
    return ent.mean()


@dataclass
class PartLossTerms:
    cls: torch.Tensor
    silh: torch.Tensor
    rela: torch.Tensor
    total: torch.Tensor


def combine_part_terms(cls, silh, rela, config: TrainConfig):
    for name in ("weight_cls", "weight_silhouette", "weight_entropy"):
        if getattr(config, name) < 0:
            raise ValueError(f"{name} must be non-negative")
    return (
        config.weight_cls * cls
        + config.weight_silhouette * silh
        + config.weight_entropy * rela
    )


def part_objective(
    parts: PartCapsules, targets: torch.Tensor, config: TrainConfig
) -> PartLossTerms:
    cls = classification_loss(parts.relationships, targets)
    silh = silhouette_loss(parts.part_visibilities)
    rela = relation_entropy_loss(parts.relationships)
    total = combine_part_terms(cls, silh, rela, config)
    return PartLossTerms(cls=cls, silh=silh, rela=rela, total=total)


def segment(
    part_visibilities: torch.Tensor,
    foreground: torch.Tensor,
    min_visibility: float,
) -> torch.Tensor:
    """Label each foreground pixel with its dominant part (1-based), or 0.

    Ties go to the lowest part index; pixels whose best visibility does not
    exceed ``min_visibility`` stay background.
    """
    values, index = part_visibilities.max(dim=-3)
    labels = (index + 1).long()
    labels = torch.where(values > min_visibility, labels, torch.zeros_like(labels))
    return labels * (foreground > 0).long()


def save_segmentation_png(labels: torch.Tensor, path) -> None:
    """Write a segmentation map as a single-channel indexed PNG."""
    arr = labels.detach().cpu().numpy().astype(np.uint8)
    img = Image.fromarray(arr, mode="P")
    palette = []
    for rgb in _PALETTE:
        palette.extend(rgb)
    img.putpalette(palette + [0] * (768 - len(palette)))
    img.save(path)


def load_segmentation_png(path) -> torch.Tensor:
    img = Image.open(path)
    return torch.as_tensor(np.array(img), dtype=torch.long)
