"""Segmentation-quality metrics.

NCD measures how concentrated each segmented part is around its own
centroid (lower is better). NME variants measure landmark consistency:
the "linear" route maps part centroids to landmarks with a least-squares
fit; the "deep" route trains a small convnet to regress landmarks directly
from (one-hot, 32x32-resized) segmentation maps.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class Landmarks:
    """Landmark coordinates in (row, col) pixels plus the normalizing
    interocular distance."""

    points: np.ndarray
    interocular: float


def part_stats(labels: np.ndarray, num_parts: int):
    """Per-part (centroid, mass) for labels in {0..num_parts}; centroid is
    None for empty parts."""
    labels = np.asarray(labels)
    ii, jj = np.indices(labels.shape)
    stats = []
    for n in range(1, num_parts + 1):
        mask = labels == n
        z = float(mask.sum())
        if z == 0:
            stats.append((None, 0.0))
            continue
        ci = float((ii * mask).sum() / z)
        cj = float((jj * mask).sum() / z)
        stats.append(((ci, cj), z))
    return stats


def ncd(labels: np.ndarray, num_parts: int) -> float:
    """Mean mass-normalized distance of part pixels to their part centroid.

    Empty parts are skipped (the average adjusts); an entirely empty
    segmentation raises.
    """
    labels = np.asarray(labels)
    ii, jj = np.indices(labels.shape)
    spreads = []
    for n in range(1, num_parts + 1):
        mask = labels == n
        z = mask.sum()
        if z == 0:
            continue
        ci = (ii * mask).sum() / z
        cj = (jj * mask).sum() / z
        dist = np.sqrt((ii - ci) ** 2 + (jj - cj) ** 2)
        spreads.append(float((dist * mask).sum() / z))
    if not spreads:
        raise ValueError("empty segmentation")
    return float(np.mean(spreads))


def nme(pred: np.ndarray, gt: Landmarks) -> float:
    """Mean landmark error normalized by interocular distance, in percent."""
    if gt.interocular == 0:
        raise ValueError("interocular distance must be nonzero")
    pred = np.asarray(pred, dtype=np.float64)
    diff = np.linalg.norm(pred - gt.points, axis=1)
    return float(100.0 * diff.mean() / gt.interocular)


# ---------------------------------------------------------------------------
# centroid -> landmark linear mapping


@dataclass
class LinearLandmarkMap:
    """Affine map from 2M part centroids to 2N landmark coordinates."""

    weights: np.ndarray  # (2M + 1, 2N), last row is the bias
    num_parts: int


def centroid_features(labels: np.ndarray, num_parts: int) -> np.ndarray:
    """Flattened part centroids; empty parts fall back to the image center."""
    labels = np.asarray(labels)
    center = ((labels.shape[0] - 1) / 2.0, (labels.shape[1] - 1) / 2.0)
    feats = []
    for centroid, _ in part_stats(labels, num_parts):
        feats.extend(centroid if centroid is not None else center)
    return np.array(feats, dtype=np.float64)


def fit_centroid_mapping(pairs, num_parts: int) -> LinearLandmarkMap:
    """Least-squares affine fit from part centroids to landmarks.

    ``pairs`` is a sequence of (labels, Landmarks). Falls back to a small
    ridge penalty if the normal equations are singular.
    """
    if not pairs:
        raise ValueError("empty training set")
    x = np.stack([centroid_features(lbl, num_parts) for lbl, _ in pairs])
    y = np.stack([lm.points.reshape(-1) for _, lm in pairs])
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    gram = xb.T @ xb
    try:
        weights = np.linalg.solve(gram, xb.T @ y)
    except np.linalg.LinAlgError:
        ridge = 1e-6 * np.eye(gram.shape[0])
        weights = np.linalg.solve(gram + ridge, xb.T @ y)
    return LinearLandmarkMap(weights=weights, num_parts=num_parts)


def predict_landmarks_linear(labels: np.ndarray, mapping: LinearLandmarkMap) -> np.ndarray:
    feats = centroid_features(labels, mapping.num_parts)
    out = np.append(feats, 1.0) @ mapping.weights
    return out.reshape(-1, 2)


# ---------------------------------------------------------------------------
# direct landmark regression from segmentation maps

PREDICTOR_ARCHS = ("2conv", "1resblock", "2resblocks")
_PREDICTOR_SIZE = 32


class _PredictorResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        out = F.relu(self.conv1(x))
        return F.relu(self.conv2(out) + x)


class LandmarkPredictor(nn.Module):
    """Shallow convnet regressing normalized landmark coordinates from a
    one-hot segmentation volume."""

    def __init__(self, arch: str, num_labels: int, num_landmarks: int):
        super().__init__()
        if arch not in PREDICTOR_ARCHS:
            raise ValueError(f"unknown architecture {arch!r}; choose from {PREDICTOR_ARCHS}")
        self.arch = arch
        width = 32
        if arch == "2conv":
            body = [
                nn.Conv2d(num_labels, width, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(width, width, 3, stride=2, padding=1),
                nn.ReLU(),
            ]
        else:
            body = [
                nn.Conv2d(num_labels, width, 3, stride=2, padding=1),
                nn.ReLU(),
                _PredictorResBlock(width),
            ]
            if arch == "2resblocks":
                body.append(_PredictorResBlock(width))
        self.body = nn.Sequential(*body, nn.AdaptiveAvgPool2d(4), nn.Flatten())
        self.head = nn.Linear(width * 16, num_landmarks * 2)
        # Predict the mean shape before training: zero weights, bias set by
        # the trainer to the mean of the training landmarks.
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        return self.head(self.body(x))


def encode_segmentation(labels: np.ndarray, num_labels: int) -> torch.Tensor:
    """One-hot over labels, then area-resized to the predictor input size."""
    t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    one_hot = F.one_hot(t, num_classes=num_labels).permute(2, 0, 1).float()
    return F.adaptive_avg_pool2d(one_hot[None], _PREDICTOR_SIZE)[0]


def train_landmark_predictor(
    pairs,
    arch: str,
    num_labels: int,
    image_size: int,
    epochs: int = 50,
    lr: float = 1e-4,
    batch_size: int = 32,
    seed: int = 0,
) -> LandmarkPredictor:
    """Train a landmark predictor with Adam and L2 regression loss.

    Deterministic given the seed. Targets are regressed in coordinates
    normalized by the image size.
    """
    if not pairs:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    num_landmarks = pairs[0][1].points.shape[0]
    model = LandmarkPredictor(arch, num_labels, num_landmarks)

    inputs = torch.stack([encode_segmentation(lbl, num_labels) for lbl, _ in pairs])
    targets = torch.stack(
        [torch.as_tensor(lm.points.reshape(-1), dtype=torch.float32) for _, lm in pairs]
    ) / image_size
    with torch.no_grad():
        model.head.bias.copy_(targets.mean(dim=0))

    optim = torch.optim.Adam(model.parameters(), lr=lr)
    n = len(pairs)
    for epoch in range(epochs):
        order = np.random.default_rng((seed, epoch)).permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            pred = model(inputs[idx])
            loss = F.mse_loss(pred, targets[idx])
            optim.zero_grad()
            loss.backward()
            optim.step()
    model.eval()
    return model


def predict_landmarks_deep(
    labels: np.ndarray, model: LandmarkPredictor, num_labels: int, image_size: int
) -> np.ndarray:
    with torch.no_grad():
        out = model(encode_segmentation(labels, num_labels)[None])[0]
    return (out.numpy().reshape(-1, 2) * image_size).astype(np.float64)


# ---------------------------------------------------------------------------
# result records


def metric_record(metric: str, split: str, value: float, config_hash: str) -> dict:
    return {"metric": metric, "split": split, "value": float(value),
            "config_hash": config_hash}


def write_metrics_json(path, records) -> None:
    Path(path).write_text(json.dumps(records, indent=2))


def append_metrics_csv(path, records) -> None:
    path = Path(path)
    fresh = not path.exists()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["metric", "split", "value", "config_hash"])
        if fresh:
            writer.writeheader()
        writer.writerows(records)
