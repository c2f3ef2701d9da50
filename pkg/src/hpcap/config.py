"""Training configuration, presets, and config hashing.

The default constructor mirrors the full-scale setup (75 subparts, 5 parts,
128x128 images, 40x40 templates). ``desk_config`` is a small preset sized so
the whole pipeline trains in minutes on a CPU; its loss weights are
re-balanced for the smaller template banks, since the summed concentration
and balance terms scale with capsule count and template area.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path


@dataclass
class TrainConfig:
    # model
    num_subparts: int = 75
    num_parts: int = 5
    feature_dim: int = 32
    image_size: int = 128
    image_channels: int = 1
    template_size: int = 40
    encoder_width: int = 32

    # subpart objective
    visibility_threshold: float = 0.5  # gate threshold on warped visibility
    use_visibility_gate: bool = True  # ablation switch for the hard gate
    presence_target: float = 16.0  # target total presence mass per sample
    recon_sigma: float = 0.1
    weight_recon: float = 1.0
    weight_presence: float = 1.0
    weight_concentration: float = 0.5
    weight_balance: float = 1.0

    # part objective
    weight_cls: float = 100.0
    weight_silhouette: float = 1000.0
    weight_entropy: float = 1.0
    slot_iterations: int = 3
    cluster_downsample: int = 16  # clustering feature grid (per side)
    cluster_presence_min: float = 0.1
    prototype_decay: float = 0.99

    # optimization
    batch_size: int = 32
    learning_rate: float = 1e-4
    stage1_epochs: int = 100
    stage2_epochs: int = 20
    convergence_rel_tol: float = 1e-3
    convergence_patience: int = 3
    grad_clip_norm: float = 10.0
    seed: int = 0

    # evaluation / probe
    segment_min_visibility: float = 1e-3
    probe_l1_weight: float = 1e-3

    def __post_init__(self):
        if self.num_parts > self.num_subparts:
            raise ValueError("more parts than subparts")
        if not 0.0 < self.visibility_threshold < 1.0:
            raise ValueError("visibility_threshold must be in (0, 1)")
        if self.recon_sigma <= 0:
            raise ValueError("recon_sigma must be positive")
        for name in (
            "weight_recon",
            "weight_presence",
            "weight_concentration",
            "weight_balance",
            "weight_cls",
            "weight_silhouette",
            "weight_entropy",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def content_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **kwargs) -> "TrainConfig":
        return dataclasses.replace(self, **kwargs)


def paper_config(**overrides) -> TrainConfig:
    """Full-scale preset (128x128 images, 75 subparts, 5 parts)."""
    return TrainConfig(**overrides)


def desk_config(**overrides) -> TrainConfig:
    """Small CPU-friendly preset: 64x64 images, 16 subparts, 4 parts."""
    base = dict(
        num_subparts=16,
        num_parts=4,
        feature_dim=16,
        image_size=64,
        template_size=20,
        encoder_width=32,
        presence_target=6.0,
        weight_presence=0.05,
        weight_concentration=5e-5,
        weight_balance=0.005,
        weight_cls=1.0,
        weight_silhouette=10.0,
        weight_entropy=0.1,
        batch_size=32,
        learning_rate=3e-3,
        stage1_epochs=30,
        stage2_epochs=10,
    )
    base.update(overrides)
    return TrainConfig(**base)
