"""Two-stage training, checkpointing, evaluation helpers, and the
recognition attention probe.

Stage 1 trains the subpart autoencoder alone until its objective converges.
Stage 2 continues jointly with the part parser: every batch is re-clustered
into pseudo part assignments (identity-stabilized by EMA prototypes) that
supervise the relationship matrix, alongside the shape-consistency and
relation-entropy terms. One optimizer owns all parameters across both
stages, so stage 2 continues with warm Adam state.

All randomness is derived structurally from (seed, epoch, step), which makes
runs bit-reproducible and resumable mid-training.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from hpcap.config import TrainConfig
from hpcap.parsing import (
    PartParser,
    aggregate_parts,
    part_objective,
    pseudo_relationships,
    segment,
)
from hpcap.subpart import SubpartAutoencoder, subpart_objective
from hpcap.synth import SyntheticSample


class PartDiscoveryModel(nn.Module):
    """Subpart autoencoder plus part parser."""

    def __init__(self, config: TrainConfig):
        super().__init__()
        self.config = config
        self.autoencoder = SubpartAutoencoder(config)
        self.parser = PartParser(config)

    def forward(self, image):
        capsules = self.autoencoder(image)
        return capsules, self.parser(capsules)


def build_model(config: TrainConfig) -> PartDiscoveryModel:
    """Seeded model construction; same config and seed give identical weights."""
    torch.manual_seed(config.seed)
    return PartDiscoveryModel(config)


def _encode_tensors(obj):
    """Tensors -> numpy payloads so pickling is byte-deterministic (torch's
    own serialization embeds unstable storage metadata)."""
    if isinstance(obj, torch.Tensor):
        return {
            "__tensor__": str(obj.dtype),
            "data": obj.detach().cpu().contiguous().numpy(),
        }
    if isinstance(obj, dict):
        return {k: _encode_tensors(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        encoded = [_encode_tensors(v) for v in obj]
        return encoded if isinstance(obj, list) else tuple(encoded)
    return obj


def _decode_tensors(obj):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            dtype = getattr(torch, obj["__tensor__"].removeprefix("torch."))
            return torch.from_numpy(obj["data"].copy()).to(dtype)
        return {k: _decode_tensors(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        decoded = [_decode_tensors(v) for v in obj]
        return decoded if isinstance(obj, list) else tuple(decoded)
    return obj


@dataclass
class Checkpoint:
    model_state: dict
    optimizer_state: dict
    prototypes: np.ndarray | None
    config: dict
    config_hash: str
    epoch: int  # cumulative epochs finished (stages share the counter)
    stage: int
    torch_rng_state: torch.Tensor

    def save(self, path) -> None:
        import pickle

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = _encode_tensors(dataclasses.asdict(self))
        path.write_bytes(pickle.dumps(payload, protocol=4))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        import pickle

        data = _decode_tensors(pickle.loads(Path(path).read_bytes()))
        return cls(**data)


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    """Bitwise equality of every tensor and field."""

    def tensors_equal(da, db):
        if da.keys() != db.keys():
            return False
        for key, va in da.items():
            vb = db[key]
            if isinstance(va, torch.Tensor):
                if not torch.equal(va, vb):
                    return False
            elif isinstance(va, dict):
                if not tensors_equal(va, vb):
                    return False
            elif isinstance(va, (list, tuple)):
                if not tensors_equal(dict(enumerate(va)), dict(enumerate(vb))):
                    return False
            elif isinstance(va, np.ndarray):
                if not np.array_equal(va, vb):
                    return False
            elif va != vb:
                return False
        return True

    if (a.prototypes is None) != (b.prototypes is None):
        return False
    if a.prototypes is not None and not np.array_equal(a.prototypes, b.prototypes):
        return False
    return (
        tensors_equal(a.model_state, b.model_state)
        and tensors_equal(a.optimizer_state, b.optimizer_state)
        and a.config == b.config
        and a.config_hash == b.config_hash
        and a.epoch == b.epoch
        and a.stage == b.stage
        and torch.equal(a.torch_rng_state, b.torch_rng_state)
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[PartDiscoveryModel, TrainConfig]:
    config = TrainConfig.from_dict(ckpt.config)
    model = build_model(config)
    model.load_state_dict(ckpt.model_state)
    return model, config


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]


def images_tensor(samples: list[SyntheticSample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng((seed, epoch)).permutation(n)


def _kmeans_seed(seed: int, epoch: int, step: int) -> int:
    return (seed * 100003 + epoch * 1009 + step) % (2**31)


def _f(value: torch.Tensor) -> float:
    return float(value.detach())


class _RunLog:
    """config.json + logs/metrics.csv + checkpoints/ inside a run directory."""

    def __init__(self, out_dir, config: TrainConfig):
        self.root = Path(out_dir) if out_dir is not None else None
        if self.root is None:
            return
        (self.root / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.root / "logs").mkdir(exist_ok=True)
        (self.root / "figures").mkdir(exist_ok=True)
        config.save(self.root / "config.json")
        self.csv_path = self.root / "logs" / "metrics.csv"
        if not self.csv_path.exists():
            with self.csv_path.open("w", newline="") as fh:
                csv.writer(fh).writerow(["stage", "epoch", "loss", "terms"])

    def log_epoch(self, stage: int, epoch: int, loss: float, terms: dict) -> None:
        if self.root is None:
            return
        with self.csv_path.open("a", newline="") as fh:
            csv.writer(fh).writerow([stage, epoch, f"{loss:.6f}", json.dumps(terms)])

    def save_checkpoint(self, ckpt: Checkpoint) -> None:
        if self.root is None:
            return
        ckpt.save(self.root / "checkpoints" / f"epoch_{ckpt.epoch}.pt")
        ckpt.save(self.root / "checkpoints" / "latest.pt")


def _nan_abort(out_dir, batch, model, stage: int, epoch: int, step: int):
    detail = f"stage {stage} epoch {epoch} step {step}"
    dump = None
    if out_dir is not None:
        dump = Path(out_dir) / "nan_dump.pt"
        torch.save(
            {"batch": batch, "model_state": model.state_dict(), "where": detail}, dump
        )
    raise RuntimeError(
        f"non-finite loss at {detail}"
        + (f"; offending batch dumped to {dump}" if dump else "")
    )


def _make_checkpoint(model, optimizer, prototypes, config, epoch, stage) -> Checkpoint:
    return Checkpoint(
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_state=optimizer.state_dict(),
        prototypes=None if prototypes is None else prototypes.copy(),
        config=config.to_dict(),
        config_hash=config.content_hash(),
        epoch=epoch,
        stage=stage,
        torch_rng_state=torch.get_rng_state(),
    )


def _run_stage(
    model: PartDiscoveryModel,
    optimizer,
    config: TrainConfig,
    samples: list[SyntheticSample],
    stage: int,
    start_epoch: int,
    max_epochs: int,
    prototypes,
    log: _RunLog,
) -> TrainResult:
    images = images_tensor(samples)
    n = len(samples)
    history: list[dict] = []
    prev_loss = None
    stall = 0

    epoch = start_epoch
    for local_epoch in range(max_epochs):
        epoch = start_epoch + local_epoch
        order = _epoch_order(config.seed, epoch, n)
        epoch_terms = []
        for step, start in enumerate(range(0, n, config.batch_size)):
            batch = images[order[start : start + config.batch_size]]
            capsules = model.autoencoder(batch)
            sub = subpart_objective(batch, capsules, config)
            terms = {
                "rec": _f(sub.rec), "pres": _f(sub.pres),
                "cen": _f(sub.cen), "std": _f(sub.std),
            }
            loss = sub.total
            if stage == 2:
                parts = model.parser(capsules)
                pseudo, prototypes = pseudo_relationships(
                    capsules,
                    config.num_parts,
                    seed=_kmeans_seed(config.seed, epoch, step),
                    prototypes=prototypes,
                    downsample=config.cluster_downsample,
                    presence_min=config.cluster_presence_min,
                    prototype_decay=config.prototype_decay,
                )
                part = part_objective(parts, pseudo.assignments, config)
                terms.update(
                    cls=_f(part.cls), silh=_f(part.silh), rela=_f(part.rela)
                )
                loss = loss + part.total

            if not torch.isfinite(loss):
                _nan_abort(log.root, batch, model, stage, epoch, step)

            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
            optimizer.step()
            terms["total"] = _f(loss)
            epoch_terms.append(terms)

        mean_terms = {
            key: float(np.mean([t[key] for t in epoch_terms]))
            for key in epoch_terms[0]
        }
        epoch_loss = mean_terms["total"]
        history.append({"stage": stage, "epoch": epoch, **mean_terms})
        log.log_epoch(stage, epoch, epoch_loss, mean_terms)
        ckpt = _make_checkpoint(model, optimizer, prototypes, config, epoch + 1, stage)
        log.save_checkpoint(ckpt)

        if prev_loss is not None:
            rel = (prev_loss - epoch_loss) / max(abs(prev_loss), 1e-12)
            stall = stall + 1 if rel < config.convergence_rel_tol else 0
            if stall >= config.convergence_patience:
                break
        prev_loss = epoch_loss

    final_epoch = epoch + 1 if max_epochs > 0 else start_epoch
    ckpt = _make_checkpoint(model, optimizer, prototypes, config, final_epoch, stage)
    return TrainResult(checkpoint=ckpt, history=history)


def train_stage1(
    config: TrainConfig,
    samples: list[SyntheticSample],
    out_dir=None,
    resume: Checkpoint | None = None,
    epochs: int | None = None,
) -> TrainResult:
    """Train the subpart objective until convergence or the epoch cap."""
    if resume is None:
        model = build_model(config)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        start_epoch = 0
        prototypes = None
    else:
        model, _ = model_from_checkpoint(resume)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        optimizer.load_state_dict(resume.optimizer_state)
        torch.set_rng_state(resume.torch_rng_state)
        start_epoch = resume.epoch
        prototypes = resume.prototypes
    log = _RunLog(out_dir, config)
    model.train()
    cap = config.stage1_epochs if epochs is None else epochs
    return _run_stage(
        model, optimizer, config, samples, 1, start_epoch, cap, prototypes, log
    )


def train_stage2(
    checkpoint: Checkpoint,
    config: TrainConfig,
    samples: list[SyntheticSample],
    out_dir=None,
    epochs: int | None = None,
) -> TrainResult:
    """Joint refinement of the subpart and part objectives."""
    model, _ = model_from_checkpoint(checkpoint)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    optimizer.load_state_dict(checkpoint.optimizer_state)
    torch.set_rng_state(checkpoint.torch_rng_state)
    log = _RunLog(out_dir, config)
    model.train()
    cap = config.stage2_epochs if epochs is None else epochs
    return _run_stage(
        model, optimizer, config, samples, 2, checkpoint.epoch, cap,
        checkpoint.prototypes, log,
    )


# ---------------------------------------------------------------------------
# evaluation helpers


@torch.no_grad()
def segmentation_maps(
    model: PartDiscoveryModel,
    samples: list[SyntheticSample],
    config: TrainConfig,
    use_parser: bool = True,
    prototypes: np.ndarray | None = None,
    seed: int = 0,
) -> list[np.ndarray]:
    """Segmentation per sample, from parser relationships or, for a stage-1
    model, from per-batch pseudo assignments (prototype-matched across
    batches so part identities stay consistent over the dataset)."""
    model.eval()
    images = images_tensor(samples)
    out: list[np.ndarray] = []
    for step, start in enumerate(range(0, len(samples), config.batch_size)):
        batch = images[start : start + config.batch_size]
        capsules = model.autoencoder(batch)
        if use_parser:
            visibilities = model.parser(capsules).part_visibilities
        else:
            pseudo, prototypes = pseudo_relationships(
                capsules,
                config.num_parts,
                seed=_kmeans_seed(seed, 0, step),
                prototypes=prototypes,
                downsample=config.cluster_downsample,
                presence_min=config.cluster_presence_min,
                prototype_decay=0.5,  # eval-time anchors adapt fast
            )
            _, visibilities = aggregate_parts(capsules, pseudo.assignments)
        for b in range(batch.shape[0]):
            fg = torch.from_numpy(samples[start + b].foreground)
            labels = segment(visibilities[b], fg, config.segment_min_visibility)
            out.append(labels.numpy())
    model.train()
    return out


@torch.no_grad()
def mean_relation_entropy(
    model: PartDiscoveryModel, samples: list[SyntheticSample], config: TrainConfig
) -> float:
    """Mean entropy of the relationship columns over a dataset."""
    from hpcap.parsing import relation_entropy_loss

    model.eval()
    images = images_tensor(samples)
    vals = []
    for start in range(0, len(samples), config.batch_size):
        batch = images[start : start + config.batch_size]
        _, parts = model(batch)
        vals.append(float(relation_entropy_loss(parts.relationships)))
    model.train()
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# recognition attention probe


class AttentionProbe(nn.Module):
    """Linear classifier over per-capsule parameter vectors, each scaled by a
    trainable non-negative attention weight."""

    def __init__(self, num_subparts: int, per_capsule_dim: int, num_classes: int):
        super().__init__()
        # softplus(0.5413) ~ 1: attention starts neutral
        self.raw_weights = nn.Parameter(torch.full((num_subparts,), 0.5413))
        self.classifier = nn.Linear(num_subparts * per_capsule_dim, num_classes)
        nn.init.zeros_(self.classifier.bias)

    def attention(self) -> torch.Tensor:
        return F.softplus(self.raw_weights)

    def forward(self, features: torch.Tensor, weights: torch.Tensor | None = None):
        """features: (N, K, P). ``weights`` overrides the learned attention."""
        w = self.attention() if weights is None else weights
        scaled = features * w[None, :, None]
        return self.classifier(scaled.reshape(features.shape[0], -1))


@dataclass
class ProbeResult:
    weights: np.ndarray  # (K,) non-negative attention weights
    accuracy: float
    per_part_weights: np.ndarray  # (M,) weights aggregated through r
    mean_relationships: np.ndarray  # (M, K)


@torch.no_grad()
def _probe_features(model, images, config):
    capsules = model.autoencoder(images)
    feats = torch.cat(
        [capsules.presence[:, :, None], capsules.pose, capsules.features], dim=-1
    )
    relationships = model.parser(capsules).relationships
    return feats, relationships


def attention_probe(
    checkpoint: Checkpoint,
    samples: list[SyntheticSample],
    l1_weight: float | None = None,
    epochs: int = 100,
    lr: float = 0.05,
    seed: int = 0,
) -> ProbeResult:
    """Train per-capsule attention weights for classification on frozen
    capsules; report accuracy and the weights aggregated per part."""
    model, config = model_from_checkpoint(checkpoint)
    model.eval()
    labels = torch.tensor([s.class_id for s in samples], dtype=torch.long)
    num_classes = int(labels.max()) + 1
    if num_classes < 2:
        raise ValueError("attention probe needs at least two classes")
    if l1_weight is None:
        l1_weight = config.probe_l1_weight

    feats, relationships = _probe_features(model, images_tensor(samples), config)
    feats = feats.detach()

    torch.manual_seed(seed)
    probe = AttentionProbe(config.num_subparts, feats.shape[-1], num_classes)
    optimizer = torch.optim.Adam(probe.parameters(), lr=lr)
    n = feats.shape[0]
    for epoch in range(epochs):
        order = _epoch_order(seed, epoch, n)
        for start in range(0, n, 64):
            idx = order[start : start + 64]
            logits = probe(feats[idx])
            loss = F.cross_entropy(logits, labels[idx])
            loss = loss + l1_weight * probe.attention().sum()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    with torch.no_grad():
        accuracy = float((probe(feats).argmax(dim=1) == labels).float().mean())
        weights = probe.attention().numpy()
        r_mean = relationships.mean(dim=0).numpy()  # (M, K)
    per_part = (r_mean * weights[None, :]).sum(axis=1) / r_mean.sum(axis=1)
    return ProbeResult(
        weights=weights,
        accuracy=accuracy,
        per_part_weights=per_part,
        mean_relationships=r_mean,
    )
