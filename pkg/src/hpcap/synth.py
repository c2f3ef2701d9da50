"""Procedural compositional-object dataset.

Each sample composes five sprites (an elliptical contour ring, two eye
blobs, a triangular nose, a bar mouth) on a face-like canvas. Every sprite
gets independent scale/rotation/translation jitter, and the whole object a
shared global affine. Ground truth comes for free: a foreground mask, one
binary mask per sprite, and five landmarks (eye centers, nose tip, mouth
corners) computed analytically from the same transforms used to render.

Generation is a pure function of (seed, sample index), so datasets are
reproducible and generation parallelizes trivially.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

PART_NAMES = ("contour", "left_eye", "right_eye", "nose", "mouth")

# Base layout in canvas-fraction coordinates, (row, col) with (0.5, 0.5) the
# canvas center. Chosen so sprites stay disjoint under the default jitter.
_FACE_CENTER = (0.50, 0.50)
_FACE_SEMI = (0.34, 0.27)  # (row, col) semi-axes
_RING_INNER = 0.86  # ring band between 0.86 and 1.0 of the ellipse
_LEFT_EYE = (0.38, 0.38)
_RIGHT_EYE = (0.38, 0.62)
_EYE_RADIUS = 0.05
_NOSE_APEX = (0.46, 0.50)
_NOSE_BASE_ROW = 0.60
_NOSE_HALF_WIDTH = 0.06
_MOUTH_CENTER = (0.72, 0.50)
_MOUTH_HALF_LEN = 0.12
_MOUTH_HALF_HEIGHT = 0.03


@dataclass
class GenSpec:
    """Generator parameters. Jitter ranges are validated so no sprite can
    leave the canvas."""

    canvas_size: int = 64
    seed: int = 0
    part_scale_jitter: float = 0.08
    part_rotation_jitter: float = 0.12  # radians
    part_translation_jitter: float = 1.5  # pixels
    global_scale_jitter: float = 0.08
    global_rotation_jitter: float = 0.25  # radians
    global_translation_jitter: float = 3.0  # pixels
    background: float = -1.0
    face_intensity: float = -0.1
    ring_intensity: float = 0.35
    eye_intensity: float = 0.9
    nose_intensity: float | None = 0.45
    mouth_intensity: float | None = 0.65

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        s = self.canvas_size
        # farthest sprite point from the canvas center, in canvas fraction
        reach = max(
            max(_FACE_SEMI),
            np.hypot(_LEFT_EYE[0] - 0.5, _LEFT_EYE[1] - 0.5) + _EYE_RADIUS,
            np.hypot(_MOUTH_CENTER[0] - 0.5, _MOUTH_CENTER[1] - 0.5) + _MOUTH_HALF_LEN,
            np.hypot(_NOSE_BASE_ROW - 0.5, _NOSE_HALF_WIDTH) + 0.02,
        )
        worst = (
            reach * (1 + self.part_scale_jitter) + self.part_translation_jitter / s
        ) * (1 + self.global_scale_jitter) + self.global_translation_jitter / s
        if worst > 0.5:
            raise ValueError(
                f"jitter ranges push sprites off canvas (worst-case reach "
                f"{worst:.3f} > 0.5 canvas fractions)"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "GenSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown generator key(s): {', '.join(unknown)}")
        return cls(**data)


@dataclass
class SyntheticSample:
    image: np.ndarray  # (1, H, W) float32 in [-1, 1]
    foreground: np.ndarray  # (H, W) uint8
    part_masks: np.ndarray  # (5, H, W) uint8, disjoint, inside foreground
    landmarks: np.ndarray  # (5, 2) float64 (row, col) pixels
    interocular: float
    global_affine: np.ndarray  # 3x3, maps pre-global (row, col, 1) pixels
    class_id: int = 0


def _affine(rotation: float, scale: float, center, translation) -> np.ndarray:
    """3x3 (row, col) affine: rotate+scale about ``center`` then translate."""
    c, s = np.cos(rotation), np.sin(rotation)
    rot = scale * np.array([[c, -s], [s, c]])
    center = np.asarray(center, dtype=np.float64)
    shift = center + np.asarray(translation, dtype=np.float64) - rot @ center
    out = np.eye(3)
    out[:2, :2] = rot
    out[:2, 2] = shift
    return out


def _apply(mat: np.ndarray, points: np.ndarray) -> np.ndarray:
    pts = np.atleast_2d(points)
    return pts @ mat[:2, :2].T + mat[:2, 2]


def _sample_transforms(spec: GenSpec, rng: np.random.Generator):
    s = spec.canvas_size
    center = ((s - 1) / 2.0, (s - 1) / 2.0)
    part_mats = {}
    for name in ("face",) + PART_NAMES[1:]:
        rot = rng.uniform(-spec.part_rotation_jitter, spec.part_rotation_jitter)
        scale = 1.0 + rng.uniform(-spec.part_scale_jitter, spec.part_scale_jitter)
        trans = rng.uniform(
            -spec.part_translation_jitter, spec.part_translation_jitter, size=2
        )
        anchor = {
            "face": _FACE_CENTER,
            "left_eye": _LEFT_EYE,
            "right_eye": _RIGHT_EYE,
            "nose": ((_NOSE_APEX[0] + _NOSE_BASE_ROW) / 2, _NOSE_APEX[1]),
            "mouth": _MOUTH_CENTER,
        }[name]
        anchor_px = (anchor[0] * s, anchor[1] * s)
        part_mats[name] = _affine(rot, scale, anchor_px, trans)
    g_rot = rng.uniform(-spec.global_rotation_jitter, spec.global_rotation_jitter)
    g_scale = 1.0 + rng.uniform(-spec.global_scale_jitter, spec.global_scale_jitter)
    g_trans = rng.uniform(
        -spec.global_translation_jitter, spec.global_translation_jitter, size=2
    )
    global_mat = _affine(g_rot, g_scale, center, g_trans)
    return part_mats, global_mat


def _render_sample(spec: GenSpec, part_mats: dict, global_mat: np.ndarray,
                   class_id: int) -> SyntheticSample:
    s = spec.canvas_size
    ii, jj = np.indices((s, s)).astype(np.float64)
    pix = np.stack([ii.ravel(), jj.ravel()], axis=1)
    inv_global = np.linalg.inv(global_mat)
    pre_global = _apply(inv_global, pix)

    def local_coords(name):
        local = _apply(np.linalg.inv(part_mats[name]), pre_global)
        return local[:, 0].reshape(s, s) / s, local[:, 1].reshape(s, s) / s

    r, c = local_coords("face")
    ellipse_q = ((r - _FACE_CENTER[0]) / _FACE_SEMI[0]) ** 2 + (
        (c - _FACE_CENTER[1]) / _FACE_SEMI[1]
    ) ** 2
    face = ellipse_q <= 1.0
    ring = face & (ellipse_q >= _RING_INNER**2)

    def eye(center_rc, name):
        r_, c_ = local_coords(name)
        return (r_ - center_rc[0]) ** 2 + (c_ - center_rc[1]) ** 2 <= _EYE_RADIUS**2

    left_eye = eye(_LEFT_EYE, "left_eye")
    right_eye = eye(_RIGHT_EYE, "right_eye")

    r, c = local_coords("nose")
    height = _NOSE_BASE_ROW - _NOSE_APEX[0]
    frac = (r - _NOSE_APEX[0]) / height
    nose = (frac >= 0) & (frac <= 1) & (
        np.abs(c - _NOSE_APEX[1]) <= frac * _NOSE_HALF_WIDTH
    )
    if spec.nose_intensity is None:
        nose = np.zeros_like(nose)

    r, c = local_coords("mouth")
    mouth = (np.abs(r - _MOUTH_CENTER[0]) <= _MOUTH_HALF_HEIGHT) & (
        np.abs(c - _MOUTH_CENTER[1]) <= _MOUTH_HALF_LEN
    )
    if spec.mouth_intensity is None:
        mouth = np.zeros_like(mouth)

    foreground = face
    # priority: eyes > nose > mouth > ring; everything clipped to the face
    left_eye &= foreground
    right_eye &= foreground
    nose &= foreground & ~left_eye & ~right_eye
    mouth &= foreground & ~left_eye & ~right_eye & ~nose
    ring &= foreground & ~left_eye & ~right_eye & ~nose & ~mouth

    image = np.full((s, s), spec.background, dtype=np.float32)
    image[face] = spec.face_intensity
    image[ring] = spec.ring_intensity
    if spec.nose_intensity is not None:
        image[nose] = spec.nose_intensity
    if spec.mouth_intensity is not None:
        image[mouth] = spec.mouth_intensity
    image[left_eye] = spec.eye_intensity
    image[right_eye] = spec.eye_intensity

    def landmark(name, point_frac):
        base = np.array([point_frac[0] * s, point_frac[1] * s])
        return _apply(global_mat, _apply(part_mats[name], base))[0]

    mouth_left = (_MOUTH_CENTER[0], _MOUTH_CENTER[1] - _MOUTH_HALF_LEN)
    mouth_right = (_MOUTH_CENTER[0], _MOUTH_CENTER[1] + _MOUTH_HALF_LEN)
    landmarks = np.stack(
        [
            landmark("left_eye", _LEFT_EYE),
            landmark("right_eye", _RIGHT_EYE),
            landmark("nose", _NOSE_APEX),
            landmark("mouth", mouth_left),
            landmark("mouth", mouth_right),
        ]
    )
    interocular = float(np.linalg.norm(landmarks[0] - landmarks[1]))

    part_masks = np.stack([ring, left_eye, right_eye, nose, mouth]).astype(np.uint8)
    return SyntheticSample(
        image=image[None],
        foreground=foreground.astype(np.uint8),
        part_masks=part_masks,
        landmarks=landmarks,
        interocular=interocular,
        global_affine=global_mat,
        class_id=class_id,
    )


def generate_sample(spec: GenSpec, index: int, class_id: int = 0) -> SyntheticSample:
    rng = np.random.default_rng((spec.seed, index))
    part_mats, global_mat = _sample_transforms(spec, rng)
    return _render_sample(spec, part_mats, global_mat, class_id)


def generate(spec: GenSpec, n: int) -> list[SyntheticSample]:
    """Generate ``n`` samples deterministically from the spec seed."""
    spec.validate()
    return [generate_sample(spec, i) for i in range(n)]


def generate_two_class(
    spec_a: GenSpec, spec_b: GenSpec, n: int
) -> list[SyntheticSample]:
    """Interleave two sprite-variant generators into one labeled dataset.

    Both specs must share the canvas size; sample i uses the jitter stream of
    its own spec, so classes differ only in the configured sprites.
    """
    if spec_a.canvas_size != spec_b.canvas_size:
        raise ValueError("class specs must share canvas size")
    out = []
    for i in range(n):
        spec, cid = (spec_a, 0) if i % 2 == 0 else (spec_b, 1)
        out.append(generate_sample(spec, i, class_id=cid))
    return out


# ---------------------------------------------------------------------------
# on-disk format


def _save_indexed_png(arr: np.ndarray, path) -> None:
    """Indexed PNG with a distinct palette entry per label (PIL merges
    indices that share a palette color, so the palette must be explicit)."""
    img = Image.fromarray(arr.astype(np.uint8), mode="P")
    palette = [0, 0, 0]
    for n in range(1, 256):
        palette.extend([(37 * n) % 256, (101 * n) % 256, (197 * n) % 256])
    img.putpalette(palette)
    img.save(path)


def save_dataset(samples: list[SyntheticSample], out_dir, spec: GenSpec | None) -> None:
    """Write PNG images/masks, JSON landmarks, and a manifest."""
    out = Path(out_dir)
    for sub in ("images", "foregrounds", "parts", "landmarks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    files = []
    for i, sample in enumerate(samples):
        stem = f"sample_{i:05d}"
        img_u8 = np.clip((sample.image[0] + 1.0) * 127.5, 0, 255).astype(np.uint8)
        Image.fromarray(img_u8, mode="L").save(out / "images" / f"{stem}.png")
        Image.fromarray((sample.foreground * 255).astype(np.uint8), mode="L").save(
            out / "foregrounds" / f"{stem}.png"
        )
        label_img = np.zeros_like(sample.foreground)
        for p in range(sample.part_masks.shape[0]):
            label_img[sample.part_masks[p] > 0] = p + 1
        _save_indexed_png(label_img, out / "parts" / f"{stem}.png")
        (out / "landmarks" / f"{stem}.json").write_text(
            json.dumps(
                {
                    "points": sample.landmarks.tolist(),
                    "interocular": sample.interocular,
                    "global_affine": sample.global_affine.tolist(),
                    "class_id": sample.class_id,
                }
            )
        )
        files.append(
            {
                "image": f"images/{stem}.png",
                "foreground": f"foregrounds/{stem}.png",
                "parts": f"parts/{stem}.png",
                "landmarks": f"landmarks/{stem}.json",
            }
        )
    manifest = {
        "num_samples": len(samples),
        "num_parts": len(PART_NAMES),
        "part_names": list(PART_NAMES),
        "genspec": spec.to_dict() if spec is not None else None,
        "files": files,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(path) -> list[SyntheticSample]:
    """Load a dataset directory written by ``save_dataset``.

    Raises FileNotFoundError naming the first missing file.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for entry in manifest["files"]:
        for key in ("image", "foreground", "parts", "landmarks"):
            if not (root / entry[key]).exists():
                raise FileNotFoundError(f"missing {key} file: {root / entry[key]}")
        img = np.asarray(Image.open(root / entry["image"]), dtype=np.float32)
        image = (img / 127.5 - 1.0)[None]
        foreground = (np.asarray(Image.open(root / entry["foreground"])) > 127).astype(
            np.uint8
        )
        labels = np.asarray(Image.open(root / entry["parts"]))
        num_parts = manifest["num_parts"]
        part_masks = np.stack(
            [(labels == p + 1).astype(np.uint8) for p in range(num_parts)]
        )
        meta = json.loads((root / entry["landmarks"]).read_text())
        samples.append(
            SyntheticSample(
                image=image,
                foreground=foreground,
                part_masks=part_masks,
                landmarks=np.array(meta["points"], dtype=np.float64),
                interocular=float(meta["interocular"]),
                global_affine=np.array(meta["global_affine"], dtype=np.float64),
                class_id=int(meta.get("class_id", 0)),
            )
        )
    return samples


def split(
    samples: list[SyntheticSample], ratio: float = 0.9, seed: int = 0
) -> tuple[list[SyntheticSample], list[SyntheticSample]]:
    """Seeded shuffle into train/test; every sample lands in exactly one."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(len(samples))
    n_train = int(round(ratio * len(samples)))
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    if not test:
        raise ValueError("split produced an empty test set")
    return train, test
