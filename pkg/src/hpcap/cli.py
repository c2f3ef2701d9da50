"""Command-line entry points: data generation, training, evaluation, and
figure emission.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
The HPCAP_SEED environment variable overrides the configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from hpcap.config import TrainConfig
from hpcap.metrics import (
    Landmarks,
    append_metrics_csv,
    fit_centroid_mapping,
    metric_record,
    ncd,
    nme,
    predict_landmarks_deep,
    predict_landmarks_linear,
    train_landmark_predictor,
    write_metrics_json,
)
from hpcap.synth import GenSpec, generate, load_dataset, save_dataset, split

VALID_METRICS = ("ncd", "nme_l", "nme_dl")


class CliError(Exception):
    """Configuration or usage problem; exits with code 2."""


def _env_seed() -> int | None:
    raw = os.environ.get("HPCAP_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as exc:
        raise CliError(f"HPCAP_SEED must be an integer, got {raw!r}") from exc


def _write_run_manifest(out_dir: Path, command: str, config_path, seed: int,
                        config_hash: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": None if config_path is None else str(config_path),
        "out_dir": str(out_dir),
        "seed": seed,
        "config_hash": config_hash,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2))


def _hash_dict(data: dict) -> str:
    import hashlib

    canon = json.dumps(data, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    if args.spec is not None:
        try:
            spec = GenSpec.from_dict(json.loads(Path(args.spec).read_text()))
        except (ValueError, json.JSONDecodeError) as exc:
            raise CliError(f"invalid generator spec: {exc}") from exc
    else:
        spec = GenSpec()
    seed = _env_seed()
    if seed is None:
        seed = args.seed
    spec = GenSpec.from_dict({**spec.to_dict(), "seed": seed})

    out = Path(args.out)
    samples = generate(spec, args.n)
    save_dataset(samples, out, spec)
    _write_run_manifest(out, "gen-data", args.spec, seed, _hash_dict(spec.to_dict()))
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from hpcap.training import Checkpoint, train_stage1, train_stage2

    try:
        config = TrainConfig.load(args.config)
    except (ValueError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(f"invalid config: {exc}") from exc
    seed = _env_seed()
    if seed is not None:
        config = config.replace(seed=seed)

    try:
        samples = load_dataset(args.data)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc

    out = Path(args.out)
    _write_run_manifest(out, "train", args.config, config.seed, config.content_hash())

    latest = out / "checkpoints" / "latest.pt"
    if args.stage in ("1", "all"):
        result = train_stage1(config, samples, out_dir=out)
        print(f"stage 1 done at epoch {result.checkpoint.epoch}")
        ckpt = result.checkpoint
    else:
        if not latest.exists():
            raise CliError(
                f"stage 2 requires a stage-1 checkpoint at {latest}; run --stage 1 first"
            )
        ckpt = Checkpoint.load(latest)

    if args.stage in ("2", "all"):
        result = train_stage2(ckpt, config, samples, out_dir=out)
        print(f"stage 2 done at epoch {result.checkpoint.epoch}")
        ckpt = result.checkpoint

    ckpt.save(out / "final.pt")
    print(f"final checkpoint: {out / 'final.pt'}")
    return 0


def _segmentations_for(ckpt, model, config, samples):
    from hpcap.training import segmentation_maps

    return segmentation_maps(
        model, samples, config, use_parser=(ckpt.stage >= 2), seed=config.seed
    )


def cmd_eval(args) -> int:
    from hpcap.training import Checkpoint, model_from_checkpoint

    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = [m for m in metrics if m not in VALID_METRICS]
    if unknown or not metrics:
        raise CliError(
            f"unknown metric(s) {', '.join(unknown) or '(none)'}; "
            f"valid names: {', '.join(VALID_METRICS)}"
        )

    ckpt = Checkpoint.load(args.ckpt)
    model, config = model_from_checkpoint(ckpt)
    seed = _env_seed()
    if seed is not None:
        config = config.replace(seed=seed)

    try:
        samples = load_dataset(args.data)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc
    train_samples, test_samples = split(samples, 0.9, seed=config.seed)

    seg_train = _segmentations_for(ckpt, model, config, train_samples)
    seg_test = _segmentations_for(ckpt, model, config, test_samples)
    m = config.num_parts

    records = []
    for name in metrics:
        if name == "ncd":
            vals = []
            for seg in seg_test:
                try:
                    vals.append(ncd(seg, m))
                except ValueError:
                    pass
            if not vals:
                raise RuntimeError("every test segmentation is empty")
            value = float(np.mean(vals))
        elif name == "nme_l":
            pairs = [
                (seg, Landmarks(s.landmarks, s.interocular))
                for seg, s in zip(seg_train, train_samples)
            ]
            mapping = fit_centroid_mapping(pairs, m)
            value = float(
                np.mean(
                    [
                        nme(predict_landmarks_linear(seg, mapping),
                            Landmarks(s.landmarks, s.interocular))
                        for seg, s in zip(seg_test, test_samples)
                    ]
                )
            )
        else:  # nme_dl
            pairs = [
                (seg, Landmarks(s.landmarks, s.interocular))
                for seg, s in zip(seg_train, train_samples)
            ]
            predictor = train_landmark_predictor(
                pairs, args.nme_dl_arch, m + 1, config.image_size, seed=config.seed
            )
            value = float(
                np.mean(
                    [
                        nme(
                            predict_landmarks_deep(seg, predictor, m + 1, config.image_size),
                            Landmarks(s.landmarks, s.interocular),
                        )
                        for seg, s in zip(seg_test, test_samples)
                    ]
                )
            )
        records.append(metric_record(name, "test", value, ckpt.config_hash))
        print(f"{name}: {value:.4f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_json(out / "metrics.json", records)
    append_metrics_csv(out / "metrics.csv", records)
    _write_run_manifest(out, "eval", None, config.seed, ckpt.config_hash)
    return 0


def cmd_viz(args) -> int:
    from hpcap.training import Checkpoint, model_from_checkpoint
    from hpcap import viz

    ckpt = Checkpoint.load(args.ckpt)
    model, config = model_from_checkpoint(ckpt)
    try:
        samples = load_dataset(args.data)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.what == "templates":
        path = viz.save_template_grid(model, out / "templates.png")
        print(f"wrote {path}")
    elif args.what == "recon":
        path = viz.save_reconstructions(model, samples, config, out / "reconstructions.png")
        print(f"wrote {path}")
    elif args.what == "segmentation":
        segs = _segmentations_for(ckpt, model, config, samples[:8])
        path = viz.save_segmentation_overlays(samples[:8], segs, out / "segmentation.png")
        print(f"wrote {path}")
    else:  # hierarchy
        paths = viz.save_hierarchy_panels(model, samples, config, out)
        print(f"wrote {len(paths)} hierarchy panels to {out}")
    _write_run_manifest(out, "viz", None, config.seed, ckpt.config_hash)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hpcap",
        description="Unsupervised subpart/part hierarchy discovery toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--spec", default=None, help="generator spec JSON (optional)")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the model")
    p.add_argument("--config", required=True, help="TrainConfig JSON")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default="ncd,nme_l,nme_dl",
                   help=f"comma-separated; valid: {', '.join(VALID_METRICS)}")
    p.add_argument("--out", required=True)
    p.add_argument("--nme-dl-arch", choices=("2conv", "1resblock", "2resblocks"),
                   default="1resblock")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="emit figures")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--what", choices=("templates", "segmentation", "hierarchy", "recon"),
                   required=True)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
