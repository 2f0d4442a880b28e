"""Command-line entry point for the full counting pipeline.

Subcommands: gen-gt, synth, augment, train, eval, predict, ablate.
Shared flags: --manifest, --out, --seed, --config <json>, --override k=v.
Config precedence is flags > --override > config file > defaults, and the
merged result is always persisted to the output directory so every run is
reproducible from its artifacts alone.

Exit codes: 0 success, 1 validation/config error, 2 numeric failure
(non-finite loss), 3 partial per-image failures.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from . import checkpoint as ckpt
from . import evaluation, network, training
from .data import (AnnotatedImage, augment, load_image, load_manifest,
                   parse_annotation_record, write_synth_dataset)
from .density import (GaussianSpec, annotations_to_points, generate_density,
                      save_density_png)
from .errors import ConfigError, DenseCountError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_PARTIAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors, exit 1
        raise ConfigError(message)


class RunLock:
    """Exclusive ownership of an output directory for the run's duration."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / ".densecount.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(f"output directory is locked by another run: {self.path}")
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, exc_type, exc, tb):
        self.path.unlink(missing_ok=True)


def build_parser() -> _Parser:
    parser = _Parser(prog="densecount",
                     description="density-map object counting: data, training, evaluation")
    parser.add_argument("--version", action="version", version=f"densecount {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory (owned by this run)")
        p.add_argument("--config", help="JSON file with model/train/gaussian sections")
        p.add_argument("--override", action="append", default=[], metavar="K=V",
                       help="dotted config override, e.g. train.learning_rate=0.5")

    p = sub.add_parser("gen-gt", help="density-map ground truth for a manifest")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--png", action="store_true", help="also export 16-bit PNGs")

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    common(p)
    p.add_argument("--n-images", type=int, default=50)
    p.add_argument("--size", default="256x256", help="WxH")
    p.add_argument("--counts", default="5:20", help="lo:hi objects per image")

    p = sub.add_parser("augment", help="write the 18 training patches per image")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="train", choices=["train", "test", "all"])

    p = sub.add_parser("train", help="train a model on the manifest's train split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--resize", help="WxH applied before augmentation (e.g. 1024x768)")
    p.add_argument("--init", choices=["reference", "scaled"], default="reference",
                   help="weight init: 0.01 Gaussian, or fan-in scaled for small models")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resize", help="WxH applied before prediction")

    p = sub.add_parser("predict", help="density map and count for one image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="train/evaluate the four module combinations")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--init", choices=["reference", "scaled"], default="reference",
                   help="weight init: 0.01 Gaussian, or fan-in scaled for small models")
    return parser


# ---------------------------------------------------------------------------
# config assembly


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"expected WxH, got {text!r}")
    if w < 1 or h < 1:
        raise ConfigError(f"invalid size {text!r}")
    return w, h


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def effective_config(args) -> dict:
    """Merge defaults, config file and --override entries (later wins)."""
    merged: dict = {"model": {}, "train": {}, "gaussian": {}}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in loaded.items():
            merged[key] = value
    for entry in args.override:
        if "=" not in entry:
            raise ConfigError(f"override must be K=V, got {entry!r}")
        key, value = entry.split("=", 1)
        parts = key.split(".")
        target = merged
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = _coerce(value)
    merged["seed"] = args.seed
    merged["version"] = __version__
    merged["command"] = args.command
    return merged


def _model_config(merged: dict) -> network.ModelConfig:
    section = dict(merged.get("model", {}))
    if not section:
        return network.ModelConfig()
    return network.ModelConfig.from_json(json.dumps(section))


def _train_config(merged: dict, seed: int) -> training.TrainConfig:
    section = dict(merged.get("train", {}))
    gaussian = merged.get("gaussian")
    if gaussian:
        section["sigma"] = gaussian
    section.setdefault("seed", seed)
    return training.TrainConfig.from_dict(section)


def _gaussian_spec(merged: dict) -> GaussianSpec:
    return GaussianSpec(**merged.get("gaussian", {}))


def _persist_config(out_dir: Path, merged: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(json.dumps(merged, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_gt(args) -> int:
    merged = effective_config(args)
    out_dir = Path(args.out)
    spec = _gaussian_spec(merged)
    manifest_path = Path(args.manifest)
    records = json.loads(manifest_path.read_text())
    with RunLock(out_dir):
        _persist_config(out_dir, merged)
        summary, failed = [], []
        for record in records:
            image_id = Path(record["image"]).stem
            try:
                pixels = load_image(manifest_path.parent / record["image"])
                points = annotations_to_points(parse_annotation_record(record))
                dens = generate_density(points, pixels.shape[1], pixels.shape[2], spec)
                ckpt.save_tensors(out_dir / "density" / f"{image_id}.ckpt",
                                  {"density": dens.values})
                if args.png:
                    save_density_png(dens.values, out_dir / "density" / f"{image_id}.png")
                summary.append({"id": image_id, "count": dens.source_count,
                                "density_sum": dens.total})
            except (DenseCountError, OSError) as exc:
                failed.append({"id": image_id, "error": str(exc)})
        (out_dir / "summary.json").write_text(
            json.dumps({"images": summary, "failures": failed}, indent=2, sort_keys=True))
    if failed:
        print(f"{len(failed)} image(s) failed; see summary.json", file=sys.stderr)
        return EXIT_PARTIAL
    print(f"wrote {len(summary)} density maps to {out_dir / 'density'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    merged = effective_config(args)
    out_dir = Path(args.out)
    width, height = _parse_size(args.size)
    lo, hi = (int(v) for v in args.counts.split(":"))
    with RunLock(out_dir):
        _persist_config(out_dir, merged)
        manifest = write_synth_dataset(out_dir, args.n_images, width, height, (lo, hi),
                                       seed=args.seed)
    print(f"wrote {args.n_images} scenes, manifest at {manifest}")
    return EXIT_OK


def cmd_augment(args) -> int:
    merged = effective_config(args)
    out_dir = Path(args.out)
    split = None if args.split == "all" else args.split
    images = load_manifest(args.manifest, split=split)
    with RunLock(out_dir):
        _persist_config(out_dir, merged)
        patches_dir = out_dir / "patches"
        patches_dir.mkdir(parents=True, exist_ok=True)
        total = 0
        for idx, img in enumerate(images):
            for patch in augment(img, seed=training._derive_seed(args.seed, idx)):
                safe = patch.id.replace("#", "_")
                img8 = np.round(patch.pixels * 255.0).astype(np.uint8).transpose(1, 2, 0)
                Image.fromarray(img8).save(patches_dir / f"{safe}.png")
                (patches_dir / f"{safe}.json").write_text(json.dumps(
                    {"image": f"{safe}.png",
                     patch.annotations.kind: [list(e) for e in patch.annotations.entries]},
                    sort_keys=True))
                total += 1
    print(f"wrote {total} patches to {out_dir / 'patches'}")
    return EXIT_OK


def cmd_train(args) -> int:
    merged = effective_config(args)
    out_dir = Path(args.out)
    model_cfg = _model_config(merged)
    train_cfg = _train_config(merged, args.seed)
    resize = _parse_size(args.resize) if args.resize else None
    images = load_manifest(args.manifest, split="train")
    if resize:
        from .data import resize_with_annotations
        images = [resize_with_annotations(img, *resize) for img in images]
    merged["init"] = args.init
    with RunLock(out_dir):
        _persist_config(out_dir, merged)
        model = network.build_aspdnet(model_cfg, seed=train_cfg.seed, init=args.init)
        model, log = training.train(model, images, train_cfg, out_dir=out_dir,
                                    resume=args.resume)
    print(f"trained {train_cfg.epochs} epochs; final mean loss {log.losses()[-1]:.6g}")
    print(f"checkpoint at {out_dir / 'model.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    merged = effective_config(args)
    out_dir = Path(args.out)
    model = network.load_model(args.checkpoint)
    resize = _parse_size(args.resize) if args.resize else None
    with RunLock(out_dir):
        _persist_config(out_dir, merged)
        metrics = evaluation.evaluate(model, args.manifest, resize_to=resize)
        (out_dir / "metrics.json").write_text(metrics.to_json())
        (out_dir / "metrics.txt").write_text(evaluation.format_table(metrics))
    print(f"MAE {metrics.mae:.3f}  RMSE {metrics.rmse:.3f}  ({len(metrics.per_image)} images)")
    if metrics.failures:
        print(f"{len(metrics.failures)} image(s) failed; see metrics.json", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_predict(args) -> int:
    merged = effective_config(args)
    out_dir = Path(args.out)
    model = network.load_model(args.checkpoint)
    pixels = load_image(args.image)
    from .data import AnnotationSet
    img = AnnotatedImage(pixels, AnnotationSet("points", []), id=Path(args.image).stem)
    with RunLock(out_dir):
        _persist_config(out_dir, merged)
        density = evaluation.predict_density(model, img)
        save_density_png(density, out_dir / f"{img.id}_density.png")
        ckpt.save_tensors(out_dir / f"{img.id}_density.ckpt", {"density": density})
    print(f"{float(density.sum()):.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    merged = effective_config(args)
    out_dir = Path(args.out)
    base_cfg = _model_config(merged)
    train_cfg = _train_config(merged, args.seed)
    merged["init"] = args.init
    with RunLock(out_dir):
        _persist_config(out_dir, merged)
        rows = evaluation.ablation_run(args.manifest, base_cfg, train_cfg, init=args.init)
        (out_dir / "ablation.csv").write_text(evaluation.ablation_to_csv(rows))
        (out_dir / "ablation.json").write_text(json.dumps(
            [{k: row[k] for k in ("configuration", "mae", "rmse", "final_loss")}
             for row in rows], indent=2, sort_keys=True))
    for row in rows:
        print(f"{row['configuration']:<24}{row['mae']:>10.3f}{row['rmse']:>10.3f}")
    return EXIT_OK


_COMMANDS = {
    "gen-gt": cmd_gen_gt,
    "synth": cmd_synth,
    "augment": cmd_augment,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DenseCountError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
