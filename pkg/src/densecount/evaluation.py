"""Count-accuracy metrics and the test-set evaluation protocol.

MAE is the mean absolute difference between predicted and true counts and
measures accuracy; RMSE is the root mean squared difference and measures
robustness to outliers. Ground-truth counts come straight from the
annotation records (exact integers), never from density-map sums, so the
metrics do not depend on any kernel-width choice.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import network as net
from .data import AnnotatedImage, load_manifest, pad_to_multiple, resize_with_annotations
from .errors import ConfigError, ContractError, DenseCountError
from .tensor import Tensor
from . import training


def mae(pred_counts, gt_counts) -> float:
    """Mean absolute count error."""
    _check_lengths(pred_counts, gt_counts)
    return float(np.mean(np.abs(np.asarray(pred_counts, dtype=np.float64)
                                - np.asarray(gt_counts, dtype=np.float64))))


def rmse(pred_counts, gt_counts) -> float:
    """Root mean squared count error."""
    _check_lengths(pred_counts, gt_counts)
    diff = np.asarray(pred_counts, dtype=np.float64) - np.asarray(gt_counts, dtype=np.float64)
    return float(math.sqrt(np.mean(diff * diff)))


def _check_lengths(pred_counts, gt_counts) -> None:
    if len(pred_counts) != len(gt_counts):
        raise ContractError(f"length mismatch: {len(pred_counts)} vs {len(gt_counts)}")
    if len(pred_counts) == 0:
        raise ContractError("metrics need at least one sample")


@dataclass
class Metrics:
    """MAE/RMSE plus the per-image (id, predicted, ground-truth) rows."""

    mae: float
    rmse: float
    per_image: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def __post_init__(self):
        if self.rmse < self.mae - 1e-9:
            raise ContractError(f"rmse {self.rmse} < mae {self.mae} violates the power-mean bound")

    @classmethod
    def from_rows(cls, rows: list, failures: list | None = None) -> "Metrics":
        preds = [r[1] for r in rows]
        gts = [r[2] for r in rows]
        return cls(mae(preds, gts), rmse(preds, gts), per_image=list(rows),
                   failures=list(failures or []))

    def to_dict(self) -> dict:
        return {"mae": self.mae, "rmse": self.rmse,
                "per_image": [{"id": i, "pred": p, "gt": g} for i, p, g in self.per_image],
                "failures": list(self.failures)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def format_table(metrics: Metrics, title: str = "evaluation") -> str:
    """Aligned-column text report, per-image rows plus the summary pair."""
    lines = [f"{title}", f"{'image':<24}{'pred':>12}{'gt':>10}"]
    for image_id, pred, gt in metrics.per_image:
        lines.append(f"{image_id:<24}{pred:>12.3f}{gt:>10.1f}")
    lines.append(f"{'MAE / RMSE':<24}{metrics.mae:>12.3f}{metrics.rmse:>10.3f}")
    return "\n".join(lines) + "\n"


def evaluate(model: net.Model, dataset, resize_to: tuple[int, int] | None = None) -> Metrics:
    """Forward every test image and compare predicted counts with truth.

    ``dataset`` is a manifest path (its "test" split is used) or a list of
    AnnotatedImage. Images are optionally resized to (width, height), then
    zero-padded to the network's downsample multiple; the prediction is
    cropped back to the content region before summing, so padding stays
    count-neutral. No augmentation at test time. Per-image errors (bad
    files, bad annotations) are collected in Metrics.failures; evaluation
    only aborts if every image fails.
    """
    if isinstance(dataset, (str, Path)):
        loaders = _manifest_loaders(Path(dataset))
    else:
        loaders = [(img.id, (lambda _img=img: _img)) for img in dataset]
    if not loaders:
        raise ConfigError("test set is empty")

    rows, failures = [], []
    for image_id, loader in loaders:
        try:
            img = loader()
            rows.append((img.id, predict_image(model, img, resize_to), float(img.count)))
        except (DenseCountError, OSError) as exc:
            failures.append({"id": image_id, "error": str(exc)})
    if not rows:
        raise ConfigError(f"every test image failed: {failures}")
    return Metrics.from_rows(rows, failures)


def _manifest_loaders(manifest_path: Path) -> list:
    """Lazy per-record loaders so one broken image cannot sink the run."""
    from .data import AnnotatedImage, load_image, parse_annotation_record

    records = json.loads(manifest_path.read_text())
    loaders = []
    for record in records:
        if record.get("split") != "test":
            continue
        image_rel = record["image"]

        def load(record=record, image_rel=image_rel):
            pixels = load_image(manifest_path.parent / image_rel)
            return AnnotatedImage(pixels, parse_annotation_record(record),
                                  id=Path(image_rel).stem)

        loaders.append((Path(image_rel).stem, load))
    return loaders


def predict_image(model: net.Model, img: AnnotatedImage,
                  resize_to: tuple[int, int] | None = None) -> float:
    """Predicted count for one image (resize rule, pad, forward, crop, sum)."""
    density = predict_density(model, img, resize_to)
    return float(density.sum())


def predict_density(model: net.Model, img: AnnotatedImage,
                    resize_to: tuple[int, int] | None = None) -> np.ndarray:
    if resize_to is not None:
        img = resize_with_annotations(img, resize_to[0], resize_to[1])
    factor = model.config.downsample_factor
    h, w = img.height, img.width
    padded = pad_to_multiple(img.pixels, factor)
    out = net.forward(model, Tensor(padded[None]))
    density = out.values[0, 0]
    return density[:math.ceil(h / factor), :math.ceil(w / factor)]


# ---------------------------------------------------------------------------
# ablation table


ABLATION_ROWS = ("Baseline", "Baseline+CBAM", "Baseline+CBAM+SPM", "ASPDNet")

_ABLATION_FLAGS = {
    "Baseline": dict(use_cbam=False, use_spm=False, use_dcm=False),
    "Baseline+CBAM": dict(use_cbam=True, use_spm=False, use_dcm=False),
    "Baseline+CBAM+SPM": dict(use_cbam=True, use_spm=True, use_dcm=False),
    "ASPDNet": dict(use_cbam=True, use_spm=True, use_dcm=True),
}


def ablation_config(base: net.ModelConfig, row: str) -> net.ModelConfig:
    """The model config for one ablation row, sharing all widths with base."""
    flags = _ABLATION_FLAGS[row]
    return net.ModelConfig(
        frontend_channels=list(base.frontend_channels),
        spm_rates=list(base.spm_rates),
        spm_branch_channels=base.spm_branch_channels,
        midend_channels=list(base.midend_channels),
        backend_channels=list(base.backend_channels),
        attention=base.attention,
        **flags,
    )


def ablation_run(dataset, base_config: net.ModelConfig, cfg: "training.TrainConfig",
                 resize_to: tuple[int, int] | None = None,
                 init: str = "reference") -> list[dict]:
    """Train and evaluate the four module combinations under identical seeds.

    Every row sees the same data order and initialisation seed, so metric
    differences are attributable to architecture alone. Returns one dict per
    row, in the fixed Baseline -> full-model order.
    """
    if isinstance(dataset, (str, Path)):
        train_images = load_manifest(dataset, split="train")
        test_images = load_manifest(dataset, split="test")
    else:
        train_images, test_images = dataset
    rows = []
    for row_name in ABLATION_ROWS:
        model = net.build_aspdnet(ablation_config(base_config, row_name), seed=cfg.seed,
                                  init=init)
        model, log = training.train(model, train_images, cfg, probe=False)
        metrics = evaluate(model, test_images, resize_to=resize_to)
        rows.append({"configuration": row_name, "mae": metrics.mae, "rmse": metrics.rmse,
                     "final_loss": log.losses()[-1], "metrics": metrics})
    return rows


def ablation_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["configuration", "mae", "rmse"])
    for row in rows:
        writer.writerow([row["configuration"], f"{row['mae']:.6f}", f"{row['rmse']:.6f}"])
    return buf.getvalue()
