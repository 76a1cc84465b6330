"""Downstream segmentation benchmark on synthetic image-mask pairs.

For each category a small encoder-decoder network with skip connections is
trained with pixelwise binary cross-entropy on the synthetic anomalous pairs,
balanced with defect-free images carrying all-zero target masks. Evaluation
reports image-level and pixel-level AUROC on a held-out labeled test set; an
image scores the maximum of its predicted map.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .core import read_image, read_mask_png
from .errors import TrainingError, ValidationError
from .maskgen import resize_bilinear
from .metrics import LabeledScores, auroc, image_auroc, pixel_auroc

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    pairs_per_category: int = 100
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 8
    input_resolution: int = 256
    seed: int = 0
    base_channels: int = 32

    def __post_init__(self):
        if self.pairs_per_category < 1 or self.batch_size < 1:
            raise ValidationError("counts must be positive")
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.learning_rate < 0:
            raise ValidationError("learning rate must be >= 0")
        if self.input_resolution < 8 or self.base_channels < 1:
            raise ValidationError("bad network configuration")

    @classmethod
    def from_file(cls, path):
        return cls(**json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SegSample:
    """One training/test item: image path, optional mask path, category."""

    image_path: str
    mask_path: str = None
    category: str = ""
    is_normal: bool = False


@dataclass(frozen=True)
class EvalReport:
    per_category: dict
    mean_image_auroc: float
    mean_pixel_auroc: float

    def __post_init__(self):
        for cat, row in self.per_category.items():
            for key in ("image_auroc", "pixel_auroc"):
                if not 0.0 <= row[key] <= 1.0:
                    raise ValidationError(f"{cat} {key}={row[key]} outside [0, 1]")

    def to_dict(self):
        return {"per_category": self.per_category,
                "mean": {"image_auroc": self.mean_image_auroc,
                         "pixel_auroc": self.mean_pixel_auroc}}


def _normals_for(normals_dir, category):
    root = Path(normals_dir)
    candidates = root / category
    base = candidates if candidates.is_dir() else root
    files = sorted(p for p in base.glob("*.png")) + sorted(p for p in base.glob("*.jpg"))
    return files


def assemble_training_set(manifest, normals_dir, cfg):
    """Build the per-category balanced training sets from masked records.

    Per category: up to ``cfg.pairs_per_category`` synthetic (image, mask)
    pairs sampled deterministically by seed (all of them, with a warning, if
    fewer exist), plus the same number of normal images that contribute
    all-zero target masks.
    """
    if normals_dir is None or not Path(normals_dir).exists():
        raise ValidationError(f"normals directory not found: {normals_dir}")
    masked = [r for r in manifest.records() if r.status == "masked"]
    if not masked:
        raise ValidationError("manifest has no masked records to train on")

    by_category = {}
    for record in masked:
        by_category.setdefault(record.category, []).append(record)

    rng = np.random.default_rng(cfg.seed)
    datasets = {}
    for category in sorted(by_category):
        records = sorted(by_category[category], key=lambda r: r.record_id)
        n = cfg.pairs_per_category
        if len(records) < n:
            log.warning("category %s has %d masked records (< %d); using all",
                        category, len(records), n)
            n = len(records)
        else:
            picks = rng.choice(len(records), size=n, replace=False)
            records = [records[i] for i in sorted(picks)]
        normals = _normals_for(normals_dir, category)
        if not normals:
            raise ValidationError(f"no normal images for category {category!r} "
                                  f"under {normals_dir}")
        idx = rng.integers(0, len(normals), size=n)
        samples = [SegSample(image_path=r.generated_image.path,
                             mask_path=r.mask_path, category=category)
                   for r in records[:n]]
        samples += [SegSample(image_path=str(normals[int(i)]), category=category,
                              is_normal=True) for i in idx]
        datasets[category] = samples
    return datasets


class SegmenterNet(nn.Module):
    """4-level encoder-decoder with skip connections and a 1-channel head."""

    def __init__(self, base_channels=32, input_resolution=256):
        super().__init__()
        self.input_resolution = input_resolution
        c = base_channels

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(inplace=True))

        self.enc1 = block(3, c)
        self.enc2 = block(c, 2 * c)
        self.enc3 = block(2 * c, 4 * c)
        self.enc4 = block(4 * c, 8 * c)
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.dec3 = block(8 * c + 4 * c, 4 * c)
        self.dec2 = block(4 * c + 2 * c, 2 * c)
        self.dec1 = block(2 * c + c, c)
        self.head = nn.Conv2d(c, 1, 1)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.enc3(self.pool(e2))
        e4 = self.enc4(self.pool(e3))
        d3 = self.dec3(torch.cat([self.up(e4), e3], dim=1))
        d2 = self.dec2(torch.cat([self.up(d3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up(d2), e1], dim=1))
        return self.head(d1)


def _load_pair(sample, res):
    _, img = read_image(sample.image_path)
    pil = Image.fromarray((img * 255).astype(np.uint8))
    img = np.asarray(pil.resize((res, res), Image.BILINEAR), dtype=np.float32) / 255.0
    if sample.mask_path:
        mask = read_mask_png(sample.mask_path).values.astype(np.uint8)
        mpil = Image.fromarray(mask * 255)
        mask = (np.asarray(mpil.resize((res, res), Image.NEAREST)) > 127)
        mask = mask.astype(np.float32)
    else:
        mask = np.zeros((res, res), dtype=np.float32)
    return img.transpose(2, 0, 1), mask[None]


def train_segmenter(samples, cfg, artifacts_dir=None):
    """Train the segmenter on one category's samples.

    Returns (model, loss_curve); the curve holds one mean loss per epoch and
    is persisted (with the model weights) when an artifacts directory is
    given. Training is seeded and raises on non-finite loss.
    """
    if not samples:
        raise ValidationError("empty training set")
    torch.manual_seed(cfg.seed)
    model = SegmenterNet(base_channels=cfg.base_channels,
                         input_resolution=cfg.input_resolution)
    loss_curve = []
    if cfg.epochs > 0:
        images, masks = [], []
        for sample in samples:
            x, y = _load_pair(sample, cfg.input_resolution)
            images.append(x)
            masks.append(y)
        x_all = torch.from_numpy(np.stack(images))
        y_all = torch.from_numpy(np.stack(masks))
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        criterion = nn.BCEWithLogitsLoss()
        order_rng = np.random.default_rng(cfg.seed)
        model.train()
        for epoch in range(cfg.epochs):
            order = order_rng.permutation(len(samples))
            epoch_losses = []
            for start in range(0, len(samples), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                optimizer.zero_grad()
                logits = model(x_all[idx])
                loss = criterion(logits, y_all[idx])
                loss.backward()
                optimizer.step()
                epoch_losses.append(float(loss.detach()))
            mean_loss = float(np.mean(epoch_losses))
            if not np.isfinite(mean_loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            loss_curve.append(mean_loss)
    model.eval()
    if artifacts_dir is not None:
        art = Path(artifacts_dir)
        art.mkdir(parents=True, exist_ok=True)
        torch.save(model.state_dict(), art / "segmenter.pt")
        (art / "loss_curve.json").write_text(json.dumps(loss_curve) + "\n")
    return model, loss_curve


def predict_map(model, image_path):
    """Predicted anomaly probability map at the source image resolution."""
    _, img = read_image(image_path)
    h, w = img.shape[:2]
    res = model.input_resolution
    pil = Image.fromarray((img * 255).astype(np.uint8))
    x = np.asarray(pil.resize((res, res), Image.BILINEAR), dtype=np.float32) / 255.0
    with torch.no_grad():
        logits = model(torch.from_numpy(x.transpose(2, 0, 1))[None])
        probs = torch.sigmoid(logits)[0, 0].numpy().astype(np.float64)
    if probs.shape != (h, w):
        probs = resize_bilinear(probs, h, w)
    return probs


def evaluate_segmenter(model, test_samples):
    """Image- and pixel-level AUROC of the model on a labeled test set.

    Normal test samples contribute all-zero ground truth; anomalous samples
    must carry a mask path.
    """
    by_category = {}
    for sample in test_samples:
        if not sample.is_normal and not sample.mask_path:
            raise ValidationError(f"{sample.image_path}: anomalous sample "
                                  f"without ground-truth mask")
        by_category.setdefault(sample.category, []).append(sample)

    per_category = {}
    for category in sorted(by_category):
        maps, gts, labels = [], [], []
        for sample in by_category[category]:
            probs = predict_map(model, sample.image_path)
            maps.append(probs)
            if sample.mask_path:
                gts.append(read_mask_png(sample.mask_path).values)
            else:
                gts.append(np.zeros(probs.shape, dtype=np.uint8))
            labels.append(0 if sample.is_normal else 1)
        per_category[category] = {
            "image_auroc": image_auroc(maps, labels),
            "pixel_auroc": pixel_auroc(maps, gts),
        }
    mean_i = float(np.mean([r["image_auroc"] for r in per_category.values()]))
    mean_p = float(np.mean([r["pixel_auroc"] for r in per_category.values()]))
    return EvalReport(per_category=per_category, mean_image_auroc=mean_i,
                      mean_pixel_auroc=mean_p)


def train_pixel_auroc(model, samples):
    """Pixel AUROC of the model on its own training samples (overfit probe)."""
    scores, labels = [], []
    for sample in samples:
        probs = predict_map(model, sample.image_path)
        if sample.mask_path:
            gt = read_mask_png(sample.mask_path).values
        else:
            gt = np.zeros(probs.shape, dtype=np.uint8)
        scores.append(probs.ravel())
        labels.append(gt.ravel())
    return auroc(LabeledScores(scores=np.concatenate(scores),
                               labels=np.concatenate(labels)))


def load_test_set(test_dir):
    """Load a labeled test set from ``test_dir/<category>/{images,masks}``.

    An image without a same-stem mask file is treated as normal.
    """
    root = Path(test_dir)
    if not root.exists():
        raise ValidationError(f"test directory not found: {root}")
    samples = []
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        images = sorted((cat_dir / "images").glob("*.png"))
        if not images:
            continue
        for img in images:
            mask = cat_dir / "masks" / img.name
            if mask.exists():
                samples.append(SegSample(image_path=str(img), mask_path=str(mask),
                                         category=cat_dir.name))
            else:
                samples.append(SegSample(image_path=str(img), category=cat_dir.name,
                                         is_normal=True))
    if not samples:
        raise ValidationError(f"no test images under {root}")
    return samples
