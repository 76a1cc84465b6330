"""Training-free dual-branch change detection and mask calibration.

Given a normal image, its generated anomalous counterpart, and the defect
keywords, two branches compute per-pixel change evidence in feature space:

* semantic branch: both images are encoded by a text-conditioned extractor
  under the same defect keywords; conditioning the normal image on the defect
  text captures its base activation so that subtracting it suppresses false
  positives from structures that merely resemble the defect. The channel-wise
  L2 norm of the feature difference is upsampled to image resolution.
* structural branch: an unconditional multi-scale extractor yields per-layer
  feature differences; each layer's norm map is upsampled, min-max normalized
  to [0, 1], and the layers are averaged.

The element-wise product of the (normalized) semantic map and the structural
map keeps only pixels that changed both semantically and structurally. A
per-category threshold is then calibrated against a handful of reference
masks by maximizing the balanced accuracy of the binarized map, which equals
the AUROC of the binary predictor 1[S > tau]; the continuous-map AUROC is
reported alongside for information.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import BinaryMask, ScoreMap, read_image, write_mask_png, write_tensor
from .errors import CalibrationError, ConfigurationError, ValidationError
from .genclient import slugify


@dataclass(frozen=True)
class SemanticExtractorSpec:
    """Which text-conditioned backend and intermediate layer to use."""

    backend_id: str = "mock"
    layer: str = "fusion-last"
    input_resolution: int = 0  # 0 = native

    def __post_init__(self):
        if not self.layer or ("," in self.layer):
            raise ValidationError("exactly one semantic layer must be selected")


@dataclass(frozen=True)
class StructuralExtractorSpec:
    """Which unconditional backend and backbone layers to use."""

    backend_id: str = "mock"
    layers: tuple = ("pyramid-1", "pyramid-2", "pyramid-3")
    input_resolution: int = 0

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValidationError("at least one structural layer is required")
        object.__setattr__(self, "layers", tuple(self.layers))


@dataclass(frozen=True)
class CalibrationResult:
    category: str
    tau_star: float
    criterion_value: float
    num_reference_masks: int
    candidate_count: int
    continuous_auroc: float = None

    def __post_init__(self):
        if not 0.0 <= self.criterion_value <= 1.0:
            raise ValidationError(f"criterion {self.criterion_value} outside [0, 1]")
        if self.num_reference_masks < 1:
            raise ValidationError("calibration needs at least one reference mask")

    def to_dict(self):
        return {"tau_star": self.tau_star,
                "criterion_value": self.criterion_value,
                "num_reference_masks": self.num_reference_masks,
                "candidate_count": self.candidate_count,
                "continuous_auroc": self.continuous_auroc}


def resize_bilinear(values, out_h, out_w):
    """Bilinear resize of a 2-d array (half-pixel centers, edge clamp)."""
    arr = np.asarray(values, dtype=np.float64)
    src_h, src_w = arr.shape
    if (src_h, src_w) == (out_h, out_w):
        return arr.copy()
    ys = (np.arange(out_h) + 0.5) * (src_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (src_w / out_w) - 0.5
    y0f = np.floor(ys)
    x0f = np.floor(xs)
    fy = ys - y0f
    fx = xs - x0f
    y0 = np.clip(y0f.astype(int), 0, src_h - 1)
    y1 = np.clip(y0f.astype(int) + 1, 0, src_h - 1)
    x0 = np.clip(x0f.astype(int), 0, src_w - 1)
    x1 = np.clip(x0f.astype(int) + 1, 0, src_w - 1)
    top = arr[y0][:, x0] * (1 - fx) + arr[y0][:, x1] * fx
    bot = arr[y1][:, x0] * (1 - fx) + arr[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def normalize_unit_range(values):
    """Min-max normalize to [0, 1]; a constant map maps to all zeros."""
    arr = np.asarray(values, dtype=np.float64)
    lo = arr.min()
    span = arr.max() - lo
    if span == 0:
        return np.zeros_like(arr)
    return (arr - lo) / span


def _channel_l2_diff(stack_a, stack_b, layer_index):
    la = stack_a.layers[layer_index]
    lb = stack_b.layers[layer_index]
    if la.values.shape != lb.values.shape:
        raise ValidationError(
            f"feature shape mismatch on layer {la.layer_id!r}: "
            f"{la.values.shape} vs {lb.values.shape}")
    return np.sqrt(np.sum((la.values - lb.values) ** 2, axis=0))


def semantic_diff(normal_image, anomalous_image, keywords, extractor):
    """Text-conditioned feature difference map at image resolution."""
    normal = np.asarray(normal_image, dtype=np.float64)
    anomalous = np.asarray(anomalous_image, dtype=np.float64)
    if normal.shape != anomalous.shape:
        raise ValidationError(f"image shape mismatch {normal.shape} vs {anomalous.shape}")
    kws = [k for k in keywords if str(k).strip()]
    if not kws:
        raise ValidationError("semantic branch needs non-empty keywords")
    text = ", ".join(str(k) for k in kws)
    stack_n = extractor.extract(normal, text)
    stack_a = extractor.extract(anomalous, text)
    if len(stack_n.layers) != 1 or len(stack_a.layers) != 1:
        raise ValidationError("semantic extractor must return exactly one layer")
    diff = _channel_l2_diff(stack_a, stack_n, 0)
    h, w = normal.shape[:2]
    return ScoreMap(resize_bilinear(diff, h, w))


def structural_diff(normal_image, anomalous_image, extractor):
    """Unconditional multi-scale feature difference map in [0, 1]."""
    normal = np.asarray(normal_image, dtype=np.float64)
    anomalous = np.asarray(anomalous_image, dtype=np.float64)
    if normal.shape != anomalous.shape:
        raise ValidationError(f"image shape mismatch {normal.shape} vs {anomalous.shape}")
    stack_n = extractor.extract(normal)
    stack_a = extractor.extract(anomalous)
    if len(stack_n.layers) != len(stack_a.layers):
        raise ValidationError("structural stacks have different layer counts")
    h, w = normal.shape[:2]
    acc = np.zeros((h, w))
    num_layers = len(stack_n.layers)
    for idx in range(num_layers):
        diff = _channel_l2_diff(stack_a, stack_n, idx)
        acc += normalize_unit_range(resize_bilinear(diff, h, w))
    return ScoreMap(acc / num_layers)


def fuse(semantic_map, structural_map):
    """Element-wise product of the two normalized branch maps."""
    a = semantic_map.values
    b = structural_map.values
    if a.shape != b.shape:
        raise ValidationError(f"map shape mismatch {a.shape} vs {b.shape}")
    if a.max(initial=0.0) > 1.0 + 1e-12 or b.max(initial=0.0) > 1.0 + 1e-12:
        raise ValidationError("fuse expects both maps normalized to [0, 1]")
    return ScoreMap(a * b)


def compute_score_map(normal_image, anomalous_image, keywords,
                      semantic_extractor, structural_extractor):
    """Full dual-branch score map for one image pair."""
    sem = semantic_diff(normal_image, anomalous_image, keywords, semantic_extractor)
    sem_norm = ScoreMap(normalize_unit_range(sem.values))
    structural = structural_diff(normal_image, anomalous_image, structural_extractor)
    return fuse(sem_norm, structural)


def binarize(score_map, tau):
    """Threshold a score map with a strict inequality: pixel 1 iff S > tau."""
    if not np.isfinite(tau):
        raise ValidationError(f"threshold {tau} is not finite")
    return BinaryMask((score_map.values > tau).astype(np.uint8))


def _pool_calibration_set(score_maps, reference_masks):
    if not score_maps:
        raise ValidationError("no score maps supplied for calibration")
    if len(score_maps) != len(reference_masks):
        raise ValidationError(
            f"{len(score_maps)} score maps vs {len(reference_masks)} references")
    scores, labels = [], []
    for sm, ref in zip(score_maps, reference_masks):
        if sm.values.shape != ref.values.shape:
            raise ValidationError(
                f"score map {sm.values.shape} vs reference {ref.values.shape}")
        scores.append(sm.values.ravel())
        labels.append(ref.values.ravel())
    pooled = np.concatenate(scores)
    truth = np.concatenate(labels).astype(bool)
    if truth.all() or not truth.any():
        raise CalibrationError(
            "reference masks are single-class; the criterion is undefined")
    return pooled, truth


def threshold_sweep(score_maps, reference_masks, num_candidates=256):
    """Candidate thresholds (pooled-score quantiles) and their criteria."""
    pooled, truth = _pool_calibration_set(score_maps, reference_masks)
    n_pos = int(truth.sum())
    n_neg = truth.size - n_pos
    candidates = np.quantile(pooled, np.linspace(0.0, 1.0, num_candidates))
    values = np.empty(num_candidates)
    for idx, tau in enumerate(candidates):
        pred = pooled > tau
        tpr = np.count_nonzero(pred & truth) / n_pos
        tnr = np.count_nonzero(~pred & ~truth) / n_neg
        values[idx] = 0.5 * (tpr + tnr)
    return candidates, values


def calibrate_threshold(score_maps, reference_masks, category="",
                        num_candidates=256):
    """Select the binarization threshold that best matches reference masks.

    Candidates are evenly spaced quantiles of the pooled scores. For each
    candidate tau the criterion is the balanced accuracy of 1[S > tau]
    against the pooled reference pixels (equivalently, the AUROC of that
    binary predictor). Ties break toward the smaller tau. The AUROC of the
    continuous score map is recorded as well.
    """
    pooled, truth = _pool_calibration_set(score_maps, reference_masks)
    candidates, values = threshold_sweep(score_maps, reference_masks,
                                         num_candidates)
    best_idx, best_val = 0, -1.0
    for idx, value in enumerate(values):
        if value > best_val:
            best_idx, best_val = idx, value

    from .metrics import LabeledScores, auroc

    cont = auroc(LabeledScores(scores=pooled, labels=truth.astype(np.uint8)))
    return CalibrationResult(category=category,
                             tau_star=float(candidates[best_idx]),
                             criterion_value=float(best_val),
                             num_reference_masks=len(reference_masks),
                             candidate_count=int(num_candidates),
                             continuous_auroc=float(cont))


def mask_pipeline(record, semantic_extractor, structural_extractor,
                  calibration, out_dir):
    """Produce the calibrated binary mask and raw score map for one record.

    The record must be a retained generated record; its category must have a
    calibration entry. On success the mask PNG and the fused score map (MTEN)
    are written under the dataset layout and the record moves to "masked".
    Extractor failures mark the record "failed" with the cause.
    """
    if record.status != "generated":
        raise ValidationError(
            f"{record.record_id}: cannot mask record in status {record.status!r}")
    result = calibration.get(record.category)
    if result is None:
        raise ConfigurationError(
            f"no calibration available for category {record.category!r}")
    try:
        _, normal = read_image(record.normal_image.path)
        _, anomalous = read_image(record.generated_image.path)
        fused = compute_score_map(normal, anomalous, record.defect.keywords,
                                  semantic_extractor, structural_extractor)
    except (ValidationError, ConfigurationError):
        raise
    except Exception as exc:  # noqa: BLE001 - extractor opacity
        return record.with_failure(f"mask pipeline: {exc}")
    mask = binarize(fused, result.tau_star)
    root = Path(out_dir)
    defect_dir = slugify(record.defect.name)
    mask_path = root / record.category / "masks" / defect_dir / f"{record.record_id}.png"
    score_path = root / record.category / "scores" / defect_dir / f"{record.record_id}.mten"
    write_mask_png(mask, mask_path)
    write_tensor(score_path, fused.values)
    return record.with_mask(mask_path, score_path, result.tau_star)


def save_calibration(results, path):
    """Persist {category -> CalibrationResult} as the calibration JSON file."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    payload = {cat: res.to_dict() for cat, res in results.items()}
    p.write_text(json.dumps(payload, indent=2) + "\n")


def load_calibration(path):
    data = json.loads(Path(path).read_text())
    out = {}
    for cat, d in data.items():
        out[cat] = CalibrationResult(category=cat, tau_star=d["tau_star"],
                                     criterion_value=d["criterion_value"],
                                     num_reference_masks=d["num_reference_masks"],
                                     candidate_count=d.get("candidate_count", 256),
                                     continuous_auroc=d.get("continuous_auroc"))
    return out
