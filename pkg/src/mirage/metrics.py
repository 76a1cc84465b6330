"""Evaluation metrics for anomaly maps and generated image quality.

AUROC is computed rank-based (Mann-Whitney; ties contribute 1/2), so it
equals the probability that a random positive outranks a random negative.
Pixel-level AUROC flattens every pixel of every image into one scored set;
image-level AUROC scores each image by the maximum of its map. Inception
score and intra-cluster perceptual distance operate on pluggable classifier
and perceptual-distance backends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, ValidationError


@dataclass(frozen=True)
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).ravel()
        y = np.asarray(self.labels).ravel()
        if s.shape != y.shape:
            raise ValidationError(f"{s.size} scores vs {y.size} labels")
        if s.size == 0:
            raise ValidationError("empty score set")
        if not np.all(np.isfinite(s)):
            raise ValidationError("scores contain non-finite values")
        if not np.all((y == 0) | (y == 1)):
            raise ValidationError("labels must be 0 or 1")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "labels", y.astype(np.uint8))


@dataclass(frozen=True)
class ClassDistribution:
    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64).ravel()
        if p.size < 1:
            raise ValidationError("empty class distribution")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ValidationError("probabilities must be finite and non-negative")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ValidationError(f"probabilities sum to {p.sum()}, not 1")
        object.__setattr__(self, "probabilities", p)


def auroc(data):
    """Area under the ROC curve via average ranks (ties count 1/2)."""
    n_pos = int(data.labels.sum())
    n_neg = data.labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both label classes")
    ranks = rankdata(data.scores, method="average")
    pos_rank_sum = float(ranks[data.labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def pixel_auroc(score_maps, gt_masks):
    """AUROC over all pixels of all images pooled into one prediction set."""
    if len(score_maps) != len(gt_masks):
        raise ValidationError(f"{len(score_maps)} maps vs {len(gt_masks)} masks")
    scores, labels = [], []
    for sm, gt in zip(score_maps, gt_masks):
        sv = np.asarray(sm.values if hasattr(sm, "values") else sm, dtype=np.float64)
        gv = np.asarray(gt.values if hasattr(gt, "values") else gt)
        if sv.shape != gv.shape:
            raise ValidationError(f"map {sv.shape} vs mask {gv.shape}")
        scores.append(sv.ravel())
        labels.append(gv.ravel())
    return auroc(LabeledScores(scores=np.concatenate(scores),
                               labels=np.concatenate(labels)))


def image_auroc(score_maps, image_labels):
    """AUROC over per-image scores; an image scores the max of its map."""
    if len(score_maps) != len(image_labels):
        raise ValidationError(f"{len(score_maps)} maps vs {len(image_labels)} labels")
    scores = [float(np.max(np.asarray(sm.values if hasattr(sm, "values") else sm)))
              for sm in score_maps]
    return auroc(LabeledScores(scores=np.asarray(scores),
                               labels=np.asarray(image_labels)))


def inception_score(distributions):
    """exp of the mean KL divergence between each distribution and the marginal.

    Uses the 0 * log 0 = 0 convention; the result is always >= 1 and reaches
    the class count when the inputs are uniform one-hots over all classes.
    """
    if not distributions:
        raise ValidationError("inception score needs at least one distribution")
    probs = np.stack([d.probabilities for d in distributions])
    if len({p.size for p in probs}) > 1:
        raise ValidationError("distributions have differing class counts")
    marginal = probs.mean(axis=0)
    support = probs > 0
    ratios = np.ones_like(probs)
    np.divide(probs, marginal[None, :], out=ratios, where=support)
    kls = np.sum(np.where(support, probs * np.log(ratios), 0.0), axis=1)
    return float(np.exp(kls.mean()))


def ic_lpips(clusters, perceptual):
    """Mean over clusters of the mean pairwise perceptual distance within.

    Each cluster groups the generated images that share one defect type;
    every cluster must contain at least two images.
    """
    if not clusters:
        raise ValidationError("no clusters supplied")
    cluster_means = []
    for idx, cluster in enumerate(clusters):
        images = list(cluster)
        if len(images) < 2:
            raise ValidationError(f"cluster {idx} has {len(images)} image(s); need >= 2")
        dists = []
        for i in range(len(images)):
            for j in range(i + 1, len(images)):
                dists.append(perceptual.distance(images[i], images[j]))
        cluster_means.append(float(np.mean(dists)))
    return float(np.mean(cluster_means))
