"""Image-text similarity quality filter for generated images.

For every (normal image, generated image) pair the filter embeds both images
and a prompt pair - "a normal <category>" and the defect description - into a
joint space and computes four cosine similarities. A generated image is kept
only if its alignment with the defect prompt dominates the other three
similarities, which discards generation failures and off-prompt artifacts.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

CONDITION_IDS = ("C1", "C2", "C3")


@dataclass(frozen=True)
class SimilarityQuad:
    """The four image-text similarities a retention verdict is based on.

    s_aa: generated image vs defect prompt
    s_nn: normal image vs normal prompt
    s_an: generated image vs normal prompt
    s_na: normal image vs defect prompt
    """

    s_aa: float
    s_nn: float
    s_an: float
    s_na: float

    def __post_init__(self):
        for name in ("s_aa", "s_nn", "s_an", "s_na"):
            v = float(getattr(self, name))
            if not np.isfinite(v):
                raise ValidationError(f"{name} is not finite")
            if abs(v) > 1.0 + 1e-9:
                raise ValidationError(f"{name}={v} outside [-1, 1]")
            object.__setattr__(self, name, min(1.0, max(-1.0, v)))

    def as_dict(self):
        return {"s_aa": self.s_aa, "s_nn": self.s_nn,
                "s_an": self.s_an, "s_na": self.s_na}


@dataclass(frozen=True)
class PromptPair:
    """Normal and anomaly text prompts for one (category, defect) pair."""

    normal_prompt: str
    anomaly_prompt: str

    def __post_init__(self):
        if not self.normal_prompt.strip() or not self.anomaly_prompt.strip():
            raise ValidationError("prompts must be non-empty")

    @classmethod
    def for_defect(cls, category, defect):
        return cls(normal_prompt=f"a normal {category}",
                   anomaly_prompt=defect.description)


@dataclass(frozen=True)
class Verdict:
    keep: bool
    reasons: tuple = ()


class CachingEmbedder:
    """Memoizes an embedder so repeated images/prompts cost one call each."""

    def __init__(self, embedder):
        self.embedder = embedder
        self.dim = embedder.dim
        self._image_cache = {}
        self._text_cache = {}
        self.image_calls = 0
        self.text_calls = 0

    def embed_image(self, image):
        key = hashlib.sha256(np.ascontiguousarray(image).tobytes()).digest()
        if key not in self._image_cache:
            self.image_calls += 1
            self._image_cache[key] = np.asarray(self.embedder.embed_image(image),
                                                dtype=np.float64)
        return self._image_cache[key]

    def embed_text(self, text):
        if text not in self._text_cache:
            self.text_calls += 1
            self._text_cache[text] = np.asarray(self.embedder.embed_text(text),
                                                dtype=np.float64)
        return self._text_cache[text]


def _cosine(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValidationError("zero-norm embedding")
    return float(np.dot(u, v) / (nu * nv))


def compute_similarities(normal_image, generated_image, prompts, embedder):
    """Embed both images and both prompts, return their similarity quad.

    Exactly two image and two text embeddings are computed per pair; wrap the
    embedder in CachingEmbedder to share them across pairs.
    """
    e_n = embedder.embed_image(normal_image)
    e_a = embedder.embed_image(generated_image)
    t_n = embedder.embed_text(prompts.normal_prompt)
    t_a = embedder.embed_text(prompts.anomaly_prompt)
    return SimilarityQuad(
        s_aa=_cosine(e_a, t_a),
        s_nn=_cosine(e_n, t_n),
        s_an=_cosine(e_a, t_n),
        s_na=_cosine(e_n, t_a),
    )


def apply_filter(quad):
    """Evaluate the three retention conditions on a similarity quad.

    Keep iff s_aa >= s_nn (C1) and s_aa >= s_an (C2) and s_aa >= s_na (C3);
    all comparisons are non-strict. The verdict lists every violated
    condition on discard.
    """
    reasons = []
    if not quad.s_aa >= quad.s_nn:
        reasons.append("C1")
    if not quad.s_aa >= quad.s_an:
        reasons.append("C2")
    if not quad.s_aa >= quad.s_na:
        reasons.append("C3")
    return Verdict(keep=not reasons, reasons=tuple(reasons))


def filter_manifest(manifest, embedder, load_image=None):
    """Score and filter every generated record in a manifest.

    Each record with status "generated" gains a similarity quad and either
    keeps its status (retained) or moves to "filtered_out". Per-record
    embedder failures are recorded on the record; the run continues. Returns
    a summary dict with per-category and per-defect keep rates.
    """
    from .core import read_image

    if load_image is None:
        load_image = lambda path: read_image(path)[1]

    cache = CachingEmbedder(embedder)
    per_category = {}
    for record in manifest.records():
        if record.status != "generated":
            continue
        cat = per_category.setdefault(record.category, {"total": 0, "kept": 0,
                                                        "defects": {}})
        cat["total"] += 1
        defect_stats = cat["defects"].setdefault(record.defect.name,
                                                 {"total": 0, "kept": 0})
        defect_stats["total"] += 1
        prompts = PromptPair.for_defect(record.category, record.defect)
        try:
            quad = compute_similarities(load_image(record.normal_image.path),
                                        load_image(record.generated_image.path),
                                        prompts, cache)
        except Exception as exc:  # noqa: BLE001 - per-record isolation
            manifest.update(record.with_failure(f"embedder: {exc}"))
            continue
        verdict = apply_filter(quad)
        if verdict.keep:
            cat["kept"] += 1
            defect_stats["kept"] += 1
            manifest.update(record.with_similarities(quad, kept=True))
        else:
            manifest.update(record.with_similarities(quad, kept=False,
                                                     reasons=verdict.reasons))
    for cat in per_category.values():
        cat["keep_rate"] = cat["kept"] / cat["total"] if cat["total"] else 0.0
        for stats in cat["defects"].values():
            stats["keep_rate"] = (stats["kept"] / stats["total"]
                                  if stats["total"] else 0.0)
    return {"categories": per_category}
