"""Anomalous image generation through a black-box generator backend.

A generation plan pairs every proposed defect with uniformly sampled normal
images, and the orchestrator pushes each pair through the backend with bounded
concurrency, retries, and rate limiting. Results land in a dataset directory
tree and an append-only JSONL manifest that later stages (filtering, mask
creation, evaluation) update and that interrupted runs resume from.
"""

from __future__ import annotations

import dataclasses
import json
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ImageRef, read_image, write_image_png
from .errors import ValidationError
from .filtering import SimilarityQuad
from .promptgen import DefectDescription

RECORD_STATUSES = ("pending", "generated", "filtered_out", "masked", "failed")


def slugify(text):
    return re.sub(r"-+", "-", re.sub(r"[^a-z0-9]+", "-", text.lower())).strip("-")


@dataclass(frozen=True)
class GenerationRecord:
    """Manifest entry tracking one normal-image/defect pair through the pipeline."""

    record_id: str
    category: str
    defect: DefectDescription
    normal_image: ImageRef
    generation_prompt: str
    status: str = "pending"
    generated_image: ImageRef = None
    similarities: SimilarityQuad = None
    filter_reasons: tuple = ()
    mask_path: str = None
    score_map_path: str = None
    threshold_used: float = None
    attempts: int = 0
    failure_cause: str = None
    created_at: float = None
    updated_at: float = None

    def __post_init__(self):
        if self.status not in RECORD_STATUSES:
            raise ValidationError(f"unknown record status {self.status!r}")
        if self.status == "masked" and not self.mask_path:
            raise ValidationError(f"{self.record_id}: masked without mask_path")
        if self.status in ("generated", "filtered_out", "masked") and self.generated_image is None:
            raise ValidationError(f"{self.record_id}: status {self.status} without generated image")

    def with_generated(self, image_ref, attempts):
        return dataclasses.replace(self, status="generated",
                                   generated_image=image_ref, attempts=attempts)

    def with_failure(self, cause, attempts=None):
        return dataclasses.replace(
            self, status="failed", failure_cause=cause,
            attempts=self.attempts if attempts is None else attempts)

    def with_similarities(self, quad, kept, reasons=()):
        return dataclasses.replace(self, similarities=quad,
                                   status="generated" if kept else "filtered_out",
                                   filter_reasons=tuple(reasons))

    def with_mask(self, mask_path, score_map_path, threshold):
        return dataclasses.replace(self, status="masked", mask_path=str(mask_path),
                                   score_map_path=str(score_map_path),
                                   threshold_used=float(threshold))

    def to_dict(self):
        d = {
            "record_id": self.record_id,
            "category": self.category,
            "defect": self.defect.to_dict(),
            "normal_image": dataclasses.asdict(self.normal_image),
            "generation_prompt": self.generation_prompt,
            "status": self.status,
            "generated_image": (dataclasses.asdict(self.generated_image)
                                if self.generated_image else None),
            "similarities": self.similarities.as_dict() if self.similarities else None,
            "filter_reasons": list(self.filter_reasons),
            "mask_path": self.mask_path,
            "score_map_path": self.score_map_path,
            "threshold_used": self.threshold_used,
            "attempts": self.attempts,
            "failure_cause": self.failure_cause,
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(
            record_id=d["record_id"],
            category=d["category"],
            defect=DefectDescription.from_dict(d["defect"]),
            normal_image=ImageRef(**d["normal_image"]),
            generation_prompt=d["generation_prompt"],
            status=d["status"],
            generated_image=ImageRef(**d["generated_image"]) if d.get("generated_image") else None,
            similarities=SimilarityQuad(**d["similarities"]) if d.get("similarities") else None,
            filter_reasons=tuple(d.get("filter_reasons", ())),
            mask_path=d.get("mask_path"),
            score_map_path=d.get("score_map_path"),
            threshold_used=d.get("threshold_used"),
            attempts=d.get("attempts", 0),
            failure_cause=d.get("failure_cause"),
            created_at=d.get("created_at"),
            updated_at=d.get("updated_at"),
        )


@dataclass(frozen=True)
class GenerationPlan:
    category: str
    defects: tuple
    normal_pool: tuple
    per_defect: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.per_defect < 1:
            raise ValidationError("per_defect must be >= 1")
        if not self.normal_pool:
            raise ValidationError("normal image pool is empty")
        if not self.defects:
            raise ValidationError("defect list is empty")
        object.__setattr__(self, "defects", tuple(self.defects))
        object.__setattr__(self, "normal_pool", tuple(self.normal_pool))


class Manifest:
    """JSONL manifest with a single serialized writer.

    During generation the manifest is strictly append-only so an interrupted
    run leaves a valid prefix to resume from; record ids stay unique. Later
    stages update records in memory and persist with an atomic rewrite.
    """

    def __init__(self, path, clock=time.time):
        self.path = Path(path)
        self.clock = clock
        self._records = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path, clock=time.time):
        m = cls(path, clock=clock)
        p = Path(path)
        if p.exists():
            with open(p) as fh:
                for lineno, line in enumerate(fh, 1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        record = GenerationRecord.from_dict(json.loads(line))
                    except (json.JSONDecodeError, KeyError) as exc:
                        raise ValidationError(
                            f"{p}:{lineno}: bad manifest line: {exc}") from exc
                    m._records[record.record_id] = record
        return m

    def __contains__(self, record_id):
        return record_id in self._records

    def __len__(self):
        return len(self._records)

    def get(self, record_id):
        return self._records[record_id]

    def records(self):
        return list(self._records.values())

    def append(self, record):
        with self._lock:
            if record.record_id in self._records:
                raise ValidationError(f"duplicate record id {record.record_id}")
            now = self.clock()
            record = dataclasses.replace(
                record,
                created_at=record.created_at if record.created_at is not None else now,
                updated_at=now)
            self._records[record.record_id] = record
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record.to_dict()) + "\n")
        return record

    def update(self, record):
        with self._lock:
            if record.record_id not in self._records:
                raise ValidationError(f"unknown record id {record.record_id}")
            record = dataclasses.replace(record, updated_at=self.clock())
            self._records[record.record_id] = record
        return record

    def save(self, path=None):
        """Atomically rewrite the manifest (one line per record)."""
        target = Path(path) if path else self.path
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.with_suffix(target.suffix + ".tmp")
        with open(tmp, "w") as fh:
            for record in self._records.values():
                fh.write(json.dumps(record.to_dict()) + "\n")
        tmp.replace(target)

    def status_counts(self):
        counts = {}
        for record in self._records.values():
            counts[record.status] = counts.get(record.status, 0) + 1
        return counts


class RateLimiter:
    """Token bucket; acquire() blocks until a token is available."""

    def __init__(self, rate_per_sec, burst=1, sleep=time.sleep, now=time.monotonic):
        if rate_per_sec <= 0:
            raise ValidationError("rate must be positive")
        self.rate = rate_per_sec
        self.capacity = max(1, burst)
        self.tokens = float(self.capacity)
        self.sleep = sleep
        self.now = now
        self._last = now()
        self._lock = threading.Lock()

    def acquire(self):
        while True:
            with self._lock:
                t = self.now()
                self.tokens = min(self.capacity, self.tokens + (t - self._last) * self.rate)
                self._last = t
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


def build_generation_prompt(defect):
    """Render the image-editing prompt for one defect (deterministic)."""
    return (
        f"Edit this photograph of a {defect.category}: add a realistic "
        f"{defect.name} defect. {defect.description}. Preserve the background, "
        f"lighting, camera angle, and overall appearance of the object; change "
        f"only the defect region. The result must look like a genuine "
        f"photograph of the same {defect.category} with this defect."
    )


def sample_plan(plan):
    """Expand a plan into (normal ImageRef, defect) pairs.

    Normal images are drawn uniformly (with replacement) from the pool with
    the plan seed; the pair list is deterministic for a fixed seed.
    """
    rng = np.random.default_rng(plan.seed)
    pairs = []
    for defect in plan.defects:
        picks = rng.integers(0, len(plan.normal_pool), size=plan.per_defect)
        for i in picks:
            pairs.append((plan.normal_pool[int(i)], defect))
    return pairs


def record_id_for(plan, index, defect):
    return f"{slugify(plan.category)}-{slugify(defect.name)}-{index:05d}"


def plan_records(plan):
    """Deterministic pending records for every pair in the plan."""
    out = []
    for index, (normal_ref, defect) in enumerate(sample_plan(plan)):
        out.append(GenerationRecord(
            record_id=record_id_for(plan, index, defect),
            category=plan.category,
            defect=defect,
            normal_image=normal_ref,
            generation_prompt=build_generation_prompt(defect)))
    return out


def run_generation(plan, generator, manifest, out_dir, max_workers=4,
                   max_retries=3, backoff_base=1.0, sleep=time.sleep,
                   rate_limiter=None):
    """Generate one image per planned pair and append results to the manifest.

    Pairs already present in the manifest are skipped, so a rerun after an
    interruption attempts exactly the remaining records. Per-record failures
    are recorded (status "failed" with the cause) and the run continues.
    Results are committed in plan order so a seeded mock run is reproducible
    byte for byte.
    """
    out_root = Path(out_dir)
    todo = [r for r in plan_records(plan) if r.record_id not in manifest]

    def work(record):
        try:
            _, buf = read_image(record.normal_image.path)
        except Exception as exc:  # noqa: BLE001 - per-record isolation
            return record.with_failure(f"read normal image: {exc}", attempts=0)
        attempts = 0
        last = None
        for attempt in range(max_retries + 1):
            attempts += 1
            try:
                if rate_limiter is not None:
                    rate_limiter.acquire()
                out = generator.generate(buf, record.generation_prompt)
                break
            except Exception as exc:  # noqa: BLE001 - backend opacity
                last = exc
                if attempt < max_retries:
                    sleep(backoff_base * (2 ** attempt))
        else:
            return record.with_failure(str(last), attempts=attempts)
        dest = (out_root / plan.category / "anomalous" / slugify(record.defect.name)
                / f"{record.record_id}.png")
        if not dest.exists():  # never overwrite an existing generated image
            write_image_png(out, dest)
        ref = ImageRef(path=str(dest), category=plan.category, role="generated",
                       width=out.shape[1], height=out.shape[0])
        return record.with_generated(ref, attempts=attempts)

    if todo:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            # executor.map preserves input order, giving in-order commits
            for finished in pool.map(work, todo):
                manifest.append(finished)
    return manifest
