"""Pluggable model backends: HTTP clients and deterministic mocks.

Every stage of the pipeline talks to its model through one of the small
interfaces below, so swapping providers means changing an endpoint, not the
pipeline. The mock backends are fully deterministic (seeded, content-hashed)
and fast on CPU; they exist so the entire pipeline can run and be tested
end-to-end on a desk machine with no network and no model weights.
"""

from __future__ import annotations

import base64
import hashlib
import io
import math
import time

import numpy as np
import requests
from PIL import Image

from .core import FeatureLayer, FeatureStack
from .errors import ConfigurationError, TransportError, ValidationError

# ---------------------------------------------------------------------------
# Interfaces


class DefectProposer:
    """Vision-language backend: (prompt, reference images) -> response text."""

    def propose(self, prompt, images):
        raise NotImplementedError


class ImageGenerator:
    """Generative backend: (pixel buffer, prompt) -> pixel buffer."""

    def generate(self, image, prompt):
        raise NotImplementedError


class ImageTextEmbedder:
    """Joint image/text embedding backend producing unit vectors."""

    dim = 0

    def embed_image(self, image):
        raise NotImplementedError

    def embed_text(self, text):
        raise NotImplementedError


class SemanticFeatureExtractor:
    """Text-conditioned feature extractor: (image, text) -> one-layer stack."""

    concurrency_safe = False

    def extract(self, image, text):
        raise NotImplementedError


class StructuralFeatureExtractor:
    """Unconditional multi-layer feature extractor: image -> L-layer stack."""

    concurrency_safe = False

    def extract(self, image):
        raise NotImplementedError


class ImageClassifier:
    """Classification backend: image -> class probability vector."""

    def class_distribution(self, image):
        raise NotImplementedError


class PerceptualDistance:
    """Perceptual metric backend: (image, image) -> non-negative distance."""

    def distance(self, image_a, image_b):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Shared helpers


def _digest_seed(*parts):
    """Derive a 64-bit RNG seed from arbitrary byte/str/int parts."""
    h = hashlib.sha256()
    for part in parts:
        if isinstance(part, bytes):
            h.update(part)
        else:
            h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "little")


def _png_b64(image):
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _b64_image(payload):
    raw = base64.b64decode(payload)
    with Image.open(io.BytesIO(raw)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def _auth_headers(auth_env):
    import os

    headers = {}
    if auth_env:
        token = os.environ.get(auth_env)
        if not token:
            raise ConfigurationError(f"auth env var {auth_env} is not set")
        headers["Authorization"] = f"Bearer {token}"
    return headers


class _HttpCaller:
    """POST with bounded retries and exponential backoff."""

    def __init__(self, endpoint, auth_env=None, timeout=60.0, max_retries=3,
                 backoff_base=1.0, sleep=time.sleep, session=None):
        self.endpoint = endpoint
        self.auth_env = auth_env
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self.sleep = sleep
        self.session = session or requests.Session()

    def post(self, payload):
        headers = _auth_headers(self.auth_env)
        last = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self.session.post(self.endpoint, json=payload,
                                         headers=headers, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()
            except (requests.RequestException, ValueError) as exc:
                last = exc
                if attempt < self.max_retries:
                    self.sleep(self.backoff_base * (2 ** attempt))
        raise TransportError(f"backend {self.endpoint} failed after "
                             f"{self.max_retries + 1} attempts: {last}") from last


# ---------------------------------------------------------------------------
# HTTP backends


class HttpProposer(DefectProposer):
    """Defect proposer over a JSON HTTP API.

    Request: {"prompt": str, "images": [base64 PNG, ...]}; response: {"text": str}.
    """

    def __init__(self, endpoint, auth_env="MIRAGE_VLM_TOKEN", **kwargs):
        self._caller = _HttpCaller(endpoint, auth_env=auth_env, **kwargs)

    def propose(self, prompt, images):
        payload = {"prompt": prompt, "images": [_png_b64(im) for im in images]}
        body = self._caller.post(payload)
        if "text" not in body:
            raise TransportError(f"proposer response missing 'text': {body}")
        return body["text"]


class HttpGenerator(ImageGenerator):
    """Image generator over a JSON HTTP API.

    Request: {"prompt": str, "image": base64 PNG}; response: {"image": base64 PNG}.
    """

    def __init__(self, endpoint, auth_env="MIRAGE_GEN_TOKEN", **kwargs):
        self._caller = _HttpCaller(endpoint, auth_env=auth_env, **kwargs)

    def generate(self, image, prompt):
        payload = {"prompt": prompt, "image": _png_b64(image)}
        body = self._caller.post(payload)
        if "image" not in body:
            raise TransportError(f"generator response missing 'image': {body}")
        return _b64_image(body["image"])


# ---------------------------------------------------------------------------
# Mock proposer

_MOCK_DEFECT_ITEMS = [
    ("surface scratch", "a thin shallow linear mark running across the top "
     "surface, exposing a slightly lighter layer underneath"),
    ("hairline crack", "a narrow fracture line crossing the part, with faintly "
     "darkened edges along its length"),
    ("edge chip", "a small piece missing from the rim, leaving a rough "
     "pale notch against the smooth outline"),
    ("discoloration patch", "an irregular dull gray stain that interrupts the "
     "uniform color of the surface"),
    ("shallow dent", "a concave depression with soft shadows where the "
     "material was compressed inward"),
    ("burn mark", "a dark charred smudge with blackened residue spreading "
     "from a central point"),
    ("contamination speck", "small dark embedded particles scattered over a "
     "localized area of the finish"),
    ("deep gouge", "a wide scoured groove cut into the material, with raised "
     "ridges on both sides"),
    ("corrosion spot", "a rough brownish patch of oxidation eating into the "
     "coating"),
    ("missing fragment", "a visibly absent section leaving a hole with sharp "
     "boundaries"),
    ("hairline split", "a fine separation line where the material has pulled "
     "apart under stress"),
    ("pressure mark", "a faint glossy streak where the surface was rubbed or "
     "pressed by tooling"),
]


class MockProposer(DefectProposer):
    """Deterministic proposer for offline runs.

    If ``responses_dir`` is given and contains ``<category>.txt``, that file is
    returned verbatim; the category is recovered from the prompt text.
    Otherwise a canned numbered defect list is emitted. The number of items
    honours the count requested in the prompt ("list N realistic defects").
    """

    def __init__(self, responses_dir=None):
        from pathlib import Path

        self.responses_dir = Path(responses_dir) if responses_dir else None

    def propose(self, prompt, images):
        import re

        m = re.search(r"defect-free ([\w\s-]+?),", prompt)
        category = m.group(1).strip() if m else ""
        if self.responses_dir is not None:
            canned = self.responses_dir / f"{category.replace(' ', '_')}.txt"
            if canned.exists():
                return canned.read_text()
        m = re.search(r"list (\d+) realistic defects", prompt)
        count = int(m.group(1)) if m else 10
        count = min(count, len(_MOCK_DEFECT_ITEMS))
        lines = [f"{i + 1}. {name}: {desc}."
                 for i, (name, desc) in enumerate(_MOCK_DEFECT_ITEMS[:count])]
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Mock generator

# Pixel-count window for injected regions, as a fraction of the image area.
# Kept just above 1% so localization checks against top-percentile pixel sets
# are well posed.
_REGION_FRAC_LO = 0.0102
_REGION_FRAC_HI = 0.0115


def _region_from_field(field, lo, hi):
    """Threshold a scalar field so that the region has a pixel count in [lo, hi].

    The region {field <= t} grows monotonically with t, so a binary search on
    t lands inside the window whenever the field has no large flat plateaus.
    """
    t_lo, t_hi = float(field.min()) - 1.0, float(field.max()) + 1.0
    for _ in range(64):
        mid = 0.5 * (t_lo + t_hi)
        count = int(np.count_nonzero(field <= mid))
        if count < lo:
            t_lo = mid
        elif count > hi:
            t_hi = mid
        else:
            return field <= mid
    # fall back to the closest achievable count
    return field <= t_lo


def injected_region(image, prompt, seed):
    """Recompute the defect region the mock generator injects for this input.

    Exposed so tests and calibration fixtures can recover the exact pixel set
    without a side channel: the region is a pure function of (image bytes,
    prompt, seed).
    """
    arr = np.asarray(image, dtype=np.float64)
    h, w = arr.shape[:2]
    rng = np.random.default_rng(
        _digest_seed(seed, hashlib.sha256(arr.tobytes()).digest(), prompt))
    target = max(8, int(round(0.011 * h * w)))
    lo = max(4, int(math.ceil(_REGION_FRAC_LO * h * w)))
    hi = max(lo + 2, int(math.floor(_REGION_FRAC_HI * h * w)))

    margin_y, margin_x = max(4, h // 6), max(4, w // 6)
    cy = rng.uniform(margin_y, h - margin_y)
    cx = rng.uniform(margin_x, w - margin_x)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx

    if rng.random() < 0.5:
        # tilted ellipse: quadratic form value as the distance field
        theta = rng.uniform(0, math.pi)
        aspect = rng.uniform(1.3, 2.4)
        rb = math.sqrt(target / (math.pi * aspect))
        ra = aspect * rb
        u = dx * math.cos(theta) + dy * math.sin(theta)
        v = -dx * math.sin(theta) + dy * math.cos(theta)
        field = (u / ra) ** 2 + (v / rb) ** 2
    else:
        # thin line segment: distance to the segment as the field
        theta = rng.uniform(0, math.pi)
        half_len = target / 4.0  # thickness ~2px -> area ~ 2 * length
        ux, uy = math.cos(theta), math.sin(theta)
        proj = np.clip(dx * ux + dy * uy, -half_len, half_len)
        field = np.hypot(dx - proj * ux, dy - proj * uy)

    region = _region_from_field(field, lo, hi)
    return region


class MockGenerator(ImageGenerator):
    """Deterministic generator that composites a pseudo-defect onto the input.

    A seeded ellipse or line of shifted color is blended into the image; the
    shift is uniform over the region so downstream feature differencing sees a
    crisply localized change. The injected region for any call is recoverable
    via :func:`injected_region`.
    """

    def __init__(self, seed=0):
        self.seed = seed

    def generate(self, image, prompt):
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"generator expects H x W x 3, got {arr.shape}")
        region = injected_region(arr, prompt, self.seed)
        rng = np.random.default_rng(
            _digest_seed(self.seed, hashlib.sha256(arr.tobytes()).digest(),
                         prompt, "color"))
        shift = rng.uniform(0.08, 0.16, size=3) * rng.choice([-1.0, 1.0], size=3)
        out = arr.copy()
        out[region] = np.clip(out[region] + shift, 0.0, 1.0)
        return out


# ---------------------------------------------------------------------------
# Mock embedder

_DEFECT_LEXICON = (
    "scratch", "crack", "dent", "stain", "burn", "hole", "chip", "tear",
    "broken", "bent", "corro", "contamin", "discolor", "split", "missing",
    "defect", "damage", "gouge", "fray", "puncture", "delaminat", "swollen",
    "crushed", "mold", "bubble", "void", "fade", "peel", "speck", "mark",
    "charred", "smudge", "residue", "oxid", "blacken", "scour", "groove",
    "notch", "fracture", "ridge", "particle", "absent", "depress", "separation",
    "streak", "splinter", "blister", "scrape", "erosion", "pit",
)


class MockEmbedder(ImageTextEmbedder):
    """Seeded embedder whose similarities react to actual content.

    Texts that mention defect vocabulary and images with high local curvature
    (sharp, defect-like detail on an otherwise smooth product photo) share a
    dedicated signal coordinate; everything else is content-hashed noise. A
    convincingly altered image therefore aligns with its defect prompt, while
    unchanged images and normal prompts stay near-orthogonal, which is the
    behaviour the retention conditions need to be exercised end to end.
    """

    def __init__(self, dim=64, seed=0, signal=0.8, noise=0.55):
        if dim < 8:
            raise ValidationError("embedding dim must be at least 8")
        self.dim = dim
        self.seed = seed
        self.signal = signal
        self.noise = noise

    def _noise_vec(self, key):
        rng = np.random.default_rng(_digest_seed(self.seed, key))
        v = rng.normal(size=self.dim)
        v[0] = 0.0
        return v / np.linalg.norm(v)

    def embed_text(self, text):
        lowered = text.lower()
        hit = any(word in lowered for word in _DEFECT_LEXICON)
        v = self.noise * self._noise_vec("text:" + text)
        v[0] = self.signal if hit else 0.0
        return v / np.linalg.norm(v)

    def embed_image(self, image):
        arr = np.asarray(image, dtype=np.float64)
        gray = arr.mean(axis=2)
        lap = (4.0 * gray[1:-1, 1:-1] - gray[:-2, 1:-1] - gray[2:, 1:-1]
               - gray[1:-1, :-2] - gray[1:-1, 2:])
        # a sharp localized edge dominates the upper tail of |curvature|
        curvature = float(np.quantile(np.abs(lap), 0.99))
        strength = float(np.clip((curvature - 0.01) * 30.0, 0.0, 1.0))
        key = hashlib.sha256(arr.tobytes()).hexdigest()
        v = self.noise * self._noise_vec("image:" + key)
        v[0] = self.signal * strength
        return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# Mock feature extractors


class PatchProjectionExtractor(SemanticFeatureExtractor, StructuralFeatureExtractor):
    """Patch-hash feature extractor: seeded random projection of local patches.

    Each layer tiles the image into ``stride``-spaced cells, takes a
    ``window`` x ``window`` pixel patch per cell, and projects it through a
    fixed seeded matrix. A cell's features depend only on its own patch, so
    identical images produce identical stacks and a localized pixel change
    perturbs only the covering cells. With text conditioning the channels are
    re-scaled by gains hashed from the text, the same for every image under
    the same prompt.

    layers: sequence of (layer_id, stride, channels, window).
    """

    concurrency_safe = True

    def __init__(self, layers=(("p0", 4, 6, 4),), seed=0, text_conditioned=False):
        if not layers:
            raise ValidationError("extractor needs at least one layer")
        self.layers = tuple(layers)
        self.seed = seed
        self.text_conditioned = text_conditioned
        self._proj = {}
        for idx, (layer_id, stride, channels, window) in enumerate(self.layers):
            if window < 1 or stride < 1 or channels < 1:
                raise ValidationError(f"bad layer spec {self.layers[idx]}")
            rng = np.random.default_rng(_digest_seed(seed, "proj", idx, layer_id))
            mat = rng.normal(size=(channels, window * window * 3))
            self._proj[layer_id] = mat / math.sqrt(window * window * 3)

    def _text_gains(self, text, channels, layer_id):
        rng = np.random.default_rng(_digest_seed(self.seed, "gain", layer_id, text))
        return rng.uniform(0.5, 1.5, size=channels)

    def extract(self, image, text=None):
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValidationError(f"extractor expects H x W x 3, got {arr.shape}")
        if self.text_conditioned and not text:
            raise ValidationError("text-conditioned extractor needs a prompt")
        h_img, w_img = arr.shape[:2]
        out_layers = []
        for layer_id, stride, channels, window in self.layers:
            gh = -(-h_img // stride)
            gw = -(-w_img // stride)
            pad_h = (gh - 1) * stride + window - h_img
            pad_w = (gw - 1) * stride + window - w_img
            padded = np.pad(arr, ((0, max(0, pad_h)), (0, max(0, pad_w)), (0, 0)),
                            mode="edge")
            patches = np.lib.stride_tricks.sliding_window_view(
                padded, (window, window, 3))[::stride, ::stride, 0]
            flat = patches.reshape(gh, gw, -1)
            feats = np.einsum("hwk,ck->chw", flat, self._proj[layer_id])
            if self.text_conditioned:
                gains = self._text_gains(text, channels, layer_id)
                feats = feats * gains[:, None, None]
            out_layers.append(FeatureLayer(layer_id=layer_id, stride=stride,
                                           values=feats))
        return FeatureStack(source_height=h_img, source_width=w_img,
                            layers=tuple(out_layers))


def default_semantic_mock(seed=0):
    """Mock semantic extractor: one text-conditioned mid-stride layer."""
    return PatchProjectionExtractor(layers=(("sem0", 4, 6, 4),), seed=seed,
                                    text_conditioned=True)


def default_structural_mock(seed=0):
    """Mock structural extractor: two per-pixel layers with distinct projections.

    Per-pixel windows keep the change support exact, so localization checks
    against the injected region are well posed at desk scale.
    """
    return PatchProjectionExtractor(layers=(("str0", 1, 4, 1), ("str1", 1, 6, 1)),
                                    seed=seed, text_conditioned=False)


# ---------------------------------------------------------------------------
# Mock quality-metric backends


class MockClassifier(ImageClassifier):
    """Seeded classifier head over pooled pixels; deterministic per image."""

    def __init__(self, num_classes=10, seed=0):
        self.num_classes = num_classes
        rng = np.random.default_rng(_digest_seed(seed, "clf"))
        self._weights = rng.normal(size=(num_classes, 64)) * 4.0

    def class_distribution(self, image):
        arr = np.asarray(image, dtype=np.float64)
        gray = arr.mean(axis=2)
        h, w = gray.shape
        ys = np.linspace(0, h, 9).astype(int)
        xs = np.linspace(0, w, 9).astype(int)
        pooled = np.empty(64)
        k = 0
        for i in range(8):
            for j in range(8):
                pooled[k] = gray[ys[i]:max(ys[i] + 1, ys[i + 1]),
                                 xs[j]:max(xs[j] + 1, xs[j + 1])].mean()
                k += 1
        logits = self._weights @ pooled
        logits -= logits.max()
        p = np.exp(logits)
        return p / p.sum()


class MockPerceptualDistance(PerceptualDistance):
    """Mean absolute pixel difference; zero for identical images."""

    def distance(self, image_a, image_b):
        a = np.asarray(image_a, dtype=np.float64)
        b = np.asarray(image_b, dtype=np.float64)
        if a.shape != b.shape:
            raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
        return float(np.mean(np.abs(a - b)))


# ---------------------------------------------------------------------------
# Pretrained-model wrappers (require downloaded weights; not used in tests)


class ClipEmbedder(ImageTextEmbedder):
    """Wrapper around a pretrained contrastive image-text encoder."""

    def __init__(self, model_name="openai/clip-vit-base-patch32", device="cpu"):
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise ConfigurationError("transformers is required for the clip backend") from exc
        self.model = CLIPModel.from_pretrained(model_name).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_name)
        self.device = device
        self.dim = self.model.config.projection_dim

    def embed_image(self, image):
        import torch

        pil = Image.fromarray(np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8))
        inputs = self.processor(images=pil, return_tensors="pt").to(self.device)
        with torch.no_grad():
            feat = self.model.get_image_features(**inputs)[0]
        v = feat.cpu().numpy().astype(np.float64)
        return v / np.linalg.norm(v)

    def embed_text(self, text):
        import torch

        inputs = self.processor(text=[text], return_tensors="pt",
                                padding=True, truncation=True).to(self.device)
        with torch.no_grad():
            feat = self.model.get_text_features(**inputs)[0]
        v = feat.cpu().numpy().astype(np.float64)
        return v / np.linalg.norm(v)


class GroundingDetectorExtractor(SemanticFeatureExtractor):
    """Wrapper around a pretrained open-vocabulary grounding detector.

    Exposes the cross-modal fusion features of the selected intermediate layer
    as a one-layer stack. Requires the model weights to be available locally.
    """

    def __init__(self, model_name="IDEA-Research/grounding-dino-tiny",
                 layer_index=-1, device="cpu"):
        try:
            from transformers import AutoModelForZeroShotObjectDetection, AutoProcessor
        except ImportError as exc:
            raise ConfigurationError("transformers is required for the gdino backend") from exc
        self.model = AutoModelForZeroShotObjectDetection.from_pretrained(model_name)
        self.model = self.model.to(device).eval()
        self.processor = AutoProcessor.from_pretrained(model_name)
        self.layer_index = layer_index
        self.device = device

    def extract(self, image, text):
        import torch

        pil = Image.fromarray(np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8))
        h, w = np.asarray(image).shape[:2]
        inputs = self.processor(images=pil, text=text, return_tensors="pt").to(self.device)
        with torch.no_grad():
            outputs = self.model(**inputs, output_hidden_states=True)
        # vision hidden states of the cross-modal encoder, tokens -> grid
        hidden = outputs.encoder_vision_hidden_states[self.layer_index][0]
        n_tokens, channels = hidden.shape
        side = int(round(math.sqrt(n_tokens)))
        grid = hidden[: side * side].T.reshape(channels, side, side).cpu().numpy()
        stride = max(1, round(h / side))
        layer = FeatureLayer(layer_id=f"fusion{self.layer_index}", stride=stride,
                             values=grid.astype(np.float64))
        return FeatureStack(source_height=side * stride, source_width=side * stride,
                            layers=(layer,))


class SegmentationBackboneExtractor(StructuralFeatureExtractor):
    """Wrapper around a pretrained real-time segmentation backbone.

    Exposes the selected pyramid feature maps as a multi-layer stack. Requires
    the model weights to be available locally.
    """

    def __init__(self, weights_path, layer_indices=(2, 4, 6), device="cpu"):
        try:
            import torch
        except ImportError as exc:  # pragma: no cover - torch is a hard dep
            raise ConfigurationError("torch is required for the segmentation backend") from exc
        self.model = torch.load(weights_path, map_location=device, weights_only=False)
        self.model = getattr(self.model, "model", self.model).eval()
        self.layer_indices = tuple(layer_indices)
        self.device = device

    def extract(self, image):
        import torch

        arr = np.asarray(image, dtype=np.float32)
        h, w = arr.shape[:2]
        x = torch.from_numpy(arr).permute(2, 0, 1)[None].to(self.device)
        feats = {}

        hooks = []
        modules = list(self.model.children())
        for idx in self.layer_indices:
            def keep(_m, _i, out, idx=idx):
                feats[idx] = out

            hooks.append(modules[idx].register_forward_hook(keep))
        try:
            with torch.no_grad():
                self.model(x)
        finally:
            for hook in hooks:
                hook.remove()
        layers = []
        for idx in self.layer_indices:
            fmap = feats[idx]
            if isinstance(fmap, (tuple, list)):
                fmap = fmap[0]
            fmap = fmap[0].cpu().numpy().astype(np.float64)
            stride = max(1, round(h / fmap.shape[1]))
            layers.append(FeatureLayer(layer_id=f"pyr{idx}", stride=stride, values=fmap))
        return FeatureStack(source_height=h, source_width=w, layers=tuple(layers))
