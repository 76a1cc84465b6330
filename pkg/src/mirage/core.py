"""Shared domain types and file formats.

Images travel through the pipeline as float arrays in [0, 1] (H x W x 3);
8-bit PNG/JPEG on disk. Binary masks are stored as single-channel PNGs with
0 = normal and 255 = anomalous, matching the convention of the common
industrial inspection benchmarks. Score maps and feature tensors use a tiny
self-describing raw format ("MTEN") so they can be exchanged with tools in
any language without a serialization dependency.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageIOError, TensorFormatError, ValidationError

IMAGE_ROLES = ("normal", "generated", "reference")

MTEN_MAGIC = b"MTEN"
MTEN_VERSION = 1


@dataclass(frozen=True)
class ImageRef:
    """Reference to an image file plus the metadata the pipeline tracks."""

    path: str
    category: str
    role: str
    width: int
    height: int

    def __post_init__(self):
        if self.role not in IMAGE_ROLES:
            raise ValidationError(f"unknown image role {self.role!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"non-positive image dims {self.width}x{self.height}")


@dataclass(frozen=True)
class ScoreMap:
    """Per-pixel anomaly evidence: H x W, finite, non-negative."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValidationError(f"score map must be 2-d, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("score map contains non-finite values")
        if np.any(v < 0):
            raise ValidationError("score map contains negative values")
        object.__setattr__(self, "values", v)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class BinaryMask:
    """Thresholded anomaly mask: H x W with values in {0, 1}."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValidationError(f"mask must be 2-d, got shape {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise ValidationError("mask values must be exactly 0 or 1")
        object.__setattr__(self, "values", v.astype(np.uint8))

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureLayer:
    """One spatial feature map: C x h x w values at a declared stride."""

    layer_id: str
    stride: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValidationError(f"feature layer must be C x h x w, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"layer {self.layer_id!r} has non-finite values")
        if self.stride < 1:
            raise ValidationError(f"layer {self.layer_id!r} has stride {self.stride}")
        object.__setattr__(self, "values", v)

    @property
    def channels(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class FeatureStack:
    """Ordered multi-layer feature maps extracted from one source image."""

    source_height: int
    source_width: int
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValidationError("feature stack needs at least one layer")
        for layer in layers:
            # grid dims must cover the source within one stride unit
            h, w = layer.values.shape[1], layer.values.shape[2]
            if abs(h * layer.stride - self.source_height) > layer.stride or abs(
                w * layer.stride - self.source_width
            ) > layer.stride:
                raise ValidationError(
                    f"layer {layer.layer_id!r} grid {h}x{w} at stride {layer.stride} "
                    f"does not cover source {self.source_height}x{self.source_width}"
                )
        object.__setattr__(self, "layers", layers)


def read_image(path, category="", role="normal"):
    """Decode an image file into (ImageRef, H x W x 3 float buffer in [0, 1]).

    Grayscale inputs are replicated to 3 channels; alpha is dropped.
    """
    p = Path(path)
    if not p.exists():
        raise ImageIOError(f"image file not found: {p}")
    try:
        with Image.open(p) as img:
            rgb = img.convert("RGB")
            buf = np.asarray(rgb, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageIOError(f"cannot decode image {p}: {exc}") from exc
    h, w = buf.shape[:2]
    ref = ImageRef(path=str(p), category=category, role=role, width=w, height=h)
    return ref, buf


def write_image_png(buffer, path):
    """Write an H x W x 3 float buffer in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(buffer, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected H x W x 3 buffer, got shape {arr.shape}")
    data = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(data, mode="RGB").save(p, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write image {p}: {exc}") from exc


def write_mask_png(mask, path):
    """Write a BinaryMask as a single-channel 8-bit PNG (0 / 255)."""
    data = (mask.values * 255).astype(np.uint8)
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    try:
        Image.fromarray(data, mode="L").save(p, format="PNG")
    except OSError as exc:
        raise ImageIOError(f"cannot write mask {p}: {exc}") from exc


def read_mask_png(path):
    """Read a 0/255 single-channel PNG back into a BinaryMask.

    Any non-zero pixel counts as anomalous, which tolerates masks saved
    with anti-aliased edges by other tools.
    """
    p = Path(path)
    if not p.exists():
        raise ImageIOError(f"mask file not found: {p}")
    try:
        with Image.open(p) as img:
            data = np.asarray(img.convert("L"))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageIOError(f"cannot decode mask {p}: {exc}") from exc
    return BinaryMask((data > 0).astype(np.uint8))


def write_tensor(path, array):
    """Serialize an n-d float array to the MTEN raw format.

    Layout: magic "MTEN", u8 version, u8 rank, rank x u32 little-endian dims,
    then row-major little-endian IEEE-754 float32 payload.
    """
    arr = np.ascontiguousarray(array, dtype="<f4")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("refusing to write non-finite tensor")
    if arr.ndim > 255:
        raise ValidationError(f"rank {arr.ndim} exceeds format limit")
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack("<4sBB", MTEN_MAGIC, MTEN_VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(p, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(arr.tobytes(order="C"))


def read_tensor(path):
    """Read an MTEN file back into a float32 array (bit-exact round trip)."""
    p = Path(path)
    with open(p, "rb") as fh:
        blob = fh.read()
    if len(blob) < 6:
        raise TensorFormatError(f"{p}: truncated header")
    magic, version, rank = struct.unpack_from("<4sBB", blob, 0)
    if magic != MTEN_MAGIC:
        raise TensorFormatError(f"{p}: bad magic {magic!r}")
    if version != MTEN_VERSION:
        raise TensorFormatError(f"{p}: unsupported version {version}")
    offset = 6
    if len(blob) < offset + 4 * rank:
        raise TensorFormatError(f"{p}: truncated dims")
    dims = struct.unpack_from(f"<{rank}I", blob, offset)
    offset += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    expected = offset + 4 * count
    if len(blob) != expected:
        raise TensorFormatError(f"{p}: payload is {len(blob) - offset} bytes, expected {4 * count}")
    flat = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return flat.reshape(dims).copy()
