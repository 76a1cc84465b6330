"""Shared fixture builders for the test suite."""

import numpy as np

from mirage.core import ImageRef, write_image_png


def product_image(h=64, w=64, seed=0):
    """Smooth synthetic product-photo stand-in with mid-range values.

    Kept inside [0.18, 0.82] so additive defect shifts never clip.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = 0.35 + 0.3 * (0.5 * yy + 0.5 * xx)
    base = base + 0.08 * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 1.5) + rng.random()))
    img = np.stack([base + 0.02 * k for k in range(3)], axis=2)
    return np.clip(img, 0.18, 0.82)


def make_normals(root, category, count, h=64, w=64, seed=0):
    """Write `count` normal PNGs under root/<category>/ and return their paths."""
    cat_dir = root / category
    cat_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        p = cat_dir / f"normal_{i:03d}.png"
        write_image_png(product_image(h, w, seed=seed * 1000 + i), p)
        paths.append(p)
    return paths


def image_refs(paths, category, role="normal", h=64, w=64):
    return tuple(ImageRef(path=str(p), category=category, role=role,
                          width=w, height=h) for p in paths)
