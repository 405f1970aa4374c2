"""Seeded synthetic vessel images: random Bezier curves on a textured background."""

from __future__ import annotations

import os

import numpy as np
import yaml
from scipy import ndimage

from .imaging import ImageSample, preprocess, write_png


def _bezier(ctrl, n=160):
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2, p3 = ctrl
    return ((1 - t) ** 3) * p0 + 3 * ((1 - t) ** 2) * t * p1 + 3 * (1 - t) * t**2 * p2 + t**3 * p3


def _draw_curve(dist_mask, pts, widths):
    h, w = dist_mask.shape
    for (y, x), r in zip(pts, widths):
        y0, y1 = int(max(0, np.floor(y - r - 1))), int(min(h, np.ceil(y + r + 2)))
        x0, x1 = int(max(0, np.floor(x - r - 1))), int(min(w, np.ceil(x + r + 2)))
        if y0 >= y1 or x0 >= x1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist_mask[y0:y1, x0:x1] |= (yy - y) ** 2 + (xx - x) ** 2 <= r * r


def make_vessel_image(size=(256, 256), seed=0, n_curves=None):
    """Return ``(image, mask)`` as 2-D float arrays in [0, 1]."""
    rng = np.random.default_rng(seed)
    h, w = size
    noise = rng.standard_normal((h, w))
    texture = ndimage.gaussian_filter(noise, 6) * 4.0 + ndimage.gaussian_filter(noise, 1.5) * 0.6
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = h * rng.uniform(0.35, 0.65), w * rng.uniform(0.35, 0.65)
    vignette = 1 - 0.5 * (((yy - cy) / h) ** 2 + ((xx - cx) / w) ** 2)
    background = 0.45 + 0.08 * texture + 0.15 * (vignette - vignette.mean())

    mask = np.zeros((h, w), dtype=bool)
    n_curves = int(rng.integers(5, 9)) if n_curves is None else n_curves
    for _ in range(n_curves):
        start = rng.uniform([0, 0], [h, w])
        ctrl = [start]
        for _ in range(3):
            ctrl.append(ctrl[-1] + rng.normal(0, 0.35, 2) * np.array([h, w]))
        pts = _bezier(np.array(ctrl), n=int(2 * (h + w)))
        r0 = rng.uniform(1.5, 3.5)
        widths = np.linspace(r0, max(0.6, r0 * 0.35), len(pts))
        _draw_curve(mask, pts, widths)

    soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.8)
    contrast = rng.uniform(0.18, 0.28)
    img = background - contrast * soft + rng.normal(0, 0.025, (h, w))
    return np.clip(img, 0, 1), mask.astype(np.float32)


def make_vessel_dataset(n=30, size=(256, 256), seed=0, preprocess_steps=("gamma", "clahe"),
                        n_test=None):
    """``n`` samples; the last ``n_test`` (default one third) are tagged ``test``."""
    n_test = n // 3 if n_test is None else n_test
    samples = []
    for i in range(n):
        img, mask = make_vessel_image(size, seed=[seed, i])
        x = img[None, None].astype(np.float32)
        if preprocess_steps:
            x = preprocess(x, preprocess_steps)
        samples.append(
            ImageSample(
                image=x,
                mask=mask[None, None],
                original_size=size,
                id=f"syn{i:03d}",
                split="test" if i >= n - n_test else "train",
            )
        )
    return samples


def write_vessel_dataset(directory, n=6, size=(64, 64), seed=0, n_test=None):
    """Write raw PNGs plus a ``manifest.yaml`` describing them; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    n_test = n // 3 if n_test is None else n_test
    entries = []
    for i in range(n):
        img, mask = make_vessel_image(size, seed=[seed, i])
        stem = f"syn{i:03d}"
        write_png(os.path.join(directory, f"{stem}.png"), img)
        write_png(os.path.join(directory, f"{stem}_gt.png"), mask)
        entries.append({"image": f"{stem}.png", "mask": f"{stem}_gt.png", "id": stem,
                        "split": "test" if i >= n - n_test else "train"})
    manifest = {
        "resize": [size[0] - size[0] % 4, size[1] - size[1] % 4],
        "preprocess": ["grayscale", "gamma", "clahe"],
        "gamma": 1.7,
        "gamma_mode": "brighten",
        "clahe": {"tiles": [8, 8], "clip": 2.0, "bins": 256},
        "entries": entries,
    }
    path = os.path.join(directory, "manifest.yaml")
    with open(path, "w") as fh:
        yaml.safe_dump(manifest, fh, sort_keys=False)
    return path
