"""Patch extraction/merging, patch databases and patch-based inference.

A :class:`PatchPlan` is the pair of operator families (extract, merge) with
``merge(extract(X)) == X`` for every image ``X`` the plan covers.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import graph

DEFAULT_PATCH_SIZE = 64
DEFAULT_STRIDE = 16


@dataclass(frozen=True)
class PatchPlan:
    patch_size: int
    offsets: tuple
    image_size: tuple
    merge_rule: str = "mean"

    def __post_init__(self):
        h, w = self.image_size
        p = self.patch_size
        if self.merge_rule not in ("mean", "sum-normalized"):
            raise ValueError(f"unknown merge rule {self.merge_rule!r}")
        for r, c in self.offsets:
            if r < 0 or c < 0 or r + p > h or c + p > w:
                raise ValueError(f"patch at {(r, c)} leaves the {h}x{w} image")
        if (self.coverage() == 0).any():
            raise ValueError("plan leaves pixels uncovered")

    def __len__(self):
        return len(self.offsets)

    def coverage(self):
        cov = np.zeros(self.image_size, dtype=np.int64)
        p = self.patch_size
        for r, c in self.offsets:
            cov[r : r + p, c : c + p] += 1
        return cov


def _anchors(extent, p, stride):
    anchors = list(range(0, extent - p + 1, stride))
    if anchors[-1] != extent - p:
        anchors.append(extent - p)
    return anchors


def plan_grid(image_size, patch_size, stride, merge_rule="mean"):
    """Regular grid of anchors plus a final clamped anchor per axis."""
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    h, w = image_size
    if patch_size <= 0 or patch_size > h or patch_size > w:
        raise ValueError(f"patch size {patch_size} does not fit a {h}x{w} image")
    if stride > patch_size:
        raise ValueError(f"stride {stride} > patch size {patch_size} leaves gaps")
    rows = _anchors(h, patch_size, stride)
    cols = _anchors(w, patch_size, stride)
    offsets = tuple((r, c) for r in rows for c in cols)
    return PatchPlan(patch_size, offsets, (h, w), merge_rule)


def extract(image, plan):
    """List of ``(..., p, p)`` sub-windows, one per plan offset."""
    image = np.asarray(image)
    if image.shape[-2:] != tuple(plan.image_size):
        raise ValueError(f"image size {image.shape[-2:]} != plan size {plan.image_size}")
    p = plan.patch_size
    return [image[..., r : r + p, c : c + p].copy() for r, c in plan.offsets]


def merge(patches, plan):
    """Place patches back into an image, resolving overlaps by ``plan.merge_rule``.

    ``mean`` keeps a running average per pixel (``m += (x - m) / k``), so
    pixels whose covering patches agree are reconstructed bit-exactly.
    ``sum-normalized`` divides the float64 sum by the coverage count.
    """
    if len(patches) != len(plan):
        raise ValueError(f"got {len(patches)} patches for a plan of {len(plan)}")
    p = plan.patch_size
    lead = np.shape(patches[0])[:-2]
    dtype = np.result_type(patches[0], np.float32)
    if plan.merge_rule == "sum-normalized":
        acc = np.zeros(lead + tuple(plan.image_size), dtype=np.float64)
        for patch, (r, c) in zip(patches, plan.offsets):
            acc[..., r : r + p, c : c + p] += patch
        return (acc / plan.coverage()).astype(dtype)
    out = np.zeros(lead + tuple(plan.image_size), dtype=dtype)
    count = np.zeros(plan.image_size, dtype=dtype)
    for patch, (r, c) in zip(patches, plan.offsets):
        k = count[r : r + p, c : c + p]
        k += 1
        region = out[..., r : r + p, c : c + p]
        region += (np.asarray(patch, dtype=dtype) - region) / k
    return out


@dataclass
class PatchDataset:
    """Paired patches ``(n, 1, p, p)`` with the image id and anchor of each."""

    images: np.ndarray
    masks: np.ndarray
    sources: list

    def __len__(self):
        return len(self.images)

    @property
    def positive_fraction(self):
        return float(self.masks.mean()) if len(self) else 0.0

    def save(self, directory):
        """Write ``images.npy``, ``masks.npy`` and an ``index.json``."""
        os.makedirs(directory, exist_ok=True)
        np.save(os.path.join(directory, "images.npy"), self.images)
        np.save(os.path.join(directory, "masks.npy"), self.masks)
        index = {
            "count": len(self),
            "patch_size": int(self.images.shape[-1]) if len(self) else None,
            "positive_fraction": self.positive_fraction,
            "patches": [{"id": s, "row": int(r), "col": int(c)} for s, (r, c) in self.sources],
        }
        with open(os.path.join(directory, "index.json"), "w") as fh:
            json.dump(index, fh, indent=1)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "index.json")) as fh:
            index = json.load(fh)
        images = np.load(os.path.join(directory, "images.npy"))
        masks = np.load(os.path.join(directory, "masks.npy"))
        sources = [(e["id"], (e["row"], e["col"])) for e in index["patches"]]
        return cls(images, masks, sources)


def _check_patch_size(patch_size):
    if patch_size <= 0 or patch_size % 4:
        raise ValueError(f"patch size must be a positive multiple of 4, got {patch_size}")


def _stack(images, masks, sources, p):
    if not images:
        return PatchDataset(np.zeros((0, 1, p, p), np.float32), np.zeros((0, 1, p, p), np.float32), [])
    return PatchDataset(
        np.concatenate(images).astype(np.float32),
        np.concatenate(masks).astype(np.float32),
        sources,
    )


def build_patch_db_grid(samples, patch_size=DEFAULT_PATCH_SIZE, stride=DEFAULT_STRIDE):
    """Every grid patch of every sample, in sample then row-major anchor order."""
    _check_patch_size(patch_size)
    images, masks, sources = [], [], []
    for s in samples:
        plan = plan_grid(s.size, patch_size, stride)
        images += extract(s.image, plan)
        masks += extract(s.mask, plan)
        sources += [(s.id, off) for off in plan.offsets]
    return _stack(images, masks, sources, patch_size)


def build_patch_db_balanced(samples, patch_size=DEFAULT_PATCH_SIZE, n_pos=500, n_neg=500, seed=0):
    """Class-balanced patches centred on random foreground and background pixels.

    Centres near the border are clamped so the patch stays inside the image.
    """
    _check_patch_size(patch_size)
    rng = np.random.default_rng(seed)
    p = patch_size
    images, masks, sources = [], [], []
    for s in samples:
        h, w = s.size
        if p > h or p > w:
            raise ValueError(f"patch size {p} does not fit image {s.id!r} ({h}x{w})")
        m = s.mask[0, 0]
        fg = np.flatnonzero(m > 0.5)
        bg = np.flatnonzero(m <= 0.5)
        if fg.size == 0 or bg.size == 0:
            cls = "foreground" if fg.size == 0 else "background"
            raise ValueError(f"image {s.id!r} has no {cls} pixels to centre patches on")
        centres = np.concatenate([rng.choice(fg, n_pos), rng.choice(bg, n_neg)])
        rows = np.clip(centres // w - p // 2, 0, h - p)
        cols = np.clip(centres % w - p // 2, 0, w - p)
        for r, c in zip(rows, cols):
            images.append(s.image[:, :, r : r + p, c : c + p])
            masks.append(s.mask[:, :, r : r + p, c : c + p])
            sources.append((s.id, (int(r), int(c))))
    return _stack(images, masks, sources, patch_size)


def segment_by_patches(spec, params, image, plan, batch_size=1):
    """Patch-based segmentation: extract, forward each patch, average overlaps."""
    image = np.asarray(image, dtype=np.float32)
    patches = extract(image, plan)
    outputs = []
    for i in range(0, len(patches), batch_size):
        batch = np.concatenate(patches[i : i + batch_size], axis=0)
        out = graph.predict(spec, params, batch)
        outputs += [out[j : j + 1] for j in range(out.shape[0])]
    return merge(outputs, plan)
