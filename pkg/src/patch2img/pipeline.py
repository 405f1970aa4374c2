"""The four-phase patch-to-image workflow and the regime comparison.

Phase 1 builds the patch database, phase 2 trains a network on it from
scratch, phase 3 copies those weights unchanged into the image-level network
(the same spec, since an FCNN does not depend on the input size) and phase 4
fine-tunes on whole images.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint, graph
from .graph import init_params
from .imaging import resize_back
from .metrics import METRIC_NAMES, evaluate
from .patching import (
    DEFAULT_PATCH_SIZE,
    DEFAULT_STRIDE,
    build_patch_db_balanced,
    build_patch_db_grid,
    plan_grid,
    segment_by_patches,
)
from .training import TrainConfig, Trainer

REGIMES = ("patch", "image-frozen", "image-finetuned", "image-scratch")
REGIME_LABELS = {
    "patch": "Patch",
    "image-frozen": "Image/Frozen",
    "image-finetuned": "Image/Fine-tuned",
    "image-scratch": "Image/Scratch",
}


class LineageError(ValueError):
    pass


@dataclass
class RunManifest:
    """Provenance of one training or evaluation run, content-hashed."""

    phase: int
    dataset: str
    spec: str
    regime: str
    seed: int = 0
    spec_hash: str = ""
    parent: str | None = None
    parent_phase: int | None = None
    checkpoint: str | None = None
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phase not in (1, 2, 3, 4):
            raise LineageError(f"phase must be 1-4, got {self.phase}")
        if self.regime not in REGIMES:
            raise LineageError(f"unknown regime {self.regime!r}")
        if self.phase == 4 and (self.parent is None or self.parent_phase not in (2, 3)):
            raise LineageError("a phase-4 run must reference a phase-2 checkpoint")

    def to_dict(self):
        return asdict(self)

    def hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canon.encode()).hexdigest()

    def save(self, path):
        d = self.to_dict()
        d["hash"] = self.hash()
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1, default=str)
        return d["hash"]

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        d.pop("hash", None)
        return cls(**d)


def phase1_build_patch_db(samples, strategy="grid", patch_size=DEFAULT_PATCH_SIZE,
                          stride=DEFAULT_STRIDE, n_pos=500, n_neg=500, seed=0):
    """Build the patch database with the grid (vessels) or balanced (optic disc) strategy.

    Returns ``(PatchDataset, stats)``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("empty training set: no images to extract patches from")
    if strategy == "grid":
        db = build_patch_db_grid(samples, patch_size, stride)
    elif strategy == "balanced":
        db = build_patch_db_balanced(samples, patch_size, n_pos, n_neg, seed)
    else:
        raise ValueError(f"unknown patch strategy {strategy!r}")
    stats = {
        "strategy": strategy,
        "count": len(db),
        "images": len(samples),
        "per_image": len(db) / len(samples),
        "patch_size": patch_size,
        "positive_fraction": db.positive_fraction,
    }
    return db, stats


def _pairs(samples):
    return [s.image for s in samples], [s.mask for s in samples]


def phase2_train_patch(spec, train_db, val_db, config=None, seed=0, epochs=None, callback=None):
    """Train ``spec`` from a fresh initialization on patch pairs.

    Returns ``(best_params, history)``.
    """
    config = config or TrainConfig.for_mode("patch", seed=seed)
    params = init_params(spec, seed)
    trainer = Trainer(spec, params, config, "patch")
    best = trainer.fit((train_db.images, train_db.masks), (val_db.images, val_db.masks),
                       epochs=epochs, callback=callback)
    return best, trainer.history


def phase3_transfer(patch_params, patch_spec, image_spec=None):
    """Copy the patch network's weights into the image network unchanged."""
    image_spec = image_spec or patch_spec
    if image_spec.hash() != patch_spec.hash():
        raise LineageError("image spec differs from the patch spec; weights cannot be copied")
    graph.check_params(image_spec, patch_params)
    return patch_params.copy()


def phase4_finetune(spec, image_params, train_samples, val_samples, config=None,
                    epochs=None, callback=None):
    """Continue training the transferred weights on whole images.

    Returns ``(best_params, history)``; history record 0 evaluates the
    transferred (frozen) weights.
    """
    config = config or TrainConfig.for_mode("image")
    trainer = Trainer(spec, image_params, config, "image")
    best = trainer.fit(_pairs(train_samples), _pairs(val_samples), epochs=epochs,
                       callback=callback)
    return best, trainer.history


def train_image_scratch(spec, train_samples, val_samples, config=None, seed=0, epochs=None):
    config = config or TrainConfig.for_mode("image", seed=seed)
    trainer = Trainer(spec, init_params(spec, seed), config, "image")
    best = trainer.fit(_pairs(train_samples), _pairs(val_samples), epochs=epochs)
    return best, trainer.history


def segment_image(spec, params, sample):
    """One forward pass over the whole image, resized back to the original size."""
    prob = graph.predict(spec, params, sample.image)
    return resize_back(prob, sample.original_size)


def segment_image_by_patches(spec, params, sample, patch_size=DEFAULT_PATCH_SIZE,
                             stride=DEFAULT_STRIDE):
    plan = plan_grid(sample.size, patch_size, stride)
    prob = segment_by_patches(spec, params, sample.image, plan)
    return resize_back(prob, sample.original_size)


def _ground_truth(sample):
    if sample.mask_full is not None:
        return sample.mask_full
    from .imaging import resize_mask

    return resize_mask(sample.mask, sample.original_size)


@dataclass
class RegimeResult:
    regime: str
    report: object
    seconds_per_image: float
    probs: list = field(default_factory=list, repr=False)


def evaluate_regime(spec, params, samples, regime, patch_size=DEFAULT_PATCH_SIZE,
                    stride=DEFAULT_STRIDE, use_fov=False, keep_probs=False):
    """Segment every sample (patch aggregation for ``patch``, one pass otherwise) and score."""
    if not samples:
        raise ValueError("split is empty: nothing to evaluate")
    probs, elapsed = [], 0.0
    for s in samples:
        t = time.perf_counter()
        if regime == "patch":
            p = segment_image_by_patches(spec, params, s, patch_size, stride)
        else:
            p = segment_image(spec, params, s)
        elapsed += time.perf_counter() - t
        probs.append(p)
    fovs = [s.fov_full for s in samples] if use_fov else None
    if use_fov and any(f is None for f in fovs):
        raise ValueError("FOV-restricted metrics requested but some samples have no FOV mask")
    report = evaluate(probs, [_ground_truth(s) for s in samples], [s.id for s in samples],
                      fovs=fovs)
    return RegimeResult(regime, report, elapsed / len(samples), probs if keep_probs else [])


@dataclass
class RegimeComparison:
    family: str
    results: dict
    histories: dict = field(default_factory=dict)

    def table(self):
        """Aligned plain-text table: one row per regime, one column per metric."""
        head = f"{'Method':<28}" + "".join(f"{m.upper():>9}" for m in METRIC_NAMES) + f"{'s/img':>10}"
        lines = [head, "-" * len(head)]
        for regime in REGIMES:
            if regime not in self.results:
                continue
            r = self.results[regime]
            name = f"{self.family} {REGIME_LABELS[regime]}"
            vals = "".join(f"{getattr(r.report, m):>9.4f}" for m in METRIC_NAMES)
            lines.append(f"{name:<28}{vals}{r.seconds_per_image:>10.3f}")
        return "\n".join(lines)

    def to_dict(self):
        return {
            "family": self.family,
            "rows": [
                {"regime": regime, "label": REGIME_LABELS[regime],
                 "seconds_per_image": r.seconds_per_image, **r.report.summary(),
                 "per_image": r.report.per_image, "image_ids": r.report.image_ids}
                for regime, r in self.results.items()
            ],
            "histories": {k: h.to_list() for k, h in self.histories.items()},
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, default=float)


def run_regimes(spec, train_samples, val_samples, test_samples, patch_config=None,
                image_config=None, strategy="grid", patch_size=DEFAULT_PATCH_SIZE,
                stride=DEFAULT_STRIDE, seed=0, patch_epochs=None, image_epochs=None,
                use_fov=False, n_pos=500, n_neg=500):
    """Run phases 1-4 plus the scratch baseline and score all four regimes on the test set."""
    patch_config = patch_config or TrainConfig.for_mode("patch", seed=seed)
    image_config = image_config or TrainConfig.for_mode("image", seed=seed)
    train_db, _ = phase1_build_patch_db(train_samples, strategy, patch_size, stride,
                                        n_pos, n_neg, seed)
    val_db, _ = phase1_build_patch_db(val_samples, strategy, patch_size, stride,
                                      n_pos, n_neg, seed + 1)
    f_p, h_patch = phase2_train_patch(spec, train_db, val_db, patch_config, seed, patch_epochs)
    f_i = phase3_transfer(f_p, spec)
    f_ft, h_ft = phase4_finetune(spec, f_i, train_samples, val_samples, image_config,
                                 image_epochs)
    f_scr, h_scr = train_image_scratch(spec, train_samples, val_samples, image_config, seed,
                                       image_epochs)
    kw = dict(patch_size=patch_size, stride=stride, use_fov=use_fov)
    results = {
        "patch": evaluate_regime(spec, f_p, test_samples, "patch", **kw),
        "image-frozen": evaluate_regime(spec, f_i, test_samples, "image-frozen", **kw),
        "image-finetuned": evaluate_regime(spec, f_ft, test_samples, "image-finetuned", **kw),
        "image-scratch": evaluate_regime(spec, f_scr, test_samples, "image-scratch", **kw),
    }
    return RegimeComparison(
        spec.name, results,
        {"patch": h_patch, "image-finetuned": h_ft, "image-scratch": h_scr},
    )


def params_hash(params, spec):
    return hashlib.sha256(checkpoint.dumps(params, spec.hash())).hexdigest()
