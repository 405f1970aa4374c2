"""Scikit-learn style wrapper around the patch-to-image workflow."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import graph
from .architectures import build_reference
from .graph import NetworkSpec, init_params
from .imaging import ImageSample, split_train_val
from .metrics import confusion
from .patching import DEFAULT_PATCH_SIZE, DEFAULT_STRIDE, plan_grid, segment_by_patches
from .pipeline import phase1_build_patch_db, phase2_train_patch, phase3_transfer, phase4_finetune
from .training import TrainConfig
from .validation import check_images, check_masks


class PatchToImageSegmenter(BaseEstimator):
    """Binary segmenter trained on patches and applied to whole images.

    ``fit`` extracts a stride grid of patches, trains the network on them,
    copies the weights to the image-level network and optionally fine-tunes
    on the full images. ``predict_proba`` segments each image in one forward
    pass (or by patch aggregation when ``inference="patch"``).

    Parameters
    ----------
    family : {"light", "mini-unet", "dense"} or NetworkSpec, default="light"
    patch_size, stride : int
        Patch database geometry.
    patch_epochs : int, default=10
        Epoch cap for patch training (early stopping may end it sooner).
    finetune_epochs : int, default=0
        Whole-image epochs after the transfer; 0 keeps the frozen weights.
    batch_size : int, default=32
    lr0 : float, default=1.0
    val_fraction : float, default=0.2
        Fraction of images held out (before patch extraction) for validation.
    threshold : float, default=0.5
    inference : {"image", "patch"}, default="image"
    augment : bool, default=True
    random_state : int, default=0

    Attributes
    ----------
    spec_ : NetworkSpec
    params_ : ParameterSet
        Weights after the last training phase.
    patch_history_, finetune_history_ : History or None
    """

    def __init__(self, family="light", patch_size=DEFAULT_PATCH_SIZE, stride=DEFAULT_STRIDE,
                 patch_epochs=10, finetune_epochs=0, batch_size=32, lr0=1.0, val_fraction=0.2,
                 threshold=0.5, inference="image", augment=True, random_state=0):
        self.family = family
        self.patch_size = patch_size
        self.stride = stride
        self.patch_epochs = patch_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.inference = inference
        self.augment = augment
        self.random_state = random_state

    def _spec(self):
        if isinstance(self.family, NetworkSpec):
            return self.family
        return build_reference(self.family)

    def fit(self, X, y):
        """Train on images ``X`` (N, 1, H, W) with binary masks ``y``."""
        if self.inference not in ("image", "patch"):
            raise ValueError(f"inference must be 'image' or 'patch', got {self.inference!r}")
        spec = self._spec()
        X = check_images(X, channels=spec.in_channels, multiple_of=spec.downsampling)
        y = check_masks(y, X)
        if X.shape[0] < 2:
            raise ValueError("need at least two images to hold one out for validation")
        samples = [ImageSample(X[i : i + 1], y[i : i + 1], X.shape[2:], str(i))
                   for i in range(X.shape[0])]
        train, val = split_train_val(samples, self.val_fraction, self.random_state)

        patch_cfg = TrainConfig(batch_size=self.batch_size, lr0=self.lr0, augment=self.augment,
                                max_epochs=self.patch_epochs, seed=self.random_state)
        train_db, _ = phase1_build_patch_db(train, "grid", self.patch_size, self.stride)
        val_db, _ = phase1_build_patch_db(val, "grid", self.patch_size, self.stride)
        f_p, self.patch_history_ = phase2_train_patch(spec, train_db, val_db, patch_cfg,
                                                      self.random_state)
        params = phase3_transfer(f_p, spec)
        self.finetune_history_ = None
        if self.finetune_epochs:
            image_cfg = TrainConfig.for_mode("image", lr0=self.lr0, augment=self.augment,
                                             max_epochs=self.finetune_epochs,
                                             seed=self.random_state)
            params, self.finetune_history_ = phase4_finetune(spec, params, train, val, image_cfg)
        self.spec_ = spec
        self.params_ = params
        return self

    def predict_proba(self, X):
        """Per-pixel foreground probability, shape (N, 1, H, W)."""
        check_is_fitted(self, "params_")
        X = check_images(X, channels=self.spec_.in_channels, multiple_of=self.spec_.downsampling)
        if self.inference == "image":
            return graph.predict(self.spec_, self.params_, X)
        plan = plan_grid(X.shape[2:], self.patch_size, self.stride)
        return np.concatenate([
            segment_by_patches(self.spec_, self.params_, X[i : i + 1], plan)
            for i in range(X.shape[0])
        ])

    def predict(self, X):
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y):
        """Pooled Dice coefficient at ``threshold``."""
        probs = self.predict_proba(X)
        y = check_masks(y, probs)
        return confusion(probs, y, self.threshold).dice

    @classmethod
    def from_params(cls, spec, params, **kwargs):
        """Wrap already-trained weights without fitting."""
        est = cls(family=spec, **kwargs)
        graph.check_params(spec, params)
        est.spec_ = spec
        est.params_ = params
        est.patch_history_ = est.finetune_history_ = None
        return est


def untrained(family="light", seed=0, **kwargs):
    """An estimator holding freshly initialized weights (useful for timing)."""
    spec = family if isinstance(family, NetworkSpec) else build_reference(family)
    return PatchToImageSegmenter.from_params(spec, init_params(spec, seed), **kwargs)
