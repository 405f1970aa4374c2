"""Input validation helpers shared by the estimators and the pipeline."""

import numpy as np


def check_images(X, *, channels=None, multiple_of=1, name="X"):
    """Coerce ``X`` to a float32 ``(N, C, H, W)`` array.

    Accepts a single ``(H, W)`` image, an ``(N, H, W)`` stack or a 4-D batch.
    """
    X = np.asarray(X)
    if X.dtype == object:
        raise ValueError(f"{name}: ragged image lists are not supported; pass one size per call")
    if X.ndim == 2:
        X = X[None, None]
    elif X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"{name} must be 2-D, 3-D or 4-D, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.issubdtype(X.dtype, np.number) and X.dtype != bool:
        raise ValueError(f"{name} must be numeric, got {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains NaN or infinity")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"{name} has {X.shape[1]} channels, expected {channels}")
    if multiple_of > 1 and (X.shape[2] % multiple_of or X.shape[3] % multiple_of):
        raise ValueError(
            f"{name} spatial size {X.shape[2:]} is not a multiple of {multiple_of}"
        )
    return X


def check_masks(y, X=None, name="y"):
    """Coerce ``y`` to a binary float32 ``(N, 1, H, W)`` array matching ``X``."""
    y = check_images(y, name=name)
    if y.shape[1] != 1:
        raise ValueError(f"{name} must have a single channel")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError(f"{name} must be binary (0/1)")
    if X is not None and (y.shape[0] != X.shape[0] or y.shape[2:] != X.shape[2:]):
        raise ValueError(f"{name} shape {y.shape} does not match images {X.shape}")
    return y
