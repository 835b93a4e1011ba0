"""Input validation helpers shared by the estimator, trainer, and CLI."""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigurationError, ContractError

__all__ = ["as_image_batch", "check_labels", "check_dataset_geometry"]


def as_image_batch(X, *, channels: int | None = None, n: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a float32 array of shape (N, channels, n, n).

    Accepts (N, C, n, n) or (N, n, n) (a single implicit channel). Values are
    checked finite; geometry is checked against ``channels``/``n`` when given.
    """

    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[:, None, :, :]
    if arr.ndim != 4:
        raise ContractError(
            f"expected images of shape (N, C, n, n) or (N, n, n), got {arr.shape}"
        )
    if arr.shape[2] != arr.shape[3]:
        raise ContractError(f"images must be square, got {arr.shape[2]}x{arr.shape[3]}")
    if not np.isfinite(arr).all():
        raise ContractError("images contain non-finite values")
    if channels is not None and arr.shape[1] != channels:
        raise ConfigurationError(
            f"expected {channels} channel(s), got {arr.shape[1]}"
        )
    if n is not None and arr.shape[2] != n:
        raise ConfigurationError(
            f"expected {n}x{n} images, got {arr.shape[2]}x{arr.shape[3]}"
        )
    return arr


def check_labels(y, n_samples: int, m: int | None = None) -> np.ndarray:
    """Coerce labels to int64 of shape (n_samples,), range-checked against m."""

    labels = np.asarray(y)
    if labels.shape != (n_samples,):
        raise ContractError(
            f"expected {n_samples} labels, got shape {labels.shape}"
        )
    labels = labels.astype(np.int64)
    if m is not None and (labels.min(initial=0) < 0 or labels.max(initial=0) >= m):
        raise ContractError(f"labels must lie in [0, {m})")
    return labels


def check_dataset_geometry(images: np.ndarray, config) -> None:
    """Raise ConfigurationError when images do not match a CodeConfig."""

    if images.shape[1:] != (config.channels, config.n, config.n):
        raise ConfigurationError(
            f"dataset geometry {images.shape[1:]} does not match code config "
            f"{(config.channels, config.n, config.n)}"
        )
