"""Input checks shared by the estimator front end."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.utils.validation import check_array, check_consistent_length, column_or_1d

from .errors import ShapeError


def check_images(X, image_shape=None) -> torch.Tensor:
    """Coerce a batch of images to a float ``(N, 3, H, W)`` tensor in [-1, 1].

    Accepts uint8 arrays (channels-last or channels-first, values 0..255) or
    float arrays already in [-1, 1] laid out as ``(N, 3, H, W)``.
    """
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    raw = np.asarray(X)
    is_uint8 = raw.dtype == np.uint8
    arr = check_array(raw, allow_nd=True, dtype=None if is_uint8 else np.float32,
                      ensure_all_finite=True, ensure_min_samples=1)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-d image batch, got shape {arr.shape}")
    if arr.shape[1] != 3 and arr.shape[-1] == 3:
        arr = arr.transpose(0, 3, 1, 2)
    if arr.shape[1] != 3:
        raise ShapeError(f"expected 3 colour channels, got shape {arr.shape}")
    if is_uint8:
        out = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32) / 127.5 - 1.0)
    else:
        if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
            raise ValueError("float images must lie in [-1, 1]; pass uint8 for 0..255 data")
        out = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    if image_shape is not None and tuple(out.shape[2:]) != tuple(image_shape):
        raise ShapeError(f"images are {tuple(out.shape[2:])}, model expects {tuple(image_shape)}")
    return out


def check_cameras(cameras, n: int, num_cameras: int) -> np.ndarray:
    if cameras is None:
        return np.zeros(n, dtype=np.int64)
    cams = column_or_1d(np.asarray(cameras)).astype(np.int64)
    check_consistent_length(cams, np.empty(n))
    if cams.min() < 0 or cams.max() >= num_cameras:
        raise IndexError(f"camera ids must lie in [0, {num_cameras})")
    return cams


def check_identities(y, n: int):
    """Return ``(classes, dense_labels)`` for identity labels ``y``."""
    y = column_or_1d(np.asarray(y))
    check_consistent_length(y, np.empty(n))
    classes, dense = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two identities")
    return classes, dense.astype(np.int64)
