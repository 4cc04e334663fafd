"""Backbone-specific pixel transforms.

Three families are supported:

* ``BGR_CENTERED``: RGB -> BGR, subtract the ImageNet per-channel mean, no scaling
  (VGG16/VGG19).
* ``SYMMETRIC_UNIT``: affine map of [0, 255] onto [-1, 1] (ResNetV2, MobileNetV3,
  Xception, InceptionResNetV2).
* ``UNIT_IMAGENET_NORM``: x / 255 followed by per-channel ImageNet
  standardization (DenseNet).
"""

from __future__ import annotations

import enum
from typing import Any

import numpy as np

from crackscan.errors import ShapeError


class PreprocessMode(str, enum.Enum):
    BGR_CENTERED = "BGR_CENTERED"
    SYMMETRIC_UNIT = "SYMMETRIC_UNIT"
    UNIT_IMAGENET_NORM = "UNIT_IMAGENET_NORM"


# ImageNet statistics, BGR order, 0..255 scale.
IMAGENET_BGR_MEAN = (103.939, 116.779, 123.68)
# ImageNet statistics, RGB order, 0..1 scale.
IMAGENET_RGB_MEAN = (0.485, 0.456, 0.406)
IMAGENET_RGB_STD = (0.229, 0.224, 0.225)

SYMMETRIC_FIXED = "fixed"
SYMMETRIC_PER_IMAGE = "per_image"


def default_constants(mode: PreprocessMode | str) -> dict[str, Any]:
    """Constants for ``mode``; these are written into every model artifact."""
    mode = PreprocessMode(mode)
    if mode is PreprocessMode.BGR_CENTERED:
        return {"bgr_mean": list(IMAGENET_BGR_MEAN)}
    if mode is PreprocessMode.SYMMETRIC_UNIT:
        return {"scaling": SYMMETRIC_FIXED}
    return {"rgb_mean": list(IMAGENET_RGB_MEAN), "rgb_std": list(IMAGENET_RGB_STD)}


def _check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim not in (3, 4) or image.shape[-1] != 3:
        raise ShapeError(f"expected an RGB array with 3 channels last, got shape {image.shape}")
    return image


def preprocess(
    image: np.ndarray,
    mode: PreprocessMode | str,
    constants: dict[str, Any] | None = None,
) -> np.ndarray:
    """Transform an RGB image (H, W, 3) or batch (N, H, W, 3) into network input.

    Values are expected in [0, 255]. Output is float32 with the same shape.
    """
    image = _check_rgb(image)
    mode = PreprocessMode(mode)
    c = default_constants(mode)
    if constants:
        c.update(constants)
    x = image.astype(np.float32)

    if mode is PreprocessMode.BGR_CENTERED:
        x = x[..., ::-1]
        return x - np.asarray(c["bgr_mean"], dtype=np.float32)

    if mode is PreprocessMode.SYMMETRIC_UNIT:
        if c["scaling"] == SYMMETRIC_PER_IMAGE:
            # min/max taken over each image separately
            axes = tuple(range(x.ndim - 3, x.ndim))
            lo = x.min(axis=axes, keepdims=True)
            hi = x.max(axis=axes, keepdims=True)
            span = np.where(hi > lo, hi - lo, 1.0)
            return (2.0 * (x - lo) / span - 1.0).astype(np.float32)
        return x / np.float32(127.5) - np.float32(1.0)

    mean = np.asarray(c["rgb_mean"], dtype=np.float32)
    std = np.asarray(c["rgb_std"], dtype=np.float32)
    return (x / np.float32(255.0) - mean) / std


def deprocess(
    x: np.ndarray,
    mode: PreprocessMode | str,
    constants: dict[str, Any] | None = None,
) -> np.ndarray:
    """Inverse of :func:`preprocess` for the fixed (affine) modes, returning float RGB."""
    x = _check_rgb(x).astype(np.float64)
    mode = PreprocessMode(mode)
    c = default_constants(mode)
    if constants:
        c.update(constants)
    if mode is PreprocessMode.BGR_CENTERED:
        return (x + np.asarray(c["bgr_mean"]))[..., ::-1]
    if mode is PreprocessMode.SYMMETRIC_UNIT:
        if c["scaling"] != SYMMETRIC_FIXED:
            raise ValueError("per-image scaling is not invertible")
        return (x + 1.0) * 127.5
    return (x * np.asarray(c["rgb_std"]) + np.asarray(c["rgb_mean"])) * 255.0
