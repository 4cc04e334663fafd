"""Class activation maps from the dense-layer weights, bilinear upsampling, red overlay."""

from __future__ import annotations

import dataclasses

import numpy as np

from crackscan import CRACK
from crackscan.errors import ShapeError

RED = np.array([255.0, 0.0, 0.0])


@dataclasses.dataclass
class AttentionMap:
    raw: np.ndarray  # (h, w) before upsampling
    full: np.ndarray  # (H, W)
    class_index: int

    @property
    def value_range(self) -> tuple[float, float]:
        return float(self.raw.min()), float(self.raw.max())


def compute_cam(feature_maps: np.ndarray, head_weights: np.ndarray, class_index: int = CRACK) -> np.ndarray:
    """Weight the (h, w, C) feature maps by the dense weights of one class: sum_c F[..., c] * W[c, k]."""
    f = np.asarray(feature_maps, dtype=np.float64)
    w = np.asarray(head_weights, dtype=np.float64)
    if f.ndim != 3 or w.ndim != 2:
        raise ShapeError(f"expected (h, w, C) feature maps and (C, K) weights, got {f.shape} and {w.shape}")
    if f.shape[-1] != w.shape[0]:
        raise ShapeError(f"feature channels {f.shape[-1]} do not match weight rows {w.shape[0]}")
    if not 0 <= class_index < w.shape[1]:
        raise ShapeError(f"class index {class_index} out of range for {w.shape[1]} classes")
    return f @ w[:, class_index]


def _axis_coords(n_out: int, n_in: int, align_corners: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if align_corners:
        pos = np.zeros(n_out) if n_out == 1 else np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    else:
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def upsample_bilinear(raw: np.ndarray, size: tuple[int, int], align_corners: bool = True) -> np.ndarray:
    """Bilinearly resample a 2-D field to ``size = (H, W)``.

    Corner-aligned by default: the input's corner samples land exactly on the
    output corners, so the output never leaves the input's [min, max].
    ``align_corners=False`` uses half-pixel centres with edge clamping.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise ShapeError(f"expected a non-empty 2-D field, got shape {raw.shape}")
    H, W = int(size[0]), int(size[1])
    if H < 1 or W < 1:
        raise ShapeError(f"target size must be positive, got {size}")
    y0, y1, wy = _axis_coords(H, raw.shape[0], align_corners)
    x0, x1, wx = _axis_coords(W, raw.shape[1], align_corners)
    top = raw[y0][:, x0] * (1 - wx) + raw[y0][:, x1] * wx
    bottom = raw[y1][:, x0] * (1 - wx) + raw[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


def attention_map(
    feature_maps: np.ndarray,
    head_weights: np.ndarray,
    class_index: int,
    size: tuple[int, int],
    align_corners: bool = True,
) -> AttentionMap:
    raw = compute_cam(feature_maps, head_weights, class_index)
    return AttentionMap(raw, upsample_bilinear(raw, size, align_corners), class_index)


def normalize(field: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a constant field maps to zeros."""
    field = np.asarray(field, dtype=np.float64)
    lo, hi = field.min(), field.max()
    if hi <= lo:
        return np.zeros_like(field)
    return (field - lo) / (hi - lo)


def overlay(image: np.ndarray, field: np.ndarray | AttentionMap, threshold: float = 0.5, alpha: float = 0.6) -> np.ndarray:
    """Blend the normalized map into ``image`` in red.

    Only pixels whose normalized value exceeds ``threshold`` change; each moves
    towards pure red by ``alpha * value``.
    """
    if isinstance(field, AttentionMap):
        field = field.full
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    if field.shape != image.shape[:2]:
        raise ShapeError(f"map {field.shape} does not match image {image.shape[:2]}")
    m = normalize(field)
    mask = m > threshold
    out = image.copy()
    if not mask.any() or alpha == 0:
        return out
    a = (alpha * m[mask])[:, None]
    out[mask] = np.clip(np.rint((1 - a) * image[mask] + a * RED), 0, 255).astype(image.dtype)
    return out


def localize(model, image: np.ndarray, force_crack: bool = False, threshold: float = 0.5, alpha: float = 0.6):
    """Classify one patch and build its attention map and overlay.

    The map is taken for the predicted class, or for Crack regardless when
    ``force_crack`` is set. A NoCrack map is returned but not drawn.
    Returns ``(prediction, attention_map, overlay_image)``.
    """
    image = np.asarray(image)
    pred = model.predict(image[None])
    label = int(pred.labels[0])
    k = CRACK if force_crack else label
    amap = attention_map(pred.feature_maps[0], pred.head_weights, k, image.shape[:2])
    shown = overlay(image, amap, threshold, alpha) if k == CRACK else image.copy()
    return pred, amap, shown
