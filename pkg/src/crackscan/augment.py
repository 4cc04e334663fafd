"""Seeded training-time augmentation: flips, colour jitter, rotation."""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage

ROTATE_CONTINUOUS = "continuous"
ROTATE_RIGHT_ANGLE = "right_angle"


@dataclasses.dataclass(frozen=True)
class AugmentationPolicy:
    hflip: bool = True
    vflip: bool = True
    brightness: float = 0.1
    contrast: float = 0.1
    saturation: float = 0.1
    rotation: float = 15.0
    rotation_mode: str = ROTATE_CONTINUOUS
    seed: int = 0

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentationPolicy":
        return cls(False, False, 0.0, 0.0, 0.0, 0.0, seed=seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _grayscale(x: np.ndarray) -> np.ndarray:
    return (x @ np.array([0.299, 0.587, 0.114]))[..., None]


def augment(image: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator) -> np.ndarray:
    """Return an augmented uint8 copy of an (H, W, 3) image.

    Each stage draws from ``rng`` only if it is enabled, so an identity policy
    returns the input unchanged byte for byte.
    """
    out = np.asarray(image)
    if out.ndim != 3 or out.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {out.shape}")
    out = out.copy()

    if policy.hflip and rng.random() < 0.5:
        out = out[:, ::-1]
    if policy.vflip and rng.random() < 0.5:
        out = out[::-1]

    jitter = policy.brightness > 0 or policy.contrast > 0 or policy.saturation > 0
    rotate = policy.rotation > 0
    if not (jitter or rotate):
        return np.ascontiguousarray(out, dtype=np.uint8)

    x = out.astype(np.float64)
    if policy.brightness > 0:
        x = x * rng.uniform(1 - policy.brightness, 1 + policy.brightness)
    if policy.contrast > 0:
        c = rng.uniform(1 - policy.contrast, 1 + policy.contrast)
        x = (x - _grayscale(x).mean()) * c + _grayscale(x).mean()
    if policy.saturation > 0:
        s = rng.uniform(1 - policy.saturation, 1 + policy.saturation)
        g = _grayscale(x)
        x = (x - g) * s + g
    x = np.clip(x, 0, 255)

    if rotate:
        if policy.rotation_mode == ROTATE_RIGHT_ANGLE:
            x = np.rot90(x, k=int(rng.integers(4)), axes=(0, 1))
        else:
            angle = rng.uniform(-policy.rotation, policy.rotation)
            x = ndimage.rotate(x, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
            x = np.clip(x, 0, 255)
    return np.ascontiguousarray(np.rint(x), dtype=np.uint8)
