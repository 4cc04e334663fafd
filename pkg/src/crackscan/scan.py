"""Sliding-window scanning of full-resolution images with CAM evidence fusion."""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path
from typing import Sequence

import numpy as np

from crackscan import CRACK
from crackscan.cam import compute_cam, overlay, upsample_bilinear
from crackscan.errors import CrackScanError, ShapeError

FUSE_MEAN = "mean"
FUSE_MAX = "max"


def _axis_positions(length: int, window: int, step: int) -> list[int]:
    pos = list(range(0, length - window + 1, step))
    if pos[-1] != length - window:
        pos.append(length - window)  # edge flush
    return pos


def enumerate_windows(width: int, height: int, window: int = 224, step: int = 32) -> list[tuple[int, int]]:
    """Top-left (x, y) of every window, row-major; a flush window closes each axis."""
    if step < 1:
        raise ValueError("step must be >= 1")
    if width < window or height < window:
        raise ShapeError(
            f"image {width}x{height} is smaller than the {window}px window; classify it as a single patch instead"
        )
    xs = _axis_positions(width, window, step)
    ys = _axis_positions(height, window, step)
    return [(x, y) for y in ys for x in xs]


@dataclasses.dataclass
class ScanGrid:
    """Evidence / coverage accumulators over the full image."""

    evidence: np.ndarray
    coverage: np.ndarray
    window: int = 224
    step: int = 32
    fusion: str = FUSE_MEAN

    @classmethod
    def empty(cls, height: int, width: int, window: int = 224, step: int = 32, fusion: str = FUSE_MEAN) -> "ScanGrid":
        if fusion not in (FUSE_MEAN, FUSE_MAX):
            raise ValueError(f"unknown fusion rule {fusion!r}")
        fill = -np.inf if fusion == FUSE_MAX else 0.0
        return cls(np.full((height, width), fill), np.zeros((height, width), np.int64), window, step, fusion)

    def add(self, x: int, y: int, cam: np.ndarray) -> None:
        h, w = cam.shape
        region = (slice(y, y + h), slice(x, x + w))
        if self.fusion == FUSE_MAX:
            np.maximum(self.evidence[region], cam, out=self.evidence[region])
        else:
            self.evidence[region] += cam
        self.coverage[region] += 1

    def merge(self, other: "ScanGrid") -> "ScanGrid":
        if self.fusion != other.fusion or self.evidence.shape != other.evidence.shape:
            raise ValueError("incompatible scan grids")
        if self.fusion == FUSE_MAX:
            ev = np.maximum(self.evidence, other.evidence)
        else:
            ev = self.evidence + other.evidence
        return ScanGrid(ev, self.coverage + other.coverage, self.window, self.step, self.fusion)

    def fused(self) -> np.ndarray:
        covered = self.coverage > 0
        out = np.zeros(self.evidence.shape)
        if self.fusion == FUSE_MAX:
            out[covered] = self.evidence[covered]
        else:
            out[covered] = self.evidence[covered] / self.coverage[covered]
        return out


@dataclasses.dataclass
class WindowResult:
    x: int
    y: int
    label: int
    prob_crack: float


@dataclasses.dataclass
class ScanResult:
    fused: np.ndarray
    per_window: list[WindowResult]
    overlay: np.ndarray
    grid: ScanGrid

    def write(self, out_dir: str | Path, stem: str = "scan") -> dict[str, Path]:
        from PIL import Image

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "fused": out / f"{stem}_fused.npy",
            "overlay": out / f"{stem}_overlay.png",
            "windows": out / "windows.csv",
        }
        np.save(paths["fused"], self.fused)
        Image.fromarray(self.overlay).save(paths["overlay"])
        with open(paths["windows"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "label", "prob_crack"])
            for r in self.per_window:
                w.writerow([r.x, r.y, "Crack" if r.label == CRACK else "NoCrack", f"{r.prob_crack:.6f}"])
        return paths


def scan_image(
    model,
    image: np.ndarray,
    step: int = 32,
    *,
    window: int | None = None,
    batch_size: int = 32,
    fusion: str = FUSE_MEAN,
    order: Sequence[int] | None = None,
    threshold: float = 0.5,
    alpha: float = 0.6,
    align_corners: bool = True,
) -> ScanResult:
    """Classify every window of ``image`` and fuse the Crack-class CAMs.

    ``model`` needs ``predict(batch) -> Prediction`` and ``input_size``.
    ``order`` optionally permutes the processing order of the windows.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {image.shape}")
    window = window or model.input_size
    H, W = image.shape[:2]
    positions = enumerate_windows(W, H, window, step)
    if order is not None:
        if sorted(order) != list(range(len(positions))):
            raise ValueError("order must be a permutation of the window indices")
        positions = [positions[i] for i in order]

    grid = ScanGrid.empty(H, W, window, step, fusion)
    per_window: list[WindowResult] = []
    for start in range(0, len(positions), batch_size):
        chunk = positions[start : start + batch_size]
        batch = np.stack([image[y : y + window, x : x + window] for x, y in chunk])
        try:
            pred = model.predict(batch, batch_size=len(chunk))
        except CrackScanError as exc:
            raise type(exc)(f"windows starting at {chunk[0]}: {exc}") from exc
        for i, (x, y) in enumerate(chunk):
            raw = compute_cam(pred.feature_maps[i], pred.head_weights, CRACK)
            grid.add(x, y, upsample_bilinear(raw, (window, window), align_corners))
            per_window.append(WindowResult(x, y, int(pred.labels[i]), float(pred.probs[i, CRACK])))

    fused = grid.fused()
    per_window.sort(key=lambda r: (r.y, r.x))
    return ScanResult(fused, per_window, overlay(image, fused, threshold, alpha), grid)
