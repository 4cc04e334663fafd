import os

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from crackscan.zoo import Prediction, labels_from_probs

SITE_DIRS = {"Naillac": "Naillac", "StNikolaos": "St_Nikolaos", "Random": "Random_images"}
PUBLISHED = {
    ("Naillac", "Crack"): 22, ("Naillac", "No_crack"): 14,
    ("StNikolaos", "Crack"): 8, ("StNikolaos", "No_crack"): 16,
    ("Random", "Crack"): 26, ("Random", "No_crack"): 12,
}


def patch(rng, crack: bool, size: int = 224) -> np.ndarray:
    img = rng.integers(90, 170, (size, size, 3)).astype(np.uint8)
    if crack:
        width = max(1, size // 28)
        col = int(rng.integers(size // 10, size - size // 10 - width))
        img[:, col : col + width] = 25
    return img


def write_tree(root: Path, counts: dict, seed: int = 0, size: int = 224) -> Path:
    rng = np.random.default_rng(seed)
    for (site, label), n in counts.items():
        d = root / SITE_DIRS[site] / label
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            Image.fromarray(patch(rng, label == "Crack", size)).save(d / f"{site}_{label}_{i:03d}.png")
    return root


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def crack_ch_like(tmp_path):
    """A tree with the published per-site tallies (98 images)."""
    return write_tree(tmp_path / "crackch", PUBLISHED, size=32)


@pytest.fixture
def tiny_tree(tmp_path):
    counts = {(s, l): 2 for s in SITE_DIRS for l in ("Crack", "No_crack")}
    return write_tree(tmp_path / "tiny", counts)


class LinearProbeModel:
    """Stand-in classifier: 7x7 average-pooled RGB as feature maps, fixed dense head.

    Per-window outputs depend only on the window content, never on batch
    composition, so fusion can be checked exactly.
    """

    input_size = 224

    def __init__(self, weights=None, bias=(0.0, 0.0)):
        self.head_weights = np.asarray(
            weights if weights is not None else [[0.02, -0.03], [-0.01, 0.01], [0.005, -0.04]], dtype=np.float64
        )
        self.head_bias = np.asarray(bias, dtype=np.float64)

    def predict(self, batch, batch_size=32):
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        n, h, w, _ = x.shape
        fm = x.reshape(n, 7, h // 7, 7, w // 7, 3).mean(axis=(2, 4)) / 255.0
        logits = fm.mean(axis=(1, 2)) @ self.head_weights + self.head_bias
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        probs = e / e.sum(axis=1, keepdims=True)
        return Prediction(probs, labels_from_probs(probs), fm, self.head_weights, self.head_bias)


@pytest.fixture
def linear_model():
    return LinearProbeModel()
