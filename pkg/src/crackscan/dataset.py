"""CRACK-CH ingestion: manifests, the six train/test cases, image decoding."""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import re
from collections import Counter
from pathlib import Path

import numpy as np
from PIL import Image

from crackscan.errors import ConfigurationError, InsufficientSamplesError

log = logging.getLogger(__name__)

PATCH_SIZE = 224
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".webp"}


class Label(enum.IntEnum):
    NoCrack = 0
    Crack = 1


class Site(str, enum.Enum):
    Naillac = "Naillac"
    StNikolaos = "StNikolaos"
    Random = "Random"


HYPERION_SITES = frozenset({Site.Naillac, Site.StNikolaos})

# Images per (site, label) in the published dataset.
PUBLISHED_COUNTS = {
    (Site.Naillac, Label.Crack): 22,
    (Site.Naillac, Label.NoCrack): 14,
    (Site.StNikolaos, Label.Crack): 8,
    (Site.StNikolaos, Label.NoCrack): 16,
    (Site.Random, Label.Crack): 26,
    (Site.Random, Label.NoCrack): 12,
}

# case_id -> {label: (n_train, n_test)}
CASE_COUNTS = {
    0: {Label.Crack: (35, 21), Label.NoCrack: (35, 20)},
    1: {Label.Crack: (28, 27), Label.NoCrack: (28, 27)},
    2: {Label.Crack: (50, 8), Label.NoCrack: (39, 16)},
    3: {Label.Crack: (36, 22), Label.NoCrack: (41, 14)},
    4: {Label.Crack: (30, 26), Label.NoCrack: (30, 12)},
    5: {Label.Crack: (26, 30), Label.NoCrack: (12, 30)},
}

# site-based cases: case_id -> (train sites, test sites)
SITE_CASES = {
    2: (frozenset({Site.Naillac, Site.Random}), frozenset({Site.StNikolaos})),
    3: (frozenset({Site.StNikolaos, Site.Random}), frozenset({Site.Naillac})),
    4: (HYPERION_SITES, frozenset({Site.Random})),
    5: (frozenset({Site.Random}), HYPERION_SITES),
}


def _norm(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


_SITE_ALIASES = {
    "naillac": Site.Naillac,
    "naillacpier": Site.Naillac,
    "stnikolaos": Site.StNikolaos,
    "saintnikolaos": Site.StNikolaos,
    "nikolaos": Site.StNikolaos,
    "stnikolaosfort": Site.StNikolaos,
    "random": Site.Random,
    "randomimages": Site.Random,
    "internet": Site.Random,
}
_LABEL_ALIASES = {
    "crack": Label.Crack,
    "cracks": Label.Crack,
    "nocrack": Label.NoCrack,
    "nocracks": Label.NoCrack,
}


def parse_site(name: str) -> Site:
    try:
        return _SITE_ALIASES[_norm(name)]
    except KeyError:
        raise ConfigurationError(f"unrecognised site {name!r}") from None


def parse_label(name: str | int) -> Label:
    if isinstance(name, (int, np.integer)):
        return Label(int(name))
    try:
        return _LABEL_ALIASES[_norm(name)]
    except KeyError:
        raise ConfigurationError(f"unrecognised label {name!r}") from None


@dataclasses.dataclass(frozen=True)
class ImageSample:
    path: str
    label: Label
    site: Site
    width: int = PATCH_SIZE
    height: int = PATCH_SIZE

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "label": self.label.name,
            "site": self.site.value,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImageSample":
        return cls(
            path=str(d["path"]),
            label=parse_label(d["label"]),
            site=parse_site(d["site"]),
            width=int(d.get("width", PATCH_SIZE)),
            height=int(d.get("height", PATCH_SIZE)),
        )


@dataclasses.dataclass
class DatasetManifest:
    samples: list[ImageSample]
    skipped: list[tuple[str, str]] = dataclasses.field(default_factory=list)

    @property
    def counts(self) -> Counter:
        return Counter((s.site, s.label) for s in self.samples)

    def published_mismatches(self) -> list[str]:
        """Human-readable differences against the published per-site tallies."""
        counts = self.counts
        out = []
        for key, expected in PUBLISHED_COUNTS.items():
            if counts.get(key, 0) != expected:
                out.append(f"{key[0].value}/{key[1].name}: found {counts.get(key, 0)}, expected {expected}")
        return out

    def write_skip_report(self, path: str | Path) -> None:
        lines = [f"{p}\t{reason}" for p, reason in self.skipped]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    def to_json(self) -> list[dict]:
        return [s.to_dict() for s in self.samples]


def _probe(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        im.verify()
    with Image.open(path) as im:
        return im.size


def load_manifest(root: str | Path) -> DatasetManifest:
    """Enumerate a ``<site>/<Crack|No_crack>/`` tree, or ``root/manifest.json`` if present.

    Files that cannot be decoded, and directories that are neither a known site
    nor a known label, are recorded in ``manifest.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {str(root)!r} is not a directory")

    entries: list[tuple[Path, Label, Site]] = []
    skipped: list[tuple[str, str]] = []
    listing = root / "manifest.json"
    if listing.is_file():
        try:
            records = json.loads(listing.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{listing}: {exc}") from exc
        for rec in records:
            p = Path(rec["path"])
            entries.append((p if p.is_absolute() else root / p, parse_label(rec["label"]), parse_site(rec["site"])))
    else:
        for site_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            try:
                site = parse_site(site_dir.name)
            except ConfigurationError:
                skipped.append((str(site_dir), "unrecognised site directory"))
                continue
            for label_dir in sorted(p for p in site_dir.iterdir() if p.is_dir()):
                try:
                    label = parse_label(label_dir.name)
                except ConfigurationError:
                    skipped.append((str(label_dir), "unrecognised label directory"))
                    continue
                for f in sorted(label_dir.rglob("*")):
                    if f.is_file() and f.suffix.lower() in IMAGE_SUFFIXES:
                        entries.append((f, label, site))

    samples: list[ImageSample] = []
    seen: set[str] = set()
    for path, label, site in entries:
        key = str(path.resolve())
        if key in seen:
            skipped.append((str(path), "duplicate path"))
            continue
        try:
            w, h = _probe(path)
        except Exception as exc:  # any decoder failure
            skipped.append((str(path), f"undecodable: {exc.__class__.__name__}"))
            continue
        seen.add(key)
        samples.append(ImageSample(str(path), label, site, w, h))

    manifest = DatasetManifest(samples, skipped)
    if skipped:
        log.warning("%d entries skipped during ingestion", len(skipped))
    return manifest


def load_image(path: str | Path, size: int | None = PATCH_SIZE) -> np.ndarray:
    """Decode an image to uint8 RGB; bilinearly resize to ``size`` x ``size`` if needed."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.uint8).copy()


def load_images(samples: list[ImageSample], size: int = PATCH_SIZE) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([load_image(s.path, size) for s in samples]) if samples else np.zeros((0, size, size, 3), np.uint8)
    y = np.asarray([int(s.label) for s in samples], dtype=np.int64)
    return x, y


@dataclasses.dataclass
class TestCaseSplit:
    __test__ = False  # not a pytest class

    case_id: int
    train: list[ImageSample]
    test: list[ImageSample]
    seed: int | None = None
    mismatches: list[str] = dataclasses.field(default_factory=list)

    def counts(self) -> dict[str, dict[str, int]]:
        return {
            part: {lab.name: sum(s.label == lab for s in samples) for lab in Label}
            for part, samples in (("train", self.train), ("test", self.test))
        }

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "seed": self.seed,
            "counts": self.counts(),
            "mismatches": self.mismatches,
            "train": [s.to_dict() for s in self.train],
            "test": [s.to_dict() for s in self.test],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TestCaseSplit":
        return cls(
            case_id=int(d["case_id"]),
            train=[ImageSample.from_dict(s) for s in d["train"]],
            test=[ImageSample.from_dict(s) for s in d["test"]],
            seed=d.get("seed"),
            mismatches=list(d.get("mismatches", [])),
        )

    def write(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / f"split_case{self.case_id}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path

    @classmethod
    def read(cls, path: str | Path) -> "TestCaseSplit":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _by_label(samples: list[ImageSample]) -> dict[Label, list[ImageSample]]:
    out: dict[Label, list[ImageSample]] = {lab: [] for lab in Label}
    for s in sorted(samples, key=lambda s: s.path):
        out[s.label].append(s)
    return out


def _random_split(manifest: DatasetManifest, case_id: int, seed: int, rescale: bool) -> TestCaseSplit:
    rng = np.random.default_rng(seed)
    pools = _by_label(manifest.samples)
    train: list[ImageSample] = []
    test: list[ImageSample] = []
    mismatches = []
    for label in Label:
        n_train, n_test = CASE_COUNTS[case_id][label]
        pool = pools[label]
        if len(pool) < n_train + n_test:
            if not rescale:
                raise InsufficientSamplesError(
                    f"case {case_id} needs {n_train + n_test} {label.name} images "
                    f"({n_train} train + {n_test} test) but the pool has {len(pool)}; "
                    f"deficit {n_train + n_test - len(pool)}"
                )
            wanted = (n_train, n_test)
            n_train = int(round(len(pool) * n_train / (n_train + n_test)))
            n_test = len(pool) - n_train
            mismatches.append(f"{label.name}: rescaled {wanted} to ({n_train}, {n_test})")
        order = rng.permutation(len(pool))
        picked = [pool[i] for i in order[: n_train + n_test]]
        train += picked[:n_train]
        test += picked[n_train:]
    return TestCaseSplit(case_id, train, test, seed, mismatches)


def _site_split(manifest: DatasetManifest, case_id: int) -> TestCaseSplit:
    train_sites, test_sites = SITE_CASES[case_id]
    train = sorted((s for s in manifest.samples if s.site in train_sites), key=lambda s: s.path)
    test = sorted((s for s in manifest.samples if s.site in test_sites), key=lambda s: s.path)
    split = TestCaseSplit(case_id, train, test)
    for part, samples, idx in (("train", train, 0), ("test", test, 1)):
        for label in Label:
            found = sum(s.label == label for s in samples)
            if found == 0:
                raise InsufficientSamplesError(
                    f"case {case_id} {part} set has no {label.name} images; "
                    f"sites {sorted(x.value for x in (train_sites if idx == 0 else test_sites))} missing"
                )
            expected = CASE_COUNTS[case_id][label][idx]
            if found != expected:
                split.mismatches.append(f"{part}/{label.name}: found {found}, published count is {expected}")
    if split.mismatches:
        log.warning("case %d differs from the published counts: %s", case_id, "; ".join(split.mismatches))
    return split


def make_split(manifest: DatasetManifest, case_id: int, seed: int = 0, rescale: bool = False) -> TestCaseSplit:
    """Build one of the six train/test cases.

    Cases 0 and 1 draw the published per-label counts at random from the whole
    pool (``seed`` controls the draw). With ``rescale=True`` a pool too small for
    those counts is split at the same per-label train fraction instead of raising.
    Cases 2-5 are site hold-outs and ignore ``seed``.
    """
    if case_id not in CASE_COUNTS:
        raise ConfigurationError(f"case_id must be in 0..5, got {case_id}")
    if case_id in SITE_CASES:
        return _site_split(manifest, case_id)
    return _random_split(manifest, case_id, seed, rescale)
