"""Precision / recall / F1 / accuracy and confusion matrices on a test split."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import warnings
from pathlib import Path

import numpy as np

from crackscan import CLASS_NAMES
from crackscan.dataset import ImageSample, load_images
from crackscan.errors import ConfigurationError

log = logging.getLogger(__name__)


@dataclasses.dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [true][pred], (NoCrack, Crack)

    @classmethod
    def from_labels(cls, y_true, y_pred) -> "ConfusionMatrix":
        counts = np.zeros((2, 2), dtype=np.int64)
        np.add.at(counts, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        return cls(counts)

    @property
    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros((2, 2)), where=rows > 0)

    @property
    def tp(self) -> int:
        return int(self.counts[1, 1])

    @property
    def tn(self) -> int:
        return int(self.counts[0, 0])

    @property
    def fp(self) -> int:
        return int(self.counts[0, 1])

    @property
    def fn(self) -> int:
        return int(self.counts[1, 0])

    def to_dict(self) -> dict:
        return {
            "labels": list(CLASS_NAMES),
            "axes": "true x predicted",
            "counts": self.counts.tolist(),
            "normalized": self.normalized.tolist(),
        }


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def _f1(p: float | None, r: float | None) -> float | None:
    if p is None or r is None:
        return None
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclasses.dataclass
class EvalReport:
    model_id: str
    case_id: int | None
    accuracy: float
    per_class: dict[str, dict[str, float | None]]
    weighted: dict[str, float]
    macro: dict[str, float]
    micro: dict[str, float]
    confusion: ConfusionMatrix
    wall_time_seconds: float | None = None
    regime: str | None = None
    epochs: int | None = None
    lr: float | None = None

    @property
    def precision(self) -> float:
        return self.weighted["precision"]

    @property
    def recall(self) -> float:
        return self.weighted["recall"]

    @property
    def f1(self) -> float:
        return self.weighted["f1"]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["confusion"] = self.confusion.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["confusion"] = ConfusionMatrix(np.asarray(d["confusion"]["counts"], dtype=np.int64))
        return cls(**d)

    def write_confusion(self, out_dir: str | Path) -> Path:
        path = Path(out_dir) / f"confusion_{self.model_id}_{self.case_id}.json"
        path.write_text(json.dumps(self.confusion.to_dict(), indent=2))
        return path


def report_from_confusion(cm: ConfusionMatrix, model_id: str = "", case_id: int | None = None, **extra) -> EvalReport:
    """All metrics from a 2x2 [true][pred] count matrix.

    Per-class precision is 0 when the class is never predicted; per-class
    recall is None when the class is absent from the test set, and such a class
    is left out of the support-weighted and macro averages.
    """
    counts = np.asarray(cm.counts, dtype=np.int64)
    total = int(counts.sum())
    if total == 0:
        raise ConfigurationError("cannot evaluate an empty test set")
    per_class: dict[str, dict[str, float | None]] = {}
    for k, name in enumerate(CLASS_NAMES):
        tp = int(counts[k, k])
        predicted = int(counts[:, k].sum())
        support = int(counts[k, :].sum())
        precision = _ratio(tp, predicted)
        recall = _ratio(tp, support)
        if precision is None:
            precision = 0.0
        per_class[name] = {"precision": precision, "recall": recall, "f1": _f1(precision, recall), "support": support}

    present = [n for n in CLASS_NAMES if per_class[n]["support"] > 0]
    absent = [n for n in CLASS_NAMES if n not in present]
    if absent:
        warnings.warn(f"class(es) {absent} absent from the test set; excluded from averages", stacklevel=2)
    weights = np.array([per_class[n]["support"] for n in present], dtype=np.float64)
    weighted = {
        m: float(np.dot(weights, [per_class[n][m] for n in present]) / weights.sum())
        for m in ("precision", "recall", "f1")
    }
    macro = {m: float(np.mean([per_class[n][m] for n in present])) for m in ("precision", "recall", "f1")}
    correct = int(np.trace(counts))
    # single-label: every sample is one prediction, so micro P = micro R = accuracy
    micro_p = correct / int(counts.sum(axis=0).sum())
    micro_r = correct / int(counts.sum(axis=1).sum())
    micro = {"precision": micro_p, "recall": micro_r, "f1": _f1(micro_p, micro_r)}
    accuracy = (cm.tp + cm.tn) / (cm.tp + cm.tn + cm.fp + cm.fn)
    return EvalReport(model_id, case_id, accuracy, per_class, weighted, macro, micro, ConfusionMatrix(counts), **extra)


def evaluate_predictions(y_true, y_pred, model_id: str = "", case_id: int | None = None, **extra) -> EvalReport:
    y_true = np.asarray(y_true)
    if y_true.size == 0:
        raise ConfigurationError("cannot evaluate an empty test set")
    return report_from_confusion(ConfusionMatrix.from_labels(y_true, y_pred), model_id, case_id, **extra)


def evaluate(
    model,
    test: list[ImageSample],
    *,
    case_id: int | None = None,
    model_id: str | None = None,
    batch_size: int = 16,
    images: np.ndarray | None = None,
    **extra,
) -> EvalReport:
    """Run ``model`` over the test samples and score it.

    Pass ``images`` to skip decoding (must align with ``test``).
    """
    if not test and images is None:
        raise ConfigurationError("cannot evaluate an empty test set")
    if images is None:
        images, y_true = load_images(test, model.input_size)
    else:
        y_true = np.asarray([int(s.label) for s in test])
    start = time.perf_counter()
    pred = model.predict(images, batch_size=batch_size)
    log.debug("inference on %d patches took %.2fs", len(images), time.perf_counter() - start)
    extra.setdefault("regime", model.regime.value)
    return evaluate_predictions(y_true, pred.labels, model_id or model.spec.name, case_id, **extra)
