"""Per-run result tables (Markdown and CSV) and grouped comparison charts."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from pathlib import Path

from crackscan.evaluation import EvalReport

COLUMNS = ["model", "case", "regime", "epochs", "learning rate", "precision", "recall", "f1-score", "accuracy", "tr time"]

# registry order without importing keras
MODEL_ORDER = [
    "VGG16", "VGG19", "InceptionResNetV2", "MobileNetV3Small", "MobileNetV3Large",
    "DenseNet121", "DenseNet169", "DenseNet201", "ResNet50V2", "ResNet101V2", "Xception",
]


def _order_key(r: EvalReport):
    idx = MODEL_ORDER.index(r.model_id) if r.model_id in MODEL_ORDER else len(MODEL_ORDER)
    return (r.regime or "", -1 if r.case_id is None else r.case_id, idx, r.model_id)


def _fmt(v, digits=2):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def table_rows(reports: list[EvalReport]) -> list[dict]:
    rows = []
    for r in sorted(reports, key=_order_key):
        rows.append({
            "model": r.model_id,
            "case": r.case_id,
            "regime": r.regime,
            "epochs": r.epochs,
            "learning rate": r.lr,
            "precision": r.precision,
            "recall": r.recall,
            "f1-score": r.f1,
            "accuracy": r.accuracy,
            "tr time": r.wall_time_seconds,
        })
    return rows


def render_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in table_rows(reports):
        w.writerow({k: "" if v is None else (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def parse_csv(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {}
        for k, v in row.items():
            if v == "":
                parsed[k] = None
            elif k in ("model", "regime"):
                parsed[k] = v
            elif k in ("case", "epochs"):
                parsed[k] = int(v)
            else:
                parsed[k] = float(v)
        out.append(parsed)
    return out


def render_markdown(reports: list[EvalReport]) -> str:
    rows = table_rows(reports)
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    for row in rows:
        cells = [
            _fmt(row["model"]), _fmt(row["case"]), _fmt(row["regime"]), _fmt(row["epochs"]),
            "" if row["learning rate"] is None else f"{row['learning rate']:g}",
            _fmt(row["precision"]), _fmt(row["recall"]), _fmt(row["f1-score"]), _fmt(row["accuracy"]),
            _fmt(row["tr time"], 3),
        ]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def render_tables(reports: list[EvalReport], out_dir: str | Path | None = None) -> tuple[str, str]:
    """Return (markdown, csv) for the reports; write report.md / report.csv if ``out_dir`` is given."""
    if not reports:
        raise ValueError("at least one report is required")
    md, text = render_markdown(reports), render_csv(reports)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(md)
        (out / "report.csv").write_text(text)
    return md, text


def _grouped_bars(ax, grid: dict[int, dict[str, float]], models: list[str], ylabel: str):
    import numpy as np

    cases = sorted(grid)
    width = 0.8 / max(1, len(models))
    x = np.arange(len(cases))
    for i, m in enumerate(models):
        vals = [grid[c].get(m, np.nan) for c in cases]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels([f"case {c}" for c in cases])
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7, ncol=2)


def render_comparison_charts(reports: list[EvalReport], out_dir: str | Path) -> list[Path]:
    """One accuracy chart and one training-time chart per regime, bars grouped by case."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_regime: dict[str, list[EvalReport]] = defaultdict(list)
    for r in reports:
        by_regime[(r.regime or "unknown").lower()].append(r)

    paths = []
    for regime, group in sorted(by_regime.items()):
        models = [m for m in MODEL_ORDER if any(r.model_id == m for r in group)]
        models += sorted({r.model_id for r in group} - set(models))
        for metric, ylabel, getter in (
            ("accuracy", "test accuracy", lambda r: r.accuracy),
            ("time", "training time (s)", lambda r: r.wall_time_seconds),
        ):
            grid: dict[int, dict[str, float]] = defaultdict(dict)
            for r in group:
                v = getter(r)
                grid[-1 if r.case_id is None else r.case_id][r.model_id] = float("nan") if v is None else v
            fig, ax = plt.subplots(figsize=(10, 4))
            _grouped_bars(ax, grid, models, ylabel)
            ax.set_title(f"{ylabel} ({regime})")
            fig.tight_layout()
            path = out / f"{metric}_{regime}.png"
            fig.savefig(path, dpi=100, metadata={"Software": None})
            plt.close(fig)
            paths.append(path)
    return paths
