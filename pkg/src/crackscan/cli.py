"""Command-line entry point.

Subcommands: prepare, train, eval, localize, scan, report, matrix. Each run
writes into ``<runs-dir>/<timestamp>-<command>/`` together with a resolved
``config.json`` snapshot. Configuration files are flat JSON with dotted keys
(``"train.epochs": 50``); command-line flags win over file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import json
import logging
import os
import shutil
import sys
import traceback
from pathlib import Path
from typing import Any, Callable

import numpy as np

from crackscan.augment import AugmentationPolicy
from crackscan.errors import ConfigurationError, CrackScanError
from crackscan.training import TrainConfig

log = logging.getLogger("crackscan")

DATA_ENV = "CRACKSCAN_DATA"
COMMANDS = ("prepare", "train", "eval", "localize", "scan", "report", "matrix")

DEFAULTS: dict[str, Any] = {
    "data_root": None,
    "backbone": "VGG16",
    "case_id": 0,
    "regime": "scratch",
    "pretrained": False,
    "seed": 0,
    "rescale": False,
    "runs_dir": "runs",
    **{f"train.{k}": v for k, v in dataclasses.asdict(TrainConfig()).items() if k != "augmentation"},
    **{f"train.augmentation.{k}": v for k, v in AugmentationPolicy().to_dict().items()},
}
DEFAULTS.pop("train.seed")  # follows the top-level seed


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {path} must be a JSON object")
    return flatten(data)


def train_config_from(cfg: dict) -> TrainConfig:
    fields = {k[len("train."):]: v for k, v in cfg.items() if k.startswith("train.") and not k.startswith("train.augmentation.")}
    aug = {k[len("train.augmentation."):]: v for k, v in cfg.items() if k.startswith("train.augmentation.")}
    fields["seed"] = int(cfg["seed"])
    try:
        tc = TrainConfig.from_dict(fields)
        tc.augmentation = AugmentationPolicy(**{**aug, "seed": int(cfg["seed"])})
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    tc.validate()
    return tc


def _flag_overrides(args: argparse.Namespace) -> dict:
    mapping = {
        "data_root": "data_root", "backbone": "backbone", "case": "case_id", "regime": "regime",
        "pretrained": "pretrained", "seed": "seed", "rescale": "rescale", "runs_dir": "runs_dir",
        "epochs": "train.epochs", "lr": "train.lr", "batch_size": "train.batch_size",
        "val_fraction": "train.val_fraction", "patience": "train.lr_patience", "lr_factor": "train.lr_factor",
        "min_lr": "train.min_lr",
    }
    return {key: getattr(args, attr) for attr, key in mapping.items() if getattr(args, attr, None) is not None}


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    cfg["data_root"] = os.environ.get(DATA_ENV)
    file_cfg = load_config(getattr(args, "config", None))
    unknown = set(file_cfg) - set(DEFAULTS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    cfg.update(file_cfg)
    cfg.update(_flag_overrides(args))
    cfg["command"] = args.command
    return cfg


def make_run_dir(runs_dir: str | Path, command: str, explicit: str | None = None) -> Path:
    if explicit:
        path = Path(explicit)
    else:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = Path(runs_dir) / f"{stamp}-{command}"
        n = 1
        while path.exists():
            path = Path(runs_dir) / f"{stamp}-{command}-{n}"
            n += 1
    path.mkdir(parents=True, exist_ok=bool(explicit))
    return path


def _require_data_root(cfg: dict) -> Path:
    if not cfg.get("data_root"):
        raise ConfigurationError(f"no dataset root: pass --data-root or set {DATA_ENV}")
    root = Path(cfg["data_root"])
    if not root.is_dir():
        raise ConfigurationError(f"dataset root {root} does not exist")
    return root


def _split_for(cfg: dict, split_path: str | None):
    from crackscan.dataset import TestCaseSplit, load_manifest, make_split

    if split_path:
        return TestCaseSplit.read(split_path)
    manifest = load_manifest(_require_data_root(cfg))
    return make_split(manifest, int(cfg["case_id"]), int(cfg["seed"]), rescale=bool(cfg["rescale"]))


def _read_rgb(path: str | Path) -> np.ndarray:
    from crackscan.dataset import load_image

    if not Path(path).is_file():
        raise ConfigurationError(f"image {path} not found")
    return load_image(path, size=None)


# -- commands ---------------------------------------------------------------


def cmd_prepare(cfg: dict, args, out: Path) -> None:
    from crackscan.dataset import load_manifest, make_split

    manifest = load_manifest(_require_data_root(cfg))
    (out / "manifest.json").write_text(json.dumps(manifest.to_json(), indent=2))
    manifest.write_skip_report(out / "ingest_skipped.txt")
    summary: dict[str, Any] = {
        "samples": len(manifest.samples),
        "counts": {f"{s.value}/{l.name}": n for (s, l), n in sorted(manifest.counts.items())},
        "published_mismatches": manifest.published_mismatches(),
        "splits": {},
    }
    for case_id in range(6):
        try:
            split = make_split(manifest, case_id, int(cfg["seed"]), rescale=bool(cfg["rescale"]))
        except CrackScanError as exc:
            summary["splits"][case_id] = {"error": str(exc)}
            continue
        split.write(out)
        summary["splits"][case_id] = {"counts": split.counts(), "mismatches": split.mismatches}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps({k: summary[k] for k in ("samples", "counts", "published_mismatches")}))


def train_one(cfg: dict, split, out: Path, *, evaluate_test: bool = True):
    """Train one (backbone, case, regime) cell into ``out``; returns (model, record, report|None)."""
    from crackscan import zoo
    from crackscan.evaluation import evaluate
    from crackscan.training import train

    spec = zoo.get_spec(cfg["backbone"])
    regime = zoo.Regime.parse(cfg["regime"])
    tc = train_config_from(cfg)
    if tc.lr is None:
        tc.lr = zoo.default_learning_rate(spec.name, regime, split.case_id)
    model = zoo.build(spec, regime, pretrained=bool(cfg["pretrained"]) or regime is zoo.Regime.TRANSFER,
                      seed=int(cfg["seed"]))
    model, record = train(model, split, tc)
    model.save(out / "model")
    record.write(out / "record.json")
    record.plot(out / "curves.png")
    report = None
    if evaluate_test and split.test:
        report = evaluate(model, split.test, case_id=split.case_id, epochs=tc.epochs, lr=tc.lr,
                          wall_time_seconds=record.wall_time_seconds)
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
        report.write_confusion(out)
    return model, record, report


def cmd_train(cfg: dict, args, out: Path) -> None:
    from crackscan import zoo

    zoo.get_spec(cfg["backbone"])
    zoo.Regime.parse(cfg["regime"])
    split = _split_for(cfg, args.split)
    split.write(out)
    _, record, report = train_one(cfg, split, out, evaluate_test=args.evaluate)
    msg = {"model": str(out / "model"), "best_epoch": record.best_epoch, "wall_time_seconds": record.wall_time_seconds}
    if report is not None:
        msg["accuracy"] = report.accuracy
    print(json.dumps(msg))


def cmd_eval(cfg: dict, args, out: Path) -> None:
    from crackscan import zoo
    from crackscan.evaluation import evaluate
    from crackscan.report import render_tables

    model = zoo.load(args.model)
    split = _split_for(cfg, args.split)
    record_path = Path(args.model).parent / "record.json"
    extra: dict[str, Any] = {}
    if record_path.is_file():
        rec = json.loads(record_path.read_text())
        extra = {"epochs": rec["config"].get("epochs"), "lr": rec["config"].get("lr"),
                 "wall_time_seconds": rec.get("wall_time_seconds")}
    report = evaluate(model, split.test, case_id=split.case_id, **extra)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2))
    report.write_confusion(out)
    md, _ = render_tables([report], out)
    print(md, end="")


def cmd_localize(cfg: dict, args, out: Path) -> None:
    from PIL import Image

    from crackscan import CLASS_NAMES, zoo
    from crackscan.cam import localize
    from crackscan.dataset import load_image

    model = zoo.load(args.model)
    for path in args.image:
        if not Path(path).is_file():
            raise ConfigurationError(f"image {path} not found")
        img = load_image(path, model.input_size)
        pred, amap, shown = localize(model, img, force_crack=args.force_crack, threshold=args.threshold, alpha=args.alpha)
        stem = Path(path).stem
        Image.fromarray(shown).save(out / f"{stem}_cam.png")
        np.save(out / f"{stem}_cam.npy", amap.raw)
        side = {"image": str(path), "label": CLASS_NAMES[int(pred.labels[0])],
                "probs": dict(zip(CLASS_NAMES, map(float, pred.probs[0]))),
                "cam_class": CLASS_NAMES[amap.class_index], "value_range": amap.value_range}
        (out / f"{stem}_cam.json").write_text(json.dumps(side, indent=2))
        print(json.dumps(side))


def cmd_scan(cfg: dict, args, out: Path) -> None:
    from crackscan import zoo
    from crackscan.scan import scan_image

    model = zoo.load(args.model)
    image = _read_rgb(args.image)
    result = scan_image(model, image, step=args.step, batch_size=args.batch_size, fusion=args.fusion,
                        threshold=args.threshold, alpha=args.alpha)
    paths = result.write(out, Path(args.image).stem)
    print(json.dumps({"windows": len(result.per_window), **{k: str(v) for k, v in paths.items()}}))


def _collect_reports(paths: list[str]):
    from crackscan.evaluation import EvalReport

    found = []
    for p in map(Path, paths):
        files = sorted(p.rglob("report.json")) if p.is_dir() else [p]
        for f in files:
            found.append(EvalReport.from_dict(json.loads(f.read_text())))
    if not found:
        raise ConfigurationError("no report.json files found")
    return found


def cmd_report(cfg: dict, args, out: Path) -> None:
    from crackscan.report import render_comparison_charts, render_tables

    reports = _collect_reports(args.inputs)
    md, _ = render_tables(reports, out)
    render_comparison_charts(reports, out)
    print(md, end="")


def run_matrix(
    backbones: list[str],
    cases: list[int],
    regime: str,
    cfg: dict,
    out: Path,
    *,
    cell: Callable[[dict, Any, Path], Any] | None = None,
    split_for: Callable[[int], Any] | None = None,
):
    """Train and evaluate every (backbone, case) pair sequentially.

    A failing cell is logged in ``errors.json`` and skipped. Returns the
    reports of the successful cells; tables and charts go to ``out``.
    """
    from crackscan.report import render_comparison_charts, render_tables

    if cell is None:
        def cell(c, split, d):
            return train_one(c, split, d)[2]
    if split_for is None:
        from crackscan.dataset import load_manifest, make_split

        manifest = load_manifest(_require_data_root(cfg))

        def split_for(case_id):
            return make_split(manifest, case_id, int(cfg["seed"]), rescale=bool(cfg["rescale"]))

    reports, errors = [], []
    for case_id in cases:
        try:
            split = split_for(case_id)
        except CrackScanError as exc:
            errors.append({"case": case_id, "backbone": None, "error": str(exc)})
            continue
        for name in backbones:
            cell_cfg = {**cfg, "backbone": name, "case_id": case_id, "regime": regime}
            cell_dir = out / f"{name}_case{case_id}_{regime.lower()}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            try:
                report = cell(cell_cfg, split, cell_dir)
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
                log.error("cell %s/case %d failed: %s", name, case_id, exc)
                errors.append({"case": case_id, "backbone": name, "error": f"{exc.__class__.__name__}: {exc}"})
                continue
            if report is not None:
                reports.append(report)
    (out / "errors.json").write_text(json.dumps(errors, indent=2))
    if reports:
        render_tables(reports, out)
        render_comparison_charts(reports, out)
    return reports, errors


def cmd_matrix(cfg: dict, args, out: Path) -> None:
    from crackscan import zoo

    names = zoo.REGISTRY_ORDER if args.backbones == "all" else [zoo.get_spec(n).name for n in args.backbones.split(",")]
    cases = list(range(6)) if args.cases == "all" else [int(c) for c in args.cases.split(",")]
    reports, errors = run_matrix(names, cases, zoo.Regime.parse(cfg["regime"]).value, cfg, out)
    print(json.dumps({"cells": len(reports), "failed": len(errors)}))


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crackscan", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat JSON config with dotted keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--runs-dir", help="parent directory for run outputs (default: runs)")
        sp.add_argument("--out", help="write into this directory instead of a timestamped run directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    def data(sp):
        sp.add_argument("--data-root", help=f"CRACK-CH root (default: ${DATA_ENV})")
        sp.add_argument("--case", type=int, choices=range(6))
        sp.add_argument("--split", help="split_case<k>.json to use instead of rebuilding the split")
        sp.add_argument("--rescale", action="store_true", default=None,
                        help="shrink cases 0/1 proportionally when the pool is too small")

    def training(sp):
        sp.add_argument("--backbone")
        sp.add_argument("--regime", choices=["transfer", "scratch", "TRANSFER", "SCRATCH"])
        sp.add_argument("--pretrained", action="store_true", default=None)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--val-fraction", type=float)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--lr-factor", type=float)
        sp.add_argument("--min-lr", type=float)

    def render(sp):
        sp.add_argument("--threshold", type=float, default=0.5)
        sp.add_argument("--alpha", type=float, default=0.6)

    sp = sub.add_parser("prepare", help="build the manifest and the six splits")
    common(sp)
    sp.add_argument("--data-root")
    sp.add_argument("--rescale", action="store_true", default=None)

    sp = sub.add_parser("train", help="train one backbone on one case")
    common(sp)
    data(sp)
    training(sp)
    sp.add_argument("--no-eval", dest="evaluate", action="store_false", help="skip the test-set evaluation")

    sp = sub.add_parser("eval", help="evaluate a model artifact on a test split")
    common(sp)
    data(sp)
    sp.add_argument("--model", required=True)

    sp = sub.add_parser("localize", help="attention maps for individual patches")
    common(sp)
    render(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True, nargs="+")
    sp.add_argument("--force-crack", action="store_true", help="map the Crack class even for NoCrack predictions")

    sp = sub.add_parser("scan", help="sliding-window scan of a full-resolution image")
    common(sp)
    render(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--step", type=int, default=32)
    sp.add_argument("--batch-size", type=int, default=32)
    sp.add_argument("--fusion", choices=["mean", "max"], default="mean")

    sp = sub.add_parser("report", help="aggregate report.json files into tables and charts")
    common(sp)
    sp.add_argument("inputs", nargs="+", help="report.json files or directories to search")

    sp = sub.add_parser("matrix", help="train and evaluate a backbone x case grid")
    common(sp)
    data(sp)
    training(sp)
    sp.add_argument("--backbones", default="all", help="comma-separated names or 'all'")
    sp.add_argument("--cases", default="all", help="comma-separated case ids or 'all'")
    return p


HANDLERS = {
    "prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "localize": cmd_localize,
    "scan": cmd_scan, "report": cmd_report, "matrix": cmd_matrix,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out: Path | None = None
    created = False
    try:
        cfg = resolve_config(args)
        if args.command in ("train", "matrix"):
            # fail on a bad name before anything is written
            from crackscan import zoo

            zoo.get_spec(cfg["backbone"])
            zoo.Regime.parse(cfg["regime"])
            train_config_from(cfg)
        existed = bool(args.out) and Path(args.out).exists()
        out = make_run_dir(cfg["runs_dir"], args.command, args.out)
        created = not existed
        (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str))
        HANDLERS[args.command](cfg, args, out)
    except CrackScanError as exc:
        _cleanup(out, created)
        print(f"error: {exc.category}: {' '.join(str(exc).split())}", file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001
        _cleanup(out, created)
        if args.verbose:
            traceback.print_exc()
        print(f"error: internal: {exc.__class__.__name__}: {' '.join(str(exc).split())}", file=sys.stderr)
        return 1
    return 0


def _cleanup(out: Path | None, created: bool) -> None:
    if out is not None and created:
        shutil.rmtree(out, ignore_errors=True)


if __name__ == "__main__":
    sys.exit(main())
