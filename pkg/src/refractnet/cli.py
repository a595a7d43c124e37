"""``refractnet`` command line: generate | train | evaluate | attend.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
4 training failure, 5 evaluation failure.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from . import atlas as A
from .config import TARGET_CHOICES, ConfigError, RunConfig, load_config
from .evaluation import SLICES, EvaluationError, evaluate
from .fundus.loader import ImageBatch, load_images
from .fundus.netpbm import DecodeError
from .fundus.preprocess import PreprocessError, to_raster
from .fundus.records import ImageRecord, ManifestError, by_split, load_manifest
from .fundus.synthetic import generate_synthetic_dataset
from .model import TARGETS, AttentionResNet, ModelError
from .trainer import TrainingError, train_ensemble

log = logging.getLogger("refractnet")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4, 5
LABEL_COLUMN = {"se": "se_d", "sphere": "sphere_d", "cylinder": "cylinder_d"}


class UsageError(Exception):
    pass


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _non_negative_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _margins(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad margin list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refractnet", description="Refractive error from fundus images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic fundus dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--n-train", type=_non_negative_int, default=100)
    g.add_argument("--n-tune", type=_non_negative_int, default=20)
    g.add_argument("--n-val", type=_non_negative_int, default=20)
    g.add_argument("--resolution", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--areds-fraction", type=float, default=0.5)
    g.add_argument("--corrupt-fraction", type=float, default=0.0)

    def common(p, *, target_all: bool):
        p.add_argument("--manifest", help="manifest CSV; image paths are relative to its directory")
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--target", choices=TARGET_CHOICES if target_all else TARGETS)
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=_positive_int)

    t = sub.add_parser("train", help="train an ensemble per target")
    common(t, target_all=True)
    t.add_argument("--out", help="directory for checkpoints and training logs")
    t.add_argument("--ensemble", type=_positive_int, help="ensemble size")
    t.add_argument("--max-epochs", type=_positive_int)
    t.add_argument("--patience", type=_positive_int)
    t.add_argument("--batch-size", type=_positive_int)
    t.add_argument("--lr", type=float)
    t.add_argument("--momentum", type=float)

    e = sub.add_parser("evaluate", help="report metrics for a trained ensemble")
    common(e, target_all=False)
    e.add_argument("--models", required=True, help="directory holding model_<target>_<k>.ckpt")
    e.add_argument("--out", help="directory for report.json and predictions.csv")
    e.add_argument("--split", choices=("validation", "tune"), default="validation")
    e.add_argument("--bootstrap", type=_positive_int, help="number of bootstrap resamples")
    e.add_argument("--margins", type=_margins)
    e.add_argument("--slice", action="append", choices=sorted(SLICES), dest="slices",
                   help="restrict the report to a slice (repeatable); default reports all slices")

    a = sub.add_parser("attend", help="export attention heatmaps and the eye x band atlas")
    common(a, target_all=False)
    a.add_argument("--models", required=True, help="directory holding model_<target>_<k>.ckpt")
    a.add_argument("--out", help="output directory")
    a.add_argument("--image", action="append", default=[], help="manifest image path (repeatable)")
    a.add_argument("--aggregate", action="store_true", help="build the atlas over --split")
    a.add_argument("--split", choices=("validation", "tune", "train"), default="validation")
    a.add_argument("--min-count", type=_positive_int)
    a.add_argument("--mirror", action="store_true", default=None, help="pool mirrored left eyes with right eyes")
    return parser


def _run_config(args: argparse.Namespace, **extra) -> RunConfig:
    overrides = {
        "manifest": args.manifest,
        "target": args.target,
        "seed": args.seed,
        "workers": args.workers,
        "out_dir": getattr(args, "out", None),
    }
    overrides.update(extra)
    cfg = load_config(args.config, overrides)
    if not cfg.manifest:
        raise UsageError("no manifest given (--manifest or manifest = ... in --config)")
    return cfg


def _load_records(cfg: RunConfig) -> tuple[list[ImageRecord], Path]:
    path = Path(cfg.manifest)
    return load_manifest(path), path.parent


def _labelled(records: list[ImageRecord], target: str) -> list[ImageRecord]:
    return [r for r in records if r.label.value(target) is not None]


def _load_split(records, root, split, target, resolution, workers) -> ImageBatch:
    recs = by_split(records, split)
    kept = _labelled(recs, target)
    if recs and not kept:
        raise UsageError(f"manifest has no {LABEL_COLUMN[target]} values in the {split} split")
    if len(kept) < len(recs):
        log.info("%s: %d of %d records lack %s and are skipped", split, len(recs) - len(kept), len(recs),
                 LABEL_COLUMN[target])
    return load_images(kept, root, resolution, workers)


def _checkpoints(models_dir: Path, target: str) -> list[Path]:
    pattern = re.compile(rf"model_{target}_(\d+)\.ckpt$")
    found = [(int(m.group(1)), p) for p in models_dir.iterdir() if (m := pattern.match(p.name))]
    if not found:
        raise FileNotFoundError(f"no model_{target}_<k>.ckpt in {models_dir}")
    return [p for _, p in sorted(found)]


def _load_models(models_dir: str | Path, target: str) -> list[AttentionResNet]:
    return [AttentionResNet.load(p) for p in _checkpoints(Path(models_dir), target)]


# -- commands ---------------------------------------------------------------


def cmd_generate(args: argparse.Namespace) -> int:
    try:
        ds = generate_synthetic_dataset(
            args.out, args.n_train, args.n_tune, args.n_val,
            resolution=args.resolution, seed=args.seed,
            areds_fraction=args.areds_fraction, corrupt_fraction=args.corrupt_fraction,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    counts = Counter((r.split, r.cohort) for r in ds.records)
    print(f"wrote {len(ds.records)} images and {ds.manifest_path}")
    for split in ("train", "tune", "validation"):
        per = ", ".join(f"{c} {n}" for (s, c), n in sorted(counts.items()) if s == split)
        print(f"  {split}: {sum(n for (s, _), n in counts.items() if s == split)} ({per or 'none'})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _run_config(
        args, ensemble_size=args.ensemble, max_epochs=args.max_epochs, patience=args.patience,
        batch_size=args.batch_size, learning_rate=args.lr, momentum=args.momentum,
    )
    records, root = _load_records(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    targets = TARGETS if cfg.target == "all" else (cfg.target,)
    for target in targets:
        train = _load_split(records, root, "train", target, cfg.input_resolution, cfg.workers)
        tune = _load_split(records, root, "tune", target, cfg.input_resolution, cfg.workers)
        if len(train) == 0 or len(tune) == 0:
            raise UsageError(f"target {target}: train ({len(train)}) and tune ({len(tune)}) need usable images")
        members = train_ensemble(cfg.model_config(target), train, tune, cfg.train_config(), cfg.workers)
        for k, (model, tlog) in enumerate(members):
            model.save(out / f"model_{target}_{k}.ckpt")
            (out / f"trainlog_{target}_{k}.csv").write_text(tlog.to_csv())
            best = tlog.epochs[tlog.best_epoch - 1]
            print(f"{target} member {k}: best epoch {tlog.best_epoch} tune MAE {best.tune_mae:.4f} D "
                  f"({len(tlog.epochs)} epochs, stopped: {tlog.stopped_reason})")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _run_config(args, bootstrap=args.bootstrap, margins=args.margins)
    records, root = _load_records(cfg)
    models = _load_models(args.models, cfg.target)
    resolution = models[0].config.input_resolution
    batch = _load_split(records, root, args.split, cfg.target, resolution, cfg.workers)
    if len(batch) == 0:
        raise EvaluationError(f"the {args.split} split has no usable images")
    names = args.slices or list(SLICES)
    report, preds = evaluate(models, batch, cfg.margins, {n: SLICES[n] for n in names},
                             cfg.bootstrap, cfg.seed, cfg.workers)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "predictions.csv").write_text(preds.to_csv())
    print(f"{cfg.target} on {args.split} ({len(models)} models)")
    print(report.summary())
    return EXIT_OK


def _underlay(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(to_raster(pixels)), 0, 255).astype(np.uint8)


def cmd_attend(args: argparse.Namespace) -> int:
    if not args.image and not args.aggregate:
        raise UsageError("attend needs --image PATH or --aggregate")
    cfg = _run_config(args, min_count=args.min_count, mirror=args.mirror)
    records, root = _load_records(cfg)
    models = _load_models(args.models, cfg.target)
    resolution = models[0].config.input_resolution
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if args.image:
        by_path = {r.image_path: r for r in records}
        missing = [p for p in args.image if p not in by_path]
        if missing:
            raise UsageError(f"images not in manifest: {', '.join(missing)}")
        batch = load_images([by_path[p] for p in args.image], root, resolution)
        for rec, reason in batch.rejected:
            log.warning("%s rejected by the quality filter (%s)", rec.image_path, reason)
        maps = A.extract_heatmaps(models, batch.pixels, [{"image_path": r.image_path} for r in batch.records])
        hm_dir = out / "heatmaps"
        hm_dir.mkdir(exist_ok=True)
        for rec, px, hm in zip(batch.records, batch.pixels, maps):
            stem = hm_dir / Path(rec.image_path).stem
            A.render(hm, stem, underlay=_underlay(px))
            note = f"image={rec.image_path} eye={rec.eye} se_d={rec.label.se_d!r} models={','.join(hm.provenance['models'])}"
            stem.with_suffix(".csv").write_text(A.heatmap_csv(hm.grid, note))
            print(f"{rec.image_path}: SE {rec.label.se_d:+.2f} D -> {stem}.{{pgm,ppm,csv}}")

    if args.aggregate:
        batch = load_images(by_split(records, args.split), root, resolution, cfg.workers)
        maps = A.extract_heatmaps(models, batch.pixels) if len(batch) else []
        result = A.aggregate_maps(maps, [r.eye for r in batch.records], [r.label.se_d for r in batch.records],
                                  min_count=cfg.min_count, mirror=cfg.mirror)
        path = A.write_atlas(result, out)
        for (eye, band), n in result.counts.items():
            state = "written" if (eye, band) in result.groups else "absent"
            print(f"atlas {eye}/{band}: {n} maps ({state})")
        for w in result.warnings:
            print(f"warning: {w}")
        print(f"atlas summary: {path / 'summary.json'}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "attend": cmd_attend}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except EvaluationError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except (OSError, ManifestError, DecodeError, PreprocessError, ModelError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
