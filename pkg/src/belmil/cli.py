"""Command-line interface: ``belmil <command> ...``.

Exit codes: 0 success, 2 validation error, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .bags import DatasetManifest, SplitAssignment, SynthConfig, check_split, make_splits, synth_generate, write_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import PredictionSet, evaluate
from .preprocess import extract_patches, load_image, otsu_threshold, rgb_to_saturation
from .report import emit_report, load_json, read_attention_csv, render_figures
from .training import TrainConfig, cross_validate, predict

log = logging.getLogger("belmil")

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 2, 3
CONFIG_SECTIONS = ("preprocess", "synth", "split", "train")


class UsageError(ValueError):
    pass


def load_config(path) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)}; expected {list(CONFIG_SECTIONS)}")
    return doc


def _setting(args, config, section, key, default):
    """Command-line value, else config file value, else default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    return config.get(section, {}).get(key, default)


def _seed(args, config, section):
    return int(_setting(args, config, section, "seed", 0))


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


# --- commands ---------------------------------------------------------------


def cmd_preprocess(args, config):
    patch_size = int(_setting(args, config, "preprocess", "patch_size", 512))
    coverage = float(_setting(args, config, "preprocess", "coverage", 0.5))
    if patch_size < 1 or not 0.0 <= coverage <= 1.0:
        raise UsageError("patch size must be >= 1 and coverage within [0, 1]")
    src = Path(args.input)
    images = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not images:
        raise FileNotFoundError(f"no PNG images under {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    print("image,width,height,threshold,patches")
    for path in images:
        threshold, mask = otsu_threshold(rgb_to_saturation(load_image(path)))
        grid = extract_patches(mask, patch_size, coverage)
        grid.save(out / f"{path.stem}.patches.json")
        Image.fromarray(mask.astype(np.uint8) * 255).save(out / f"{path.stem}.mask.png")
        print(f"{path.name},{grid.width},{grid.height},{threshold:.6f},{len(grid.kept)}")


def cmd_synth_gen(args, config):
    section = dict(config.get("synth", {}))
    section.pop("seed", None)
    cfg = SynthConfig(**section)
    for key, attr in (("classes", "class_count"), ("bags_per_class", "bags_per_class"), ("width", "H"),
                      ("witness_rate", "witness_rate"), ("noise_scale", "noise_scale"),
                      ("bags_per_patient", "bags_per_patient")):
        if getattr(args, key) is not None:
            setattr(cfg, attr, getattr(args, key))
    lo, hi = cfg.n_range
    cfg.n_range = (args.n_min if args.n_min is not None else lo, args.n_max if args.n_max is not None else hi)
    cfg.validate()
    ds = synth_generate(cfg, _seed(args, config, "synth"))
    path = write_dataset(ds, args.out)
    print(f"wrote {len(ds.bags)} bags, manifest {path}")


def cmd_split(args, config):
    manifest = DatasetManifest.load_file(args.manifest)
    splits = make_splits(
        manifest,
        float(_setting(args, config, "split", "test_ratio", 0.2)),
        int(_setting(args, config, "split", "folds", 5)),
        _seed(args, config, "split"),
    )
    splits.save(args.out)
    sizes = ",".join(f"{len(t)}/{len(v)}" for t, v in splits.folds)
    print(f"test {len(splits.test_ids)}; folds train/val {sizes}")


def resolve_train_config(args, config) -> TrainConfig:
    cfg = TrainConfig.from_dict(config.get("train", {}))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.no_bel:
        cfg.use_bel = False
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.validate()
    return cfg


def cmd_train(args, config):
    manifest = DatasetManifest.load_file(args.manifest)
    cfg = resolve_train_config(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.split:
        splits = SplitAssignment.load_file(args.split)
    else:
        splits = make_splits(manifest, float(_setting(args, config, "split", "test_ratio", 0.2)),
                             int(_setting(args, config, "split", "folds", 5)), cfg.seed)
    check_split(manifest, splits)
    splits.save(out / "splits.json")
    torch.set_num_threads(args.threads)

    def progress(fold, row):
        log.info("fold %d epoch %d ce %.4f bel %.4f val_acc %s", fold, row["epoch"], row["ce"], row["bel"],
                 row["val_accuracy"])

    start = time.perf_counter()
    result = cross_validate(manifest, splits, cfg, progress=progress)
    elapsed = time.perf_counter() - start
    for f, rep in enumerate(result.reports):
        fold_dir = out / f"fold{f}"
        fold_dir.mkdir(exist_ok=True)
        meta = {"fold": f, "best_epoch": rep.best_epoch, "use_bel": cfg.use_bel}
        save_checkpoint(fold_dir / "best.milt", rep.best_model, rep.best_bank, meta=meta)
        s = rep.session
        save_checkpoint(fold_dir / "final.milt", s.model, s.bank, s.optimizer, meta=dict(meta, epoch=cfg.epochs))
        if result.test_predictions:
            _write_json(fold_dir / "test_predictions.json", result.test_predictions[f].to_json())
    _write_json(out / "train_report.json", result.to_json())
    encoder = cfg.encoder_config(manifest.feature_width, manifest.class_count)
    _write_json(out / "run_meta.json", {
        "train_config": cfg.to_dict(),
        "encoder_config": encoder.to_dict(),
        "manifest": str(Path(args.manifest).resolve()),
        "split": {"fold_count": splits.fold_count, "seed": splits.seed, "test_bags": len(splits.test_ids)},
        "versions": {"belmil": __version__, "torch": torch.__version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "threads": args.threads,
        "elapsed_seconds": elapsed,
        "argv": sys.argv[1:],
    })
    acc = result.summary.get("accuracy", {})
    print(f"folds {len(result.reports)}; test accuracy mean {acc.get('mean')} std {acc.get('std')}")


def _subset_ids(splits: SplitAssignment, subset: str, fold: int) -> set[str]:
    if subset == "test":
        return splits.test_ids
    if not 0 <= fold < len(splits.folds):
        raise UsageError(f"fold {fold} outside [0, {len(splits.folds)})")
    train, val = splits.folds[fold]
    return train if subset == "train" else val


def cmd_eval(args, config):
    manifest = DatasetManifest.load_file(args.manifest)
    splits = SplitAssignment.load_file(args.split)
    model, _, _, meta = load_checkpoint(args.checkpoint)
    if model.config.input_dim != manifest.feature_width or model.config.n_classes != manifest.class_count:
        raise UsageError("checkpoint does not match the manifest's feature width or class count")
    ids = _subset_ids(splits, args.subset, args.fold if args.fold is not None else meta.get("fold", 0))
    bags = manifest.load_all(ids)
    preds, attention = predict(model, [bags[i] for i in sorted(bags)])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "predictions.json", preds.to_json())
    report = evaluate(preds)
    report.meta = {"checkpoint": str(args.checkpoint), "subset": args.subset, **meta}
    emit_report(report, preds, out, attention)
    print(f"bags {report.n_bags}; accuracy {report.accuracy:.4f}; macro F1 {report.macro_f1:.4f}; "
          f"AUROC {report.auroc_macro}")


def cmd_report(args, config):
    preds = PredictionSet.from_json(load_json(args.predictions))
    attention = read_attention_csv(args.attention) if args.attention else None
    train_report = load_json(args.train_report) if args.train_report else None
    report = evaluate(preds)
    written = emit_report(report, preds, args.out, attention)
    figures = render_figures(args.out, preds, train_report)
    print("metric,value")
    print(f"accuracy,{report.accuracy}")
    print(f"macro_f1,{report.macro_f1}")
    print(f"auroc_macro,{report.auroc_macro}")
    for c, v in report.pr_auc.items():
        print(f"pr_auc_class{c},{v}")
    for path in list(written.values()) + figures:
        log.info("wrote %s", path)


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the command name
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file with per-command sections")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="belmil", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"belmil {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="tissue mask and patch grid for PNG images")
    p.add_argument("--input", required=True, help="PNG file or directory of PNGs")
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--coverage", type=float, help="minimum tissue fraction per patch (default 0.5)")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth-gen", parents=[common], help="write a synthetic bag dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int)
    p.add_argument("--bags-per-class", type=int, dest="bags_per_class")
    p.add_argument("--n-min", type=int, dest="n_min")
    p.add_argument("--n-max", type=int, dest="n_max")
    p.add_argument("--width", type=int, help="feature width H")
    p.add_argument("--witness-rate", type=float, dest="witness_rate")
    p.add_argument("--noise-scale", type=float, dest="noise_scale")
    p.add_argument("--bags-per-patient", type=int, dest="bags_per_patient")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("split", parents=[common], help="patient-wise test hold-out and CV folds")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-ratio", type=float, dest="test_ratio")
    p.add_argument("--folds", type=int)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="cross-validated training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", help="existing split file; otherwise splits are drawn from --seed")
    p.add_argument("--folds", type=int)
    p.add_argument("--test-ratio", type=float, dest="test_ratio")
    p.add_argument("--epochs", type=int)
    p.add_argument("--no-bel", action="store_true", dest="no_bel", help="cross entropy only")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on one split subset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--subset", choices=("test", "val", "train"), default="test")
    p.add_argument("--fold", type=int, help="fold for val/train subsets (default: the checkpoint's fold)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="metrics, PR/attention CSVs and figures")
    p.add_argument("--predictions", required=True, help="PredictionSet JSON")
    p.add_argument("--attention", help="attention CSV written by eval")
    p.add_argument("--train-report", dest="train_report", help="train_report.json for training curves")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        args.func(args, config)
    except OSError as exc:
        print(f"belmil: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"belmil: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
