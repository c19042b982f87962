"""Command-line entry point: phantom, preprocess, split, train, predict, evaluate."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import Checkpoint, CheckpointError
from .config import ConfigError, load_run_config
from .fusion import fuse_multiview
from .manifest import (
    MANIFEST_NAME,
    image_name,
    label_name,
    read_manifest,
    read_split,
    write_manifest,
    write_split,
)
from .metrics import format_summary, read_scores_csv, score_scan, summarize, write_scores_csv
from .phantom import cohort_entries, generate_phantom
from .preprocess import normalize_intensity, resample_cube, resample_to_original
from .training import kfold_split, predict_cube, train_view
from .volume import IntensityVolume, LabelVolume, VolumeError, ViewAxis, load_volume, save_volume

log = logging.getLogger("spleenseg")

VIEWS = ("axial", "coronal", "sagittal")
_VOLUME_SUFFIXES = (".nii.gz", ".nii", ".json")


class CommandError(RuntimeError):
    pass


def _strip_suffix(name: str) -> str | None:
    for suffix in _VOLUME_SUFFIXES:
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return None


def _volume_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and _strip_suffix(p.name) is not None)


# ---------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    cfg = load_run_config(args.config)
    n = args.n if args.n is not None else cfg.cohort.n
    seed = args.seed if args.seed is not None else cfg.cohort.seed
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for entry in cohort_entries(n, seed):
        image, label = generate_phantom(replace(cfg.phantom, style=entry.style, seed=entry.seed))
        save_volume(image, out / image_name(entry.scan_id))
        save_volume(label, out / label_name(entry.scan_id))
        rows.append({"scan_id": entry.scan_id, "subject_id": entry.subject_id, "modality": entry.modality,
                     "style": entry.style, "seed": entry.seed})
    write_manifest(rows, out / MANIFEST_NAME)
    print(f"wrote {n} phantoms and {MANIFEST_NAME} to {out}")
    return 0


def cmd_preprocess(args) -> int:
    src, dst = Path(args.in_dir), Path(args.out_dir)
    if not src.is_dir():
        raise CommandError(f"input directory not found: {src}")
    dst.mkdir(parents=True, exist_ok=True)
    files = _volume_files(src)
    if not files:
        raise CommandError(f"no volumes in {src}")
    for path in files:
        try:
            vol = load_volume(path)
            if isinstance(vol, IntensityVolume):
                vol = normalize_intensity(vol)
            vol = resample_cube(vol, args.cube_side)
        except (VolumeError, ValueError) as exc:
            raise CommandError(f"{path.name}: {exc}") from exc
        save_volume(vol, dst / path.name)
    manifest = src / MANIFEST_NAME
    if manifest.exists():
        (dst / MANIFEST_NAME).write_bytes(manifest.read_bytes())
    print(f"preprocessed {len(files)} volumes to {args.cube_side}^3 in {dst}")
    return 0


def cmd_split(args) -> int:
    entries = read_manifest(args.manifest)
    folds = kfold_split(entries, args.k, args.seed)
    out = Path(args.out) if args.out else Path(args.manifest).with_name(f"split_k{args.k}.csv")
    write_split(entries, folds, out)
    print(f"wrote {args.k}-fold split of {len(entries)} scans to {out}")
    return 0


def _load_pair(data_dir: Path, scan_id: str):
    image = load_volume(data_dir / image_name(scan_id))
    label = load_volume(data_dir / label_name(scan_id))
    if not isinstance(image, IntensityVolume) or not isinstance(label, LabelVolume):
        raise CommandError(f"{scan_id}: expected a float image and an integer label volume")
    return image, label


class _StepLog(logging.Handler):
    def __init__(self, path: Path):
        super().__init__()
        self.fh = open(path, "w")

    def emit(self, record):
        self.fh.write(record.getMessage() + "\n")

    def close(self):
        self.fh.close()
        super().close()


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    data_dir = Path(args.data_dir or cfg.paths.get("data_dir", ""))
    out = Path(args.out_dir or cfg.paths.get("out_dir", "checkpoints"))
    manifest_path = Path(args.manifest) if args.manifest else data_dir / MANIFEST_NAME
    if not manifest_path.exists():
        raise CommandError(f"missing manifest {manifest_path}")
    entries = read_manifest(manifest_path)
    train_ids = [e.scan_id for e in entries]
    val_ids: list[str] = []
    split_file = args.split_file or cfg.paths.get("split_file")
    if args.fold is not None:
        if not split_file:
            raise CommandError("--fold requires --split-file")
        folds = read_split(split_file)
        val_ids = [s for s in train_ids if folds.get(s) == args.fold]
        train_ids = [s for s in train_ids if folds.get(s) != args.fold]
    cohort = [_load_pair(data_dir, s) for s in train_ids]
    validation = [_load_pair(data_dir, s) for s in val_ids]
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    side = cohort[0][0].header.dims[0]
    if side != train_cfg.cube_side:
        train_cfg = replace(train_cfg, cube_side=side)
    out.mkdir(parents=True, exist_ok=True)
    views = VIEWS if args.view == "all" else (args.view,)
    step_logger = logging.getLogger("spleenseg.training")
    previous_level = step_logger.level
    step_logger.setLevel(logging.INFO)
    try:
        _train_views(cohort, validation, train_cfg, views, out, step_logger)
    finally:
        step_logger.setLevel(previous_level)
    return 0


def _train_views(cohort, validation, train_cfg, views, out, step_logger):
    for view in views:
        view_cfg = replace(train_cfg, view=view)
        handler = _StepLog(out / f"train_{view}.log")
        step_logger.addHandler(handler)
        try:
            result = train_view(cohort, view_cfg, validation=validation or None)
        finally:
            step_logger.removeHandler(handler)
            handler.close()
        ckpt_path = out / f"{view}.ckpt"
        result.checkpoint.save(ckpt_path)
        with open(out / f"validation_{view}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "view", "validation_dsc"])
            for epoch, dsc in enumerate(result.validation_dsc, start=1):
                w.writerow([epoch, view, repr(dsc)])
        print(f"trained {view}: {ckpt_path}")


def _scan_stem(path: Path) -> str:
    stem = _strip_suffix(path.name) or path.stem
    return stem[: -len("_image")] if stem.endswith("_image") else stem


def cmd_predict(args) -> int:
    ckpts = [Checkpoint.load(p) for p in args.checkpoints]
    views = [ViewAxis.parse(c.view).value for c in ckpts]
    if len(set(views)) != len(views):
        raise CommandError(f"duplicate checkpoint views: {views}")
    sides = {c.generator_config.input_side for c in ckpts}
    if len(sides) != 1:
        raise CommandError(f"dims mismatch: checkpoints use cube sides {sorted(sides)}")
    side = sides.pop()
    volume = load_volume(args.volume)
    if not isinstance(volume, IntensityVolume):
        raise CommandError(f"{args.volume} is not an intensity volume")
    cube = resample_cube(normalize_intensity(volume), side)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = _scan_stem(Path(args.volume))
    cube_masks = {}
    for view, ckpt in zip(views, ckpts):
        cube_masks[view] = predict_cube(ckpt.generator(), cube, view)
        save_volume(resample_to_original(cube_masks[view], volume.header), out / f"{stem}_{view}.nii.gz")
    written = len(views)
    if len(views) == 3:
        fused = fuse_multiview(cube_masks["axial"], cube_masks["coronal"], cube_masks["sagittal"], args.radius)
        save_volume(resample_to_original(fused, volume.header), out / f"{stem}_fused.nii.gz")
        written += 1
    elif len(views) != 1:
        raise CommandError("predict takes one checkpoint (single view) or three (one per view)")
    print(f"wrote {written} mask(s) for {stem} to {out}")
    return 0


def _truth_index(truth_dir: Path) -> dict[str, Path]:
    index = {}
    for p in _volume_files(truth_dir):
        stem = _strip_suffix(p.name)
        if stem.endswith("_label"):
            index[stem[: -len("_label")]] = p
    return index


def cmd_evaluate(args) -> int:
    pred_dir, truth_dir = Path(args.pred_dir), Path(args.truth_dir)
    truths = _truth_index(truth_dir)
    if not truths:
        raise CommandError(f"no *_label volumes in {truth_dir}")
    scores = []
    for scan_id, truth_path in sorted(truths.items()):
        candidates = [pred_dir / f"{scan_id}_{args.pred_suffix}{ext}" for ext in (".nii.gz", ".nii", ".json")]
        pred_path = next((c for c in candidates if c.exists()), None)
        if pred_path is None:
            continue
        truth, pred = load_volume(truth_path), load_volume(pred_path)
        if truth.header.dims != pred.header.dims:
            raise CommandError(f"{scan_id}: dims mismatch {pred.header.dims} vs {truth.header.dims}")
        scores.append(score_scan(scan_id, pred, truth, truth.header.spacing))
    if not scores:
        raise CommandError(f"no predictions with suffix '_{args.pred_suffix}' matched truths in {truth_dir}")
    reference = None
    if args.reference_csv:
        ref = {s.scan_id: s for s in read_scores_csv(args.reference_csv)}
        missing = [s.scan_id for s in scores if s.scan_id not in ref]
        if missing:
            raise CommandError(f"reference CSV lacks scans {missing}")
        reference = [ref[s.scan_id] for s in scores]
    summary = summarize(scores, reference)
    out = Path(args.out_dir) if args.out_dir else pred_dir
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(scores, out / "metrics.csv")
    text = format_summary(summary, args.method)
    (out / "summary.txt").write_text(text)
    (out / "summary.json").write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True))
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spleenseg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic phantom cohort and manifest")
    s.add_argument("--config", help="JSON run config (phantom and cohort sections)")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--n", type=int, help="number of phantoms (overrides cohort.n)")
    s.add_argument("--seed", type=int, help="cohort seed (overrides cohort.seed)")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", help="normalize intensities and resample volumes to a cube")
    s.add_argument("in_dir")
    s.add_argument("out_dir")
    s.add_argument("--cube-side", type=int, default=512)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("split", help="subject-grouped k-fold assignment")
    s.add_argument("manifest")
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output CSV (default: split_k<k>.csv next to the manifest)")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train one network per view")
    s.add_argument("--config", help="JSON run config")
    s.add_argument("--data-dir", help="preprocessed cohort directory")
    s.add_argument("--manifest", help="manifest CSV (default: <data-dir>/manifest.csv)")
    s.add_argument("--out-dir", help="checkpoint directory")
    s.add_argument("--view", choices=[*VIEWS, "all"], default="axial")
    s.add_argument("--split-file", help="fold assignment CSV from 'split'")
    s.add_argument("--fold", type=int, help="fold held out for validation")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="segment a volume with one or three view checkpoints")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--volume", required=True, help="intensity volume at original resolution")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--radius", type=int, default=3, help="fusion ball radius in voxels")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="DSC / MSD / HD per scan plus a cohort summary")
    s.add_argument("pred_dir")
    s.add_argument("truth_dir")
    s.add_argument("--pred-suffix", default="fused", help="prediction files are <id>_<suffix>.nii.gz")
    s.add_argument("--reference-csv", help="per-scan CSV of a reference method for Wilcoxon tests")
    s.add_argument("--out-dir", help="where to write metrics.csv and summary files (default: pred_dir)")
    s.add_argument("--method", default="method", help="row label in the summary table")
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, VolumeError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
