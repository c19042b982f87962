"""CSV manifests listing scans, pseudo-subjects and fold assignments."""

from __future__ import annotations

import csv
from pathlib import Path

from .training import ManifestEntry

MANIFEST_NAME = "manifest.csv"
MANIFEST_COLUMNS = ("scan_id", "subject_id", "modality", "style", "seed")


def image_name(scan_id: str) -> str:
    return f"{scan_id}_image.nii.gz"


def label_name(scan_id: str) -> str:
    return f"{scan_id}_label.nii.gz"


def write_manifest(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in MANIFEST_COLUMNS})


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing manifest {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"scan_id", "subject_id"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"manifest {path} lacks column(s) {sorted(missing)}")
        return [ManifestEntry(r["scan_id"], r["subject_id"], r.get("modality") or "unknown") for r in reader]


def write_split(entries: list[ManifestEntry], folds: list[list[str]], path) -> None:
    fold_of = {sid: i for i, fold in enumerate(folds) for sid in fold}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scan_id", "subject_id", "modality", "fold"])
        for e in entries:
            w.writerow([e.scan_id, e.subject_id, e.modality, fold_of[e.scan_id]])


def read_split(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        return {r["scan_id"]: int(r["fold"]) for r in csv.DictReader(fh)}
