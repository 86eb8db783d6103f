"""Dataset ingestion, stratified splitting, k-fold construction, augmentation.

A manifest is the persistent contract between pipeline stages: a label table,
a seed, and one record per sample.  Record paths are stored relative to the
manifest's base directory so that two runs with the same layout produce
byte-identical manifest files.
"""

from __future__ import annotations

import json
import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import imaging
from .seeding import derive_seed, rng_for, stable_text_key

logger = logging.getLogger(__name__)

SUPPORTED_EXTENSIONS = (".png", ".ppm", ".pgm", ".pnm")

SPLIT_NAMES = ("train", "val", "test")


class IngestError(ValueError):
    """Raised when a dataset directory cannot be turned into a manifest."""


@dataclass
class SampleRecord:
    path: str                      # relative to the manifest base dir
    class_id: int
    class_name: str
    split: str | None = None       # "train" | "val" | "test" | None
    origin: str = "original"       # "original" | "augmented"
    parent: str | None = None      # parent record path for augmented samples
    aug_seed: int | None = None

    def to_json(self) -> dict:
        d = {
            "path": self.path,
            "class_id": self.class_id,
            "class_name": self.class_name,
            "split": self.split,
            "origin": self.origin,
        }
        if self.origin == "augmented":
            d["parent"] = self.parent
            d["aug_seed"] = self.aug_seed
        return d

    @staticmethod
    def from_json(d: dict) -> "SampleRecord":
        return SampleRecord(
            path=d["path"],
            class_id=int(d["class_id"]),
            class_name=d["class_name"],
            split=d.get("split"),
            origin=d.get("origin", "original"),
            parent=d.get("parent"),
            aug_seed=d.get("aug_seed"),
        )


@dataclass
class DatasetManifest:
    labels: dict[str, int]          # class name -> id
    records: list[SampleRecord]
    seed: int
    base_dir: Path                  # where relative record paths anchor (not serialized)

    def __post_init__(self) -> None:
        self.base_dir = Path(self.base_dir)
        paths = [r.path for r in self.records]
        if len(set(paths)) != len(paths):
            raise ValueError("manifest record paths must be unique")

    def resolve(self, record: SampleRecord) -> Path:
        return (self.base_dir / record.path).resolve()

    def by_split(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def originals(self) -> list[SampleRecord]:
        return [r for r in self.records if r.origin == "original"]

    def class_names(self) -> list[str]:
        return [name for name, _ in sorted(self.labels.items(), key=lambda kv: kv[1])]

    def content_hash(self) -> str:
        payload = {
            "labels": self.labels,
            "seed": self.seed,
            "records": [r.to_json() for r in self.records],
        }
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        payload = {
            "schema_version": 1,
            "labels": self.labels,
            "seed": self.seed,
            "records": [r.to_json() for r in self.records],
            "content_hash": self.content_hash(),
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @staticmethod
    def load(path: str | Path) -> "DatasetManifest":
        path = Path(path)
        payload = json.loads(path.read_text(encoding="utf-8"))
        manifest = DatasetManifest(
            labels={k: int(v) for k, v in payload["labels"].items()},
            records=[SampleRecord.from_json(d) for d in payload["records"]],
            seed=int(payload["seed"]),
            base_dir=path.parent,
        )
        stored = payload.get("content_hash")
        if stored and stored != manifest.content_hash():
            raise ValueError(f"{path}: manifest content hash mismatch")
        return manifest


@dataclass(frozen=True)
class AugmentationSpec:
    """Random flip / rotation / zoom / brightness, three copies per original."""

    hflip_prob: float = 0.5
    rotation_deg: float = 15.0           # +/- range
    zoom: tuple[float, float] = (0.9, 1.1)
    brightness: tuple[float, float] = (0.9, 1.1)
    copies: int = 3

    def validate(self) -> None:
        if self.copies != 3:
            raise ValueError("augmentation produces exactly three copies per original")
        if not (0.0 <= self.hflip_prob <= 1.0):
            raise ValueError(f"hflip_prob must be in [0,1], got {self.hflip_prob}")
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg is a +/- range and must be >= 0")
        for name, rng in (("zoom", self.zoom), ("brightness", self.brightness)):
            if rng[0] > rng[1]:
                raise ValueError(f"{name} range {rng} is not well ordered")


# -- ingestion ---------------------------------------------------------------


def ingest(root_dir: str | Path, seed: int = 0, base_dir: str | Path | None = None) -> DatasetManifest:
    """Build a manifest from a class-per-directory image tree.

    Labels are assigned in lexicographic class-name order.  Files with
    unsupported extensions are skipped (counted in a warning).
    """
    root = Path(root_dir)
    if not root.is_dir():
        raise IngestError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestError(f"dataset root {root} contains zero class directories")
    base = Path(base_dir) if base_dir is not None else root
    labels = {p.name: i for i, p in enumerate(class_dirs)}
    records: list[SampleRecord] = []
    skipped = 0
    for class_dir in class_dirs:
        files = sorted(p for p in class_dir.iterdir() if p.is_file())
        kept = [p for p in files if p.suffix.lower() in SUPPORTED_EXTENSIONS]
        skipped += len(files) - len(kept)
        if not kept:
            raise IngestError(f"class directory {class_dir.name!r} contains no supported images")
        for p in kept:
            rel = _relpath(p, base)
            records.append(SampleRecord(path=rel, class_id=labels[class_dir.name], class_name=class_dir.name))
    if skipped:
        logger.warning("ingest: skipped %d files with unsupported extensions", skipped)
    return DatasetManifest(labels=labels, records=records, seed=seed, base_dir=base)


def _relpath(target: Path, base: Path) -> str:
    import os

    return Path(os.path.relpath(target.resolve(), base.resolve())).as_posix()


# -- splitting ---------------------------------------------------------------


def stratified_split(
    manifest: DatasetManifest,
    ratios: tuple[float, float, float] = (0.75, 0.10, 0.15),
    seed: int | None = None,
) -> DatasetManifest:
    """Assign train/val/test per class: floor allocation, remainders to train.

    Each class is shuffled by a generator keyed on (seed, class_id), so the
    assignment is reproducible and independent of record order on disk.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must sum to 1, got {ratios}")
    seed = manifest.seed if seed is None else seed
    records = [replace(r) for r in manifest.records]
    by_class: dict[int, list[int]] = {}
    for idx, r in enumerate(records):
        by_class.setdefault(r.class_id, []).append(idx)

    for class_id, indices in sorted(by_class.items()):
        perm = rng_for(seed, class_id).permutation(len(indices))
        n = len(indices)
        n_train = int(np.floor(ratios[0] * n))
        n_val = int(np.floor(ratios[1] * n))
        n_test = int(np.floor(ratios[2] * n))
        n_train += n - (n_train + n_val + n_test)
        if min(n_train, n_val, n_test) < 1:
            raise ValueError(
                f"class {records[indices[0]].class_name!r} has {n} samples; "
                f"too few for ratios {ratios} to give every split at least one"
            )
        for rank, j in enumerate(perm):
            rec = records[indices[j]]
            if rank < n_train:
                rec.split = "train"
            elif rank < n_train + n_val:
                rec.split = "val"
            else:
                rec.split = "test"
    return DatasetManifest(labels=dict(manifest.labels), records=records, seed=seed, base_dir=manifest.base_dir)


def make_kfolds(
    manifest: DatasetManifest, k: int = 5, seed: int | None = None
) -> list[tuple[DatasetManifest, DatasetManifest]]:
    """Stratified k-fold partition: per-class round-robin after a seeded shuffle.

    Returns (train, test) manifest pairs; folds are disjoint, cover every
    record, and per-class fold sizes differ by at most one.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    seed = manifest.seed if seed is None else seed
    by_class: dict[int, list[int]] = {}
    for idx, r in enumerate(manifest.records):
        by_class.setdefault(r.class_id, []).append(idx)
    fold_of = np.empty(len(manifest.records), dtype=np.int64)
    for class_id, indices in sorted(by_class.items()):
        if len(indices) < k:
            raise ValueError(
                f"class {manifest.records[indices[0]].class_name!r} has only "
                f"{len(indices)} samples, fewer than k={k}"
            )
        perm = rng_for(seed, class_id, 0xF01D).permutation(len(indices))
        for rank, j in enumerate(perm):
            fold_of[indices[j]] = rank % k

    folds: list[tuple[DatasetManifest, DatasetManifest]] = []
    for fold in range(k):
        train_records = []
        test_records = []
        for idx, r in enumerate(manifest.records):
            rec = replace(r, split="test" if fold_of[idx] == fold else "train")
            (test_records if fold_of[idx] == fold else train_records).append(rec)
        mk = lambda recs: DatasetManifest(
            labels=dict(manifest.labels),
            records=recs,
            seed=derive_seed(seed, fold),
            base_dir=manifest.base_dir,
        )
        folds.append((mk(train_records), mk(test_records)))
    return folds


# -- augmentation --------------------------------------------------------------


def _sample_bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample img (H x W x C float) at fractional coords with edge replication."""
    h, w = img.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[..., None]
    fx = (xs - x0)[..., None]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = img[y0c, x0c] * (1 - fx) + img[y0c, x1c] * fx
    bot = img[y1c, x0c] * (1 - fx) + img[y1c, x1c] * fx
    return top * (1 - fy) + bot * fy


def _warp_about_center(img: np.ndarray, angle_deg: float, scale: float) -> np.ndarray:
    """Rotate by angle and zoom by scale about the image center (inverse mapping)."""
    if angle_deg == 0.0 and scale == 1.0:
        return img
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy = yy - cy
    dx = xx - cx
    # inverse of rotate-then-zoom: unscale, then rotate by -theta
    dy /= scale
    dx /= scale
    src_y = cy + cos_t * dy - sin_t * dx
    src_x = cx + sin_t * dy + cos_t * dx
    return _sample_bilinear(img, src_y, src_x)


def apply_augmentation(img: np.ndarray, spec: AugmentationSpec, draw_seed: int) -> np.ndarray:
    """One augmented copy of a float image: flip -> rotate -> zoom -> brightness.

    All four draws are consumed in a fixed order from a generator seeded with
    ``draw_seed``, so the output depends only on (image, spec, draw_seed).
    """
    spec.validate()
    if img.ndim != 3:
        raise ValueError(f"expected H x W x C float image, got shape {img.shape}")
    rng = rng_for(draw_seed)
    u_flip = rng.random()
    angle = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
    zoom = rng.uniform(spec.zoom[0], spec.zoom[1])
    bright = rng.uniform(spec.brightness[0], spec.brightness[1])

    out = np.asarray(img, dtype=np.float64)
    if u_flip < spec.hflip_prob:
        out = out[:, ::-1, :]
    out = _warp_about_center(out, angle, 1.0) if angle != 0.0 else out
    out = _warp_about_center(out, 0.0, zoom) if zoom != 1.0 else out
    out = np.clip(out * bright, 0.0, 1.0)
    return out.astype(np.float32)


def augment_training_set(
    manifest: DatasetManifest,
    spec: AugmentationSpec,
    seed: int | None = None,
    work_dir: str | Path | None = None,
) -> DatasetManifest:
    """Materialize three augmented copies of every train-split original.

    Files are written under ``<work_dir>/augmented/<class_name>/`` and recorded
    with provenance (parent path + draw seed).  Val/test records are untouched.
    """
    spec.validate()
    seed = manifest.seed if seed is None else seed
    work = Path(work_dir) if work_dir is not None else manifest.base_dir
    records = [replace(r) for r in manifest.records]
    new_records: list[SampleRecord] = []
    for rec in records:
        if rec.split != "train" or rec.origin != "original":
            continue
        src = manifest.base_dir / rec.path
        img_f = imaging.normalize01(imaging.read_image(src))
        stem = Path(rec.path).stem
        out_dir = work / "augmented" / rec.class_name
        out_dir.mkdir(parents=True, exist_ok=True)
        for copy in range(1, spec.copies + 1):
            draw_seed = derive_seed(seed, stable_text_key(rec.path), copy)
            aug = apply_augmentation(img_f, spec, draw_seed)
            out_path = out_dir / f"{stem}_aug{copy}.png"
            try:
                imaging.write_image(out_path, imaging.round_u8(aug * 255.0))
            except OSError as e:
                raise OSError(f"failed to write augmented image {out_path}: {e}") from e
            new_records.append(
                SampleRecord(
                    path=_relpath(out_path, manifest.base_dir),
                    class_id=rec.class_id,
                    class_name=rec.class_name,
                    split="train",
                    origin="augmented",
                    parent=rec.path,
                    aug_seed=draw_seed,
                )
            )
    return DatasetManifest(
        labels=dict(manifest.labels),
        records=records + new_records,
        seed=seed,
        base_dir=manifest.base_dir,
    )
