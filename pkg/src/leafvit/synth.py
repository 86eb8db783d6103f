"""Seeded procedural dataset for desk-scale runs: three leaf-like classes.

Images are green textured backgrounds; the "dark_spot" class carries filled
circular lesions, "ring_spot" carries annular lesions, and "healthy" carries
none.  Each lesioned image's union bounding box is recorded in a sidecar JSON
so explanation quality can be scored against ground truth.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .imaging import resize_bilinear_f32, round_u8, write_image
from .seeding import rng_for

CLASS_NAMES = ("dark_spot", "healthy", "ring_spot")
LESIONED_CLASSES = ("dark_spot", "ring_spot")
LESION_SIDECAR = "lesions.json"


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    """Green leaf-like texture: base tone + low-frequency blotches + grain."""
    base = np.array([rng.uniform(45, 65), rng.uniform(115, 145), rng.uniform(35, 55)])
    img = np.ones((size, size, 3), dtype=np.float64) * base
    coarse = rng.normal(0.0, 9.0, size=(4, 4))
    img += resize_bilinear_f32(coarse, size, size)[:, :, None]
    img += rng.normal(0.0, 3.0, size=(size, size, 3))
    return img


def _lesion_color(rng: np.random.Generator) -> np.ndarray:
    return np.array([rng.uniform(95, 125), rng.uniform(45, 65), rng.uniform(20, 40)])


def _paint_disk(img, rng, size) -> tuple[int, int, int]:
    r = rng.uniform(6.0, 11.0)
    margin = int(np.ceil(r)) + 2
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    alpha = np.clip((r - dist) / 1.5, 0.0, 1.0)[:, :, None]
    img[:] = img * (1 - alpha) + _lesion_color(rng) * alpha
    return int(round(cy)), int(round(cx)), int(np.ceil(r))


def _paint_ring(img, rng, size) -> tuple[int, int, int]:
    """Annulus with a pale chlorotic interior, as ring lesions present."""
    r = rng.uniform(8.0, 12.0)
    thickness = rng.uniform(3.5, 4.5)
    margin = int(np.ceil(r + thickness)) + 2
    cy = rng.uniform(margin, size - margin)
    cx = rng.uniform(margin, size - margin)
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    inner = np.clip((r - thickness / 2.0 - dist) / 1.5, 0.0, 1.0)[:, :, None]
    halo = np.array([rng.uniform(120, 150), rng.uniform(140, 165), rng.uniform(40, 60)])
    img[:] = img * (1 - inner) + halo * inner
    alpha = np.clip((thickness / 2.0 - np.abs(dist - r)) / 1.5 + 1.0, 0.0, 1.0)[:, :, None]
    img[:] = img * (1 - alpha) + _lesion_color(rng) * alpha
    return int(round(cy)), int(round(cx)), int(np.ceil(r + thickness))


def _render(class_name: str, rng: np.random.Generator, size: int):
    img = _background(rng, size)
    bbox = None
    if class_name in LESIONED_CLASSES:
        paint = _paint_disk if class_name == "dark_spot" else _paint_ring
        y0 = x0 = size
        y1 = x1 = 0
        for _ in range(int(rng.integers(2, 4))):
            cy, cx, r = paint(img, rng, size)
            y0 = min(y0, max(0, cy - r))
            x0 = min(x0, max(0, cx - r))
            y1 = max(y1, min(size, cy + r + 1))
            x1 = max(x1, min(size, cx + r + 1))
        bbox = [int(y0), int(x0), int(y1), int(x1)]
    return round_u8(img), bbox


def generate_dataset(
    out_dir: str | Path,
    n_per_class: int = 500,
    image_size: int = 64,
    seed: int = 0,
) -> dict[str, list[int]]:
    """Write ``n_per_class`` PNGs per class under ``out_dir``/<class>/.

    Returns the lesion-bbox map {relative path: [y0, x0, y1, x1]} that is also
    written to the ``lesions.json`` sidecar.
    """
    out = Path(out_dir)
    lesions: dict[str, list[int]] = {}
    for class_id, class_name in enumerate(CLASS_NAMES):
        class_dir = out / class_name
        class_dir.mkdir(parents=True, exist_ok=True)
        for idx in range(n_per_class):
            rng = rng_for(seed, class_id, idx)
            img, bbox = _render(class_name, rng, image_size)
            rel = f"{class_name}/img_{idx:04d}.png"
            write_image(out / rel, img)
            if bbox is not None:
                lesions[rel] = bbox
    (out / LESION_SIDECAR).write_text(
        json.dumps(lesions, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return lesions


def load_lesion_boxes(data_root: str | Path) -> dict[str, list[int]]:
    path = Path(data_root) / LESION_SIDECAR
    return json.loads(path.read_text(encoding="utf-8"))
