"""Grad-CAM adapted to the token stream of a vision transformer.

The feature map is the set of token activations entering a chosen block
(default: the final block).  Differentiating the pre-softmax class logit with
respect to those tokens and weighting channels by their mean gradient gives a
per-token relevance score; dropping the class token and reshaping yields a
patch-grid heatmap.

The final block's *output* patch tokens receive no gradient from a
class-token head, which is why the activations are taken on the input side of
the target block.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .imaging import resize_bilinear_f32, round_u8, write_image
from .model import VisionTransformer


@dataclass
class Heatmap:
    values: np.ndarray        # grid_h x grid_w float32 in [0, 1]
    target_class: int
    target_block: int

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            writer = csv.writer(fh)
            for row in self.values:
                writer.writerow([f"{v:.6f}" for v in row])

    def upsample(self, out_h: int, out_w: int) -> np.ndarray:
        """Bilinear upsample of the grid to pixel resolution (float in [0,1])."""
        return resize_bilinear_f32(self.values.astype(np.float64), out_h, out_w)


def normalize_heatmap(raw: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a flat map becomes all zeros."""
    lo = float(raw.min())
    hi = float(raw.max())
    if hi <= lo:
        return np.zeros_like(raw, dtype=np.float32)
    return ((raw - lo) / (hi - lo)).astype(np.float32)


def compute_gradcam(
    model: VisionTransformer,
    image: np.ndarray,
    class_idx: int,
    target_block: int | None = None,
) -> Heatmap:
    """Patch-grid relevance map for one image and one class.

    ``image`` is H x W x 3 float in [0, 1].  ``target_block`` selects the block
    whose incoming token activations form the feature map; None means the final
    block.
    """
    cfg = model.config
    if not (0 <= class_idx < cfg.num_classes):
        raise IndexError(f"class_idx {class_idx} out of range [0, {cfg.num_classes})")
    if target_block is None:
        target_block = cfg.num_blocks - 1
    if not (0 <= target_block < cfg.num_blocks):
        raise ValueError(f"target_block {target_block} out of range [0, {cfg.num_blocks})")

    batch = image[None].astype(np.float32)
    model.zero_grad()
    logits, captured = model.forward(batch, capture_block=target_block)
    tokens = captured["tokens_in"]
    score = logits[0, class_idx]
    T.backward(score)

    acts = tokens.data[0]                               # (1 + N) x dim
    grads = tokens.grad[0] if tokens.grad is not None else np.zeros_like(acts)
    weights = grads.mean(axis=0)                        # mean gradient per channel
    raw = np.maximum(acts @ weights, 0.0)[1:]           # ReLU, class token dropped
    grid = cfg.grid
    values = normalize_heatmap(raw.reshape(grid, grid))
    return Heatmap(values=values, target_class=class_idx, target_block=target_block)


def render_overlay(heatmap: Heatmap, image: np.ndarray) -> np.ndarray:
    """Blend a blue->red relevance ramp over a byte image at alpha 0.4."""
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    h, w = image.shape[:2]
    up = heatmap.upsample(h, w)
    ramp = np.stack([255.0 * up, np.zeros_like(up), 255.0 * (1.0 - up)], axis=2)
    out = 0.6 * image.astype(np.float64) + 0.4 * ramp
    return round_u8(out)


def save_overlay(heatmap: Heatmap, image: np.ndarray, path: str | Path) -> None:
    write_image(path, render_overlay(heatmap, image))
