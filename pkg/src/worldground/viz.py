"""Figure emission: depth, saliency, and rollout heatmaps plus the
predicted-vs-ground-truth box overlay.

Heatmaps are indexed-color PNGs sharing one fixed palette, so panels
from different runs stay comparable pixel for pixel.
"""

from __future__ import annotations

import os

import numpy as np
import torch
from PIL import Image, ImageDraw

from .errors import ValidationError

# dark violet to yellow ramp; anchors picked for monotone luminance
_ANCHORS = (
    (68, 1, 84),
    (59, 82, 139),
    (33, 145, 140),
    (94, 201, 98),
    (253, 231, 37),
)

PRED_COLOR = (255, 64, 64)
GT_COLOR = (64, 255, 64)


def heat_palette() -> list:
    """768-entry flat RGB palette interpolated through the anchors."""
    palette = []
    segments = len(_ANCHORS) - 1
    for i in range(256):
        pos = i / 255.0 * segments
        seg = min(int(pos), segments - 1)
        frac = pos - seg
        lo, hi = _ANCHORS[seg], _ANCHORS[seg + 1]
        palette.extend(round(l + (h - l) * frac) for l, h in zip(lo, hi))
    return palette


_PALETTE = heat_palette()


def _quantize(values: np.ndarray, lo=None, hi=None) -> np.ndarray:
    """Map floats to uint8 indices; non-finite values go to 0."""
    vals = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(vals)
    if not finite.any():
        return np.zeros(vals.shape, dtype=np.uint8)
    if lo is None:
        lo = float(vals[finite].min())
    if hi is None:
        hi = float(vals[finite].max())
    span = hi - lo if hi > lo else 1.0
    scaled = np.clip((vals - lo) / span, 0.0, 1.0)
    scaled[~finite] = 0.0
    return np.round(scaled * 255).astype(np.uint8)


def heatmap_png(values, path: str, size: int = 192, lo=None, hi=None) -> str:
    """Write a [h, w] float array as an indexed-color PNG, nearest
    upscaled to `size` pixels on the long edge."""
    if isinstance(values, torch.Tensor):
        values = values.detach().numpy()
    if values.ndim != 2:
        raise ValidationError(f"heatmap wants 2 dims, got {values.ndim}")
    img = Image.fromarray(_quantize(values, lo, hi), mode="P")
    img.putpalette(_PALETTE)
    scale = max(1, size // max(img.size))
    img = img.resize((img.width * scale, img.height * scale),
                     Image.NEAREST)
    img.save(path)
    return path


def _as_rgb(image) -> Image.Image:
    if isinstance(image, torch.Tensor):
        image = image.detach().numpy()
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValidationError("expected a [3, H, W] image")
    return Image.fromarray(
        (arr.transpose(1, 2, 0) * 255).astype(np.uint8))


def image_png(image, path: str, size: int = 192) -> str:
    img = _as_rgb(image)
    scale = max(1, size // max(img.size))
    img = img.resize((img.width * scale, img.height * scale),
                     Image.NEAREST)
    img.save(path)
    return path


def overlay_png(image, boxes, path: str, size: int = 192) -> str:
    """Draw (box, color) pairs over the scene; boxes are normalized
    [x0, y0, x1, y1]."""
    img = _as_rgb(image)
    scale = max(1, size // max(img.size))
    img = img.resize((img.width * scale, img.height * scale),
                     Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for box, color in boxes:
        x0, y0, x1, y1 = (float(v) for v in box)
        draw.rectangle([x0 * img.width, y0 * img.height,
                        x1 * img.width, y1 * img.height],
                       outline=color, width=2)
    img.save(path)
    return path


def render_sample(model, prepped, sample, out_dir: str) -> list:
    """Write the full panel set for one sample; returns the paths.

    Panels: input scene, depth prior, one saliency map per cross-modal
    layer, one painted map per rollout step (step 0 is the current
    state), and the predicted-vs-gt box overlay.
    """
    os.makedirs(out_dir, exist_ok=True)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            out = model(prepped)
    finally:
        model.train(was_training)

    grid = model.grid
    paths = []

    def emit(name, fn, *args, **kwargs):
        paths.append(fn(*args, os.path.join(out_dir, name), **kwargs))

    emit("input.png", image_png, sample.image)

    # render the prior the model actually consumes; sky (+inf) is 0
    prior = np.exp(-model.depth_alpha * np.asarray(sample.depth))
    prior[~np.isfinite(prior)] = 0.0
    emit("depth.png", heatmap_png, prior, lo=0.0, hi=1.0)

    maps = out.saliency_maps
    n_layers = (len(model.cross.layers)
                if "no_sawm" not in model.ablations else 0)
    for i in range(n_layers):
        emit(f"saliency_layer{i}.png", heatmap_png,
             maps[i].reshape(grid, grid), lo=0.0, hi=1.0)
    for k, painted in enumerate(maps[n_layers:]):
        emit(f"rollout_step{k}.png", heatmap_png,
             painted.reshape(grid, grid), lo=0.0, hi=1.0)

    gt_box = sample.objects[sample.target_index].box
    emit("boxes.png", overlay_png, sample.image,
         [(out.grounding.box.tolist(), PRED_COLOR),
          (list(gt_box), GT_COLOR)])
    return paths
