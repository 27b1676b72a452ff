import numpy as np
import pytest
from PIL import Image

from worldground import viz
from worldground.errors import ValidationError


def test_palette_is_full_rgb_ramp():
    palette = viz.heat_palette()
    assert len(palette) == 768
    assert palette[:3] == [68, 1, 84]
    assert palette[-3:] == [253, 231, 37]
    assert all(0 <= v <= 255 for v in palette)


def test_quantize_endpoints_and_clipping():
    vals = np.array([[0.0, 0.5], [1.0, 2.0]])
    idx = viz._quantize(vals, lo=0.0, hi=1.0)
    assert idx.dtype == np.uint8
    assert idx[0, 0] == 0
    assert idx[0, 1] == 128
    assert idx[1, 0] == 255
    assert idx[1, 1] == 255  # clipped above hi


def test_quantize_non_finite_goes_dark():
    vals = np.array([[np.inf, 0.5], [np.nan, 1.0]])
    idx = viz._quantize(vals, lo=0.0, hi=1.0)
    assert idx[0, 0] == 0
    assert idx[1, 0] == 0
    assert idx[1, 1] == 255


def test_quantize_auto_range_uses_finite_values():
    vals = np.array([2.0, 4.0, np.inf])
    idx = viz._quantize(vals)
    assert idx[0] == 0
    assert idx[1] == 255
    assert idx[2] == 0


def test_quantize_all_non_finite_is_zero():
    vals = np.full((2, 2), np.nan)
    assert viz._quantize(vals).sum() == 0


def test_heatmap_png_is_indexed_and_upscaled(tmp_path):
    path = str(tmp_path / "h.png")
    out = viz.heatmap_png(np.random.default_rng(0).random((12, 12)), path,
                          size=192, lo=0.0, hi=1.0)
    assert out == path
    with Image.open(path) as im:
        assert im.mode == "P"
        assert im.size == (192, 192)
        # nearest-neighbor upscale: 16x16 constant blocks
        arr = np.asarray(im)
        block = arr[:16, :16]
        assert (block == block[0, 0]).all()


def test_heatmap_rejects_non_2d(tmp_path):
    with pytest.raises(ValidationError):
        viz.heatmap_png(np.zeros(5), str(tmp_path / "x.png"))


def test_image_png_stays_rgb(tmp_path):
    image = np.random.default_rng(1).random((3, 96, 96)).astype(np.float32)
    path = str(tmp_path / "img.png")
    viz.image_png(image, path)
    with Image.open(path) as im:
        assert im.mode == "RGB"
        assert im.size == (192, 192)


def test_overlay_draws_box_colors(tmp_path):
    image = np.zeros((3, 96, 96), dtype=np.float32)
    path = str(tmp_path / "ov.png")
    viz.overlay_png(image, [((0.25, 0.25, 0.75, 0.75), viz.PRED_COLOR),
                            ((0.1, 0.1, 0.9, 0.9), viz.GT_COLOR)], path)
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    flat = arr.reshape(-1, 3)
    assert (flat == np.array(viz.PRED_COLOR)).all(axis=1).any()
    assert (flat == np.array(viz.GT_COLOR)).all(axis=1).any()
