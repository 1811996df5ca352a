import numpy as np
import pytest
from PIL import Image

from neurovasc.report import (FN_COLOR, FP_COLOR, TP_COLOR, has_color, mip_overlay, overlay, pick_slices,
                              write_overlays)


def _case():
    img = np.random.default_rng(0).random((6, 8, 5)).astype(np.float32)
    gt = np.zeros((6, 8, 5), np.uint8)
    gt[1:3, 2:6, 2] = 1
    pred = gt.copy()
    pred[1, 2, 2] = 0      # FN
    pred[4, 4, 2] = 1      # FP
    return img, pred, gt


def test_palette_matches_figure_colours():
    assert TP_COLOR == (255, 165, 0) and FP_COLOR == (255, 0, 0) and FN_COLOR == (0, 255, 0)


def test_overlay_paints_each_error_class():
    img, pred, gt = _case()
    rgb = overlay(img[:, :, 2], pred[:, :, 2], gt[:, :, 2])
    assert tuple(rgb[1, 2]) == FN_COLOR
    assert tuple(rgb[4, 4]) == FP_COLOR
    assert tuple(rgb[2, 3]) == TP_COLOR
    assert rgb.dtype == np.uint8 and rgb.shape == (6, 8, 3)


def test_overlay_grayscale_elsewhere():
    img, pred, gt = _case()
    rgb = overlay(img[:, :, 0], pred[:, :, 0], gt[:, :, 0])
    assert np.all(rgb[..., 0] == rgb[..., 1]) and np.all(rgb[..., 1] == rgb[..., 2])


def test_overlay_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        overlay(np.zeros((3, 3)), np.zeros((3, 4)), np.zeros((3, 3)))


def test_mip_projects_errors():
    img, pred, gt = _case()
    rgb = mip_overlay(img, pred, gt)
    assert rgb.shape == (6, 8, 3)
    assert has_color(rgb, TP_COLOR) and has_color(rgb, FP_COLOR) and has_color(rgb, FN_COLOR)


def test_pick_slices_prefers_foreground():
    _, _, gt = _case()
    assert 2 in pick_slices(gt, 1)


def test_written_pngs_have_slice_dimensions(tmp_path):
    img, pred, gt = _case()
    paths = write_overlays(img, pred, gt, tmp_path, "v", n_slices=2)
    names = {p.name for p in paths}
    assert "v_mip.png" in names and "v_montage.png" in names
    single = [p for p in paths if "axial" in p.name]
    assert len(single) == 2
    for p in single:
        assert Image.open(p).size == (8, 6)
    assert Image.open(tmp_path / "v_montage.png").size == (16, 6)


def test_perfect_prediction_has_no_red_or_green(tmp_path):
    img, _, gt = _case()
    for p in write_overlays(img, gt, gt, tmp_path, "ok"):
        rgb = np.asarray(Image.open(p).convert("RGB"))
        assert not has_color(rgb, FP_COLOR) and not has_color(rgb, FN_COLOR)
