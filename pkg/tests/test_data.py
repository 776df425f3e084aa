import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from edgesegnet.data import (
    Palette,
    camvid_palette,
    load_dataset,
    read_label,
    resize_nearest,
    synth_dataset,
    synth_split,
    write_image_png,
    write_label_png,
)
from edgesegnet.errors import ArgumentError, DataError

PAL = Palette(["road", "sky", "car"], [[128, 64, 128], [128, 128, 128], [64, 0, 128]])


def _save_rgb(arr, path):
    Image.fromarray(np.asarray(arr, np.uint8), "RGB").save(path)


def test_empty_directories_give_empty_dataset(tmp_path):
    (tmp_path / "img").mkdir()
    (tmp_path / "lab").mkdir()
    ds = load_dataset(tmp_path / "img", tmp_path / "lab", PAL, (16, 16))
    assert len(ds) == 0


def test_rgb_label_lookup(tmp_path):
    rgb = [[[128, 64, 128], [128, 128, 128]], [[64, 0, 128], [128, 64, 128]]]
    _save_rgb(rgb, tmp_path / "a.png")
    np.testing.assert_array_equal(read_label(tmp_path / "a.png", PAL), [[0, 1], [2, 0]])


def test_unknown_color_reports_count(tmp_path):
    _save_rgb([[[1, 2, 3], [128, 64, 128]], [[1, 2, 3], [9, 9, 9]]], tmp_path / "a.png")
    with pytest.raises(DataError, match="3 pixels"):
        read_label(tmp_path / "a.png", PAL)


def test_index_label_with_ignore(tmp_path):
    Image.fromarray(np.array([[0, 2], [255, 1]], np.uint8), "L").save(tmp_path / "i.png")
    pal = Palette(PAL.names, PAL.colors, ignore_label=255)
    np.testing.assert_array_equal(read_label(tmp_path / "i.png", pal), [[0, 2], [255, 1]])
    with pytest.raises(DataError):
        read_label(tmp_path / "i.png", PAL)


def test_label_png_round_trip(tmp_path):
    lab = np.random.default_rng(0).integers(0, 3, (5, 7))
    write_label_png(lab, PAL, tmp_path / "l.png")
    np.testing.assert_array_equal(read_label(tmp_path / "l.png", PAL), lab)


def test_image_png_and_ppm_round_trip(tmp_path):
    rgb = np.random.default_rng(1).integers(0, 256, (4, 6, 3)).astype(np.uint8)
    img = rgb.transpose(2, 0, 1)[None] / 255.0
    (tmp_path / "img").mkdir()
    (tmp_path / "lab").mkdir()
    write_image_png(img, tmp_path / "img" / "x.png")
    _save_rgb(rgb, tmp_path / "img" / "y.ppm")
    for stem in ("x", "y"):
        _save_rgb(np.zeros((4, 6, 3)) + [128, 64, 128], tmp_path / "lab" / f"{stem}_L.png")
    ds = load_dataset(tmp_path / "img", tmp_path / "lab", PAL, (4, 6))
    assert [s.name for s in ds.samples] == ["x", "y"]
    for s in ds.samples:
        np.testing.assert_allclose(s.image[0], img[0], atol=1e-6)
        assert s.image.dtype == np.float32 and s.label.shape == (1, 4, 6)


def test_unmatched_stems_skipped(tmp_path, caplog):
    (tmp_path / "img").mkdir()
    (tmp_path / "lab").mkdir()
    for stem in ("a", "b"):
        _save_rgb(np.zeros((2, 2, 3)), tmp_path / "img" / f"{stem}.png")
    _save_rgb(np.zeros((2, 2, 3)) + [128, 64, 128], tmp_path / "lab" / "a_L.png")
    _save_rgb(np.zeros((2, 2, 3)) + [128, 64, 128], tmp_path / "lab" / "c.png")
    with caplog.at_level(logging.WARNING):
        ds = load_dataset(tmp_path / "img", tmp_path / "lab", PAL, (2, 2))
    assert [s.name for s in ds.samples] == ["a"]
    assert ds.skipped == ["b", "c"]
    assert "unmatched" in caplog.text


def test_resize_on_load(tmp_path):
    _save_rgb(np.full((8, 8, 3), 200), tmp_path / "a.png")
    lab = np.zeros((8, 8, 3), np.uint8) + [128, 64, 128]
    lab[:, 4:] = [128, 128, 128]
    (tmp_path / "l").mkdir()
    _save_rgb(lab, tmp_path / "l" / "a.png")
    ds = load_dataset(tmp_path, tmp_path / "l", PAL, (4, 4))
    np.testing.assert_allclose(ds[0].image, 200 / 255, atol=1e-6)
    np.testing.assert_array_equal(ds[0].label[0], [[0, 0, 1, 1]] * 4)


def test_single_pixel_label_map(tmp_path):
    _save_rgb([[[64, 0, 128]]], tmp_path / "p.png")
    assert read_label(tmp_path / "p.png", PAL).tolist() == [[2]]


def test_resize_nearest_identity_and_downsample():
    lab = np.arange(16).reshape(4, 4)
    np.testing.assert_array_equal(resize_nearest(lab, (4, 4)), lab)
    np.testing.assert_array_equal(resize_nearest(lab, (2, 2)), [[5, 7], [13, 15]])


def test_palette_validation():
    with pytest.raises(DataError):
        Palette(["a", "b"], [[0, 0, 0], [0, 0, 0]])
    with pytest.raises(DataError):
        Palette(["a"], [[0, 0, 0], [1, 1, 1]])
    cam = camvid_palette()
    assert cam.num_classes == 32
    assert Palette.from_dict(cam.to_dict()).names == cam.names


def test_synth_is_deterministic():
    a = synth_dataset(7, 3, 32, 32, 4)
    b = synth_dataset(7, 3, 32, 32, 4)
    for sa, sb in zip(a.samples, b.samples):
        np.testing.assert_array_equal(sa.image, sb.image)
        np.testing.assert_array_equal(sa.label, sb.label)
    c = synth_dataset(8, 1, 32, 32, 4)
    assert not np.array_equal(a[0].image, c[0].image)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**31), k=st.integers(2, 5))
def test_synth_noise_free_images_are_piecewise_constant(seed, k):
    s = synth_dataset(seed, 1, 32, 48, k, noise=0.0)[0]
    img, lab = s.image[0], s.label[0]
    assert img.shape == (3, 32, 48) and img.min() >= 0 and img.max() <= 1
    for c in np.unique(lab):
        px = img[:, lab == c]
        assert np.all(px == px[:, :1])
    # the last class painted is never fully covered
    assert (lab == k - 1).any()


def test_synth_first_sample_independent_of_count():
    a = synth_dataset(3, 1, 16, 16, 3)
    b = synth_dataset(3, 5, 16, 16, 3)
    np.testing.assert_array_equal(a[0].image, b[0].image)


def test_synth_split_is_disjoint_tail():
    tr, va = synth_split(2, 4, 2, 16, 16, 3)
    full = synth_dataset(2, 6, 16, 16, 3)
    assert len(tr) == 4 and len(va) == 2
    np.testing.assert_array_equal(va.images(), full.images([4, 5]))


@pytest.mark.parametrize("h,w,k", [(30, 32, 3), (32, 0, 3), (32, 32, 1)])
def test_synth_argument_errors(h, w, k):
    with pytest.raises(ArgumentError):
        synth_dataset(0, 1, h, w, k)
