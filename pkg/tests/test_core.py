import shutil

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ageus.core import (
    DatasetError,
    FemurAnnotation,
    SegmentationMask,
    UltrasoundImage,
    binarize_mask,
    is_isotropic,
    list_study_ids,
    load_study,
    load_study_dir,
    normalize_intensity,
    read_manifest,
    read_png,
    resize_to_model,
    to_model_coords,
    to_original_coords,
    write_png,
)


def test_load_synthetic_dataset(small_dataset):
    recs = load_study_dir(small_dataset)
    assert [r.study_id for r in recs] == [f"S{i:04d}" for i in range(6)]
    r = recs[0]
    assert r.planes == ["head", "abdomen", "femur"]
    assert r.head_mask.pixels.dtype == bool and r.head_mask.pixels.any()
    assert r.femur_annotation is not None
    assert r.head_image.spacing_mm[0] > 0


def test_missing_mask_leaves_empty_slot(small_dataset, tmp_path):
    root = tmp_path / "d"
    shutil.copytree(small_dataset, root)
    (root / "S0001" / "abdomen_mask.png").unlink()
    rec = load_study(root, "S0001")
    assert rec.abdomen_image is not None and rec.abdomen_mask is None


def test_bad_spacing_names_study_and_field(small_dataset, tmp_path):
    root = tmp_path / "d"
    shutil.copytree(small_dataset, root)
    text = (root / "manifest.csv").read_text().splitlines()
    parts = text[1].split(",")
    parts[2] = "0"
    text[1] = ",".join(parts)
    (root / "manifest.csv").write_text("\n".join(text) + "\n")
    with pytest.raises(DatasetError, match=r"S0000.*row_mm_per_px"):
        read_manifest(root / "manifest.csv")


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError):
        read_manifest(tmp_path / "manifest.csv")


def test_list_study_ids_sorted(tmp_path):
    for s in ("b2", "a1", "c3"):
        (tmp_path / s).mkdir()
    (tmp_path / "manifest.csv").write_text("x")
    assert list_study_ids(tmp_path) == ["a1", "b2", "c3"]


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(0).random((20, 30))
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png") / 255
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-12


def test_binarize_mask():
    assert (binarize_mask(np.array([[0, 255], [127, 128.0]])) == [[0, 1], [0, 1]]).all()
    assert not binarize_mask(np.zeros((3, 3))).any()


def test_validation_errors():
    with pytest.raises(ValueError):
        UltrasoundImage(np.zeros((16, 16)), (0.0, 0.1), "head")
    with pytest.raises(ValueError):
        UltrasoundImage(np.zeros((16, 16)), (0.1, 0.1), "knee")
    with pytest.raises(ValueError):
        UltrasoundImage(np.zeros(16), (0.1, 0.1), "head")
    with pytest.raises(ValueError):
        SegmentationMask(np.full((4, 4), 2), "head")
    with pytest.raises(ValueError):
        FemurAnnotation((1.0, 1.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        FemurAnnotation((1.0, 1.0), (30.0, 1.0)).check_bounds((20, 20))


def test_normalize_intensity():
    img = UltrasoundImage(np.arange(64.0).reshape(8, 8) * 3 + 7, (0.1, 0.1), "head")
    n = normalize_intensity(img)
    assert n.pixels.min() == 0 and n.pixels.max() == 1
    flat = normalize_intensity(UltrasoundImage(np.full((8, 8), 9.0), (0.1, 0.1), "head"))
    assert (flat.pixels == 0).all()
    bad = np.zeros((8, 8))
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        normalize_intensity(UltrasoundImage(bad, (0.1, 0.1), "head"))


def test_resize_to_model_shapes_and_mask():
    px = np.random.default_rng(0).random((300, 200))
    m = np.zeros((300, 200), bool)
    m[100:200, 50:150] = True
    img, mask, scale = resize_to_model(UltrasoundImage(px, (0.2, 0.3), "head"),
                                       SegmentationMask(m, "head"), 64)
    assert img.shape == (64, 64) and mask.pixels.shape == (64, 64)
    assert mask.pixels.dtype == bool
    assert scale == (300 / 64, 200 / 64)
    assert img.spacing_mm == (0.2, 0.3)
    assert abs(mask.pixels.mean() - m.mean()) < 0.02


@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(-5, 300), st.floats(-5, 300))
def test_coordinate_round_trip(sr, sc, r, c):
    back = to_model_coords(to_original_coords([[r, c]], (sr, sc)), (sr, sc))
    assert np.allclose(back, [[r, c]], rtol=1e-9, atol=1e-9)


def test_coordinate_convention():
    # a 4x downsample: model pixel 0 covers original pixels 0..3, centre 1.5
    assert np.allclose(to_original_coords([[0, 0]], (4, 4)), [[1.5, 1.5]])


def test_is_isotropic():
    assert is_isotropic((0.1, 0.1))
    assert not is_isotropic((0.1, 0.2))
