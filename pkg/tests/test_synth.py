import math

import numpy as np
import pytest

from ageus.core import load_study_dir
from ageus.femur import femur_length
from ageus.geometry import abdomen_biometrics, head_biometrics
from ageus.synth import PhantomSpec, gen_dataset, gen_study, speckle


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(abdomen_contrast=0.9)
    with pytest.raises(ValueError):
        PhantomSpec(image_size=32)
    with pytest.raises(ValueError):
        PhantomSpec(head_hc_cm=(30.0, 20.0))


def test_deterministic_per_index():
    a = gen_study(PhantomSpec(seed=7), 3)
    b = gen_study(PhantomSpec(seed=7), 3)
    c = gen_study(PhantomSpec(seed=8), 3)
    assert np.array_equal(a["head"][0].pixels, b["head"][0].pixels)
    assert not np.array_equal(a["head"][0].pixels, c["head"][0].pixels)


@pytest.mark.parametrize("i", range(5))
def test_measurements_land_in_target_ranges(i):
    spec = PhantomSpec(seed=11)
    st = gen_study(spec, i)
    img, mask, ell = st["head"]
    hc, bpd, _ = head_biometrics(mask, img.spacing_mm)
    assert spec.head_hc_cm[0] * 0.995 <= hc <= spec.head_hc_cm[1] * 1.005
    assert bpd == pytest.approx(2 * ell.b * img.spacing_mm[0] / 10, rel=0.01)
    img, mask, _ = st["abdomen"]
    ac, _ = abdomen_biometrics(mask, img.spacing_mm)
    assert spec.abdomen_ac_cm[0] * 0.995 <= ac <= spec.abdomen_ac_cm[1] * 1.005
    img, ann = st["femur"]
    fl = femur_length(ann, img.spacing_mm)
    assert spec.femur_fl_cm[0] - 1e-9 <= fl <= spec.femur_fl_cm[1] + 1e-9
    ann.check_bounds(img.shape)


def test_mask_area_matches_ellipse():
    img, mask, e = gen_study(PhantomSpec(seed=2), 0)["head"]
    assert mask.pixels.sum() == pytest.approx(math.pi * e.a * e.b, rel=0.01)


def test_head_boundary_brighter_than_abdomen():
    st = gen_study(PhantomSpec(seed=5), 0)

    def ring_mean(img, mask):
        from scipy import ndimage
        ring = ndimage.binary_dilation(mask.pixels, iterations=2) & ~ndimage.binary_erosion(
            mask.pixels, iterations=2)
        return img.pixels[ring].mean()

    assert ring_mean(*st["head"][:2]) > ring_mean(*st["abdomen"][:2])


def test_speckle_properties():
    rng = np.random.default_rng(0)
    flat = np.full((128, 128), 0.4)
    out = speckle(flat, rng)
    assert 0 <= out.min() and out.max() <= 1
    assert out.mean() == pytest.approx(0.4, rel=0.05)
    assert out.std() > 0.02
    assert np.array_equal(speckle(flat, rng, 0.0), flat)
    weak = speckle(flat, np.random.default_rng(0), 0.3)
    assert weak.std() < out.std()


def test_dataset_on_disk(tmp_path):
    manifest = gen_dataset(PhantomSpec(seed=0, image_size=128, head_a_px=(40, 50),
                                       abdomen_a_px=(40, 55), femur_length_px=(50, 80)),
                           3, tmp_path)
    assert manifest.exists()
    recs = load_study_dir(tmp_path)
    assert [r.study_id for r in recs] == ["S0000", "S0001", "S0002"]
    assert all(r.head_image.shape == (128, 128) for r in recs)
    with pytest.raises(ValueError):
        gen_dataset(PhantomSpec(), 0, tmp_path / "x")
