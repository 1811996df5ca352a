import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neurovasc.phantom import (DEFAULT_SPLIT, DatasetManifest, PhantomSpec, VolumeSample, augment_background_noise,
                               augment_flip, class_fractions_from_labels, generate_phantom, normalize_intensity,
                               normalize_sample, resize_crop_pad, split_counts, to_model_range)


def test_phantom_shapes_types_and_label_codes(small_phantom, small_spec):
    s = small_phantom
    assert s.image.shape == s.labels.shape == small_spec.grid_shape
    assert s.image.dtype == np.float32 and s.labels.dtype == np.uint8
    assert set(np.unique(s.labels)) <= {0, 1, 2}
    assert (s.labels == 1).any() and (s.labels == 2).any()
    assert s.meta["spec_hash"] == small_spec.spec_hash()
    assert s.meta["seed"] == 0


def test_phantom_is_deterministic_in_seed():
    a = generate_phantom(PhantomSpec(grid_shape=(32, 32, 16), seed=5))
    b = generate_phantom(PhantomSpec(grid_shape=(32, 32, 16), seed=5))
    c = generate_phantom(PhantomSpec(grid_shape=(32, 32, 16), seed=6))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.labels, c.labels)


def test_default_phantom_class_balance():
    # vessels stay a small minority of voxels, lesions smaller still on average
    fr = class_fractions_from_labels([generate_phantom(PhantomSpec(seed=s)).labels for s in range(6)])
    assert fr[0] > 0.9
    assert 0.005 < fr[1] < 0.08
    assert 0 < fr[2] < fr[1] * 2


def test_vessels_are_brighter_than_parenchyma(small_phantom):
    img, lab = small_phantom.image, small_phantom.labels
    assert img[lab == 1].mean() > img[lab == 2].mean() > img[lab == 0].mean()


def test_lesions_only():
    s = generate_phantom(PhantomSpec(grid_shape=(32, 32, 16), n_vessels=0, n_lesions=2, seed=1))
    assert not (s.labels == 1).any() and (s.labels == 2).any()


def test_degenerate_phantom_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        generate_phantom(PhantomSpec(n_vessels=0, n_lesions=0))


@pytest.mark.parametrize("kw", [
    {"grid_shape": (8, 32, 32)}, {"radius_range": (0.5, 2)}, {"radius_range": (3, 2)}, {"n_vessels": -1},
    {"tortuosity": -0.1}, {"vessel_intensity_range": (200, 100)}, {"lesion_radius_range": (0, 3)},
])
def test_invalid_spec_rejected(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw)


def test_spec_round_trip_and_hash_ignores_seed():
    spec = PhantomSpec(n_vessels=4, seed=3)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec
    assert PhantomSpec(n_vessels=4, seed=9).spec_hash() == spec.spec_hash()
    assert PhantomSpec(n_vessels=5, seed=3).spec_hash() != spec.spec_hash()
    with pytest.raises(ValueError, match="unknown"):
        PhantomSpec.from_dict({"voxels": 3})


def test_volume_sample_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        VolumeSample(np.zeros((4, 4, 4)), np.zeros((4, 4, 3)))
    with pytest.raises(ValueError):
        VolumeSample(np.zeros((4, 4)), np.zeros((4, 4)))


# ---------------------------------------------------------------- preprocessing

@settings(max_examples=40, deadline=None)
@given(lo=st.floats(-1e4, 1e4), span=st.floats(1e-3, 1e4), seed=st.integers(0, 1000))
def test_normalize_range_and_extremes(lo, span, seed):
    rng = np.random.default_rng(seed)
    img = lo + span * rng.random((5, 4, 3))
    out = normalize_intensity(img)
    assert out.dtype == np.float32
    assert out.min() == 0.0 and out.max() == 255.0
    assert np.all(out[img == img.min()] == 0) and np.all(out[img == img.max()] == 255)


def test_normalize_is_monotone_and_affine():
    img = np.array([1.0, 3.0, 2.0, 5.0]).reshape(1, 2, 2)
    assert np.allclose(normalize_intensity(img).ravel(), [0, 127.5, 63.75, 255])


def test_normalize_constant_and_nonfinite():
    assert np.all(normalize_intensity(np.full((2, 2, 2), 4.0)) == 0)
    bad = np.zeros((2, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        normalize_intensity(bad)


def test_normalize_sample_records_step(small_phantom):
    out = normalize_sample(small_phantom)
    assert out.meta["preprocessing"][-1].startswith("normalize")
    assert small_phantom.meta["preprocessing"] == []
    assert np.allclose(to_model_range(out.image).max(), 1.0)


def test_crop_pad_centres_and_preserves_labels():
    img = np.arange(6 * 4 * 2, dtype=np.float32).reshape(6, 4, 2)
    lab = (img % 3).astype(np.uint8)
    out = resize_crop_pad(VolumeSample(img, lab), (4, 6, 2))
    assert out.image.shape == (4, 6, 2)
    assert np.array_equal(out.image[:, 1:5], img[1:5])
    assert np.all(out.image[:, 0] == 0) and np.all(out.labels[:, 5] == 0)
    assert np.array_equal(out.labels[:, 1:5], lab[1:5])


def test_crop_pad_identity_at_target(small_phantom):
    out = resize_crop_pad(small_phantom, small_phantom.image.shape)
    assert np.array_equal(out.image, small_phantom.image)


def test_flip_is_joint_and_involutive(small_phantom):
    f = augment_flip(small_phantom, force=True)
    assert np.array_equal(f.image, small_phantom.image[:, ::-1])
    assert np.array_equal(f.labels, small_phantom.labels[:, ::-1])
    back = augment_flip(f, force=True)
    assert np.array_equal(back.image, small_phantom.image)
    assert augment_flip(small_phantom, p=0.0, rng=np.random.default_rng(0)) is small_phantom


def test_flip_rate_close_to_p(small_phantom):
    rng = np.random.default_rng(0)
    flips = sum(augment_flip(small_phantom, 0.3, rng) is not small_phantom for _ in range(2000))
    assert abs(flips / 2000 - 0.3) < 0.04


def test_noise_touches_background_only(small_phantom):
    s = small_phantom.copy(image=to_model_range(normalize_intensity(small_phantom.image)))
    n = augment_background_noise(s, 0.01, np.random.default_rng(0))
    fg = s.labels > 0
    assert np.array_equal(n.image[fg], s.image[fg])
    delta = (n.image - s.image)[~fg]
    assert abs(delta.std() - 0.01) < 1e-3


# ---------------------------------------------------------------- splits and manifests

def test_default_split_for_137_subjects():
    assert split_counts(137) == (100, 10, 27)


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 500), a=st.integers(0, 50), b=st.integers(0, 50), c=st.integers(1, 50))
def test_split_counts_sum_and_fairness(n, a, b, c):
    counts = split_counts(n, (a, b, c))
    assert sum(counts) == n
    exact = np.array([a, b, c]) * n / (a + b + c)
    assert np.all(np.abs(np.array(counts) - exact) < 1)


def test_split_counts_validation():
    with pytest.raises(ValueError):
        split_counts(0)
    with pytest.raises(ValueError):
        split_counts(5, (1, -1, 1))


def test_manifest_rejects_duplicates_and_bad_tags():
    with pytest.raises(ValueError):
        DatasetManifest([("a", "train"), ("a", "test")])
    with pytest.raises(ValueError):
        DatasetManifest([("a", "holdout")])
    m = DatasetManifest([("a", "train"), ("b", "val")], [0.9, 0.06, 0.04])
    assert DatasetManifest.from_dict(m.to_dict()) == m
    assert m.paths("val") == ["b"]


def test_class_fractions_from_labels():
    lab = np.array([0, 0, 0, 1, 2, 2, 0, 0]).reshape(2, 2, 2)
    assert np.allclose(class_fractions_from_labels([lab]), [5 / 8, 1 / 8, 2 / 8])
