import json

import numpy as np
import pytest

from neurovasc.cli import validate_json
from neurovasc.phantom import PhantomSpec, VolumeSample, compute_class_fractions
from neurovasc.volume_io import (VolumeFormatError, load_manifest, load_volume, save_volume,
                                 write_phantom_dataset)


@pytest.mark.parametrize("name", ["vol", "vol.nii.gz"])
def test_round_trip_exact(tmp_path, small_phantom, name):
    path = save_volume(small_phantom, tmp_path / name)
    back = load_volume(path)
    assert np.array_equal(back.image, small_phantom.image)
    assert np.array_equal(back.labels, small_phantom.labels)
    assert back.meta["spec_hash"] == small_phantom.meta["spec_hash"]


def test_container_sidecar_validates(tmp_path, small_phantom):
    save_volume(small_phantom, tmp_path / "v")
    side = json.loads((tmp_path / "v" / "meta.json").read_text())
    validate_json(side, "volume_sidecar")
    assert side["shape"] == list(small_phantom.image.shape)


def test_missing_label_file(tmp_path, small_phantom):
    save_volume(small_phantom, tmp_path / "v")
    (tmp_path / "v" / "labels.npy").unlink()
    with pytest.raises(VolumeFormatError, match="labels.npy"):
        load_volume(tmp_path / "v")
    save_volume(small_phantom, tmp_path / "n.nii.gz")
    (tmp_path / "n_labels.nii.gz").unlink()
    with pytest.raises(VolumeFormatError, match="label"):
        load_volume(tmp_path / "n.nii.gz")


def test_shape_mismatch_detected(tmp_path, small_phantom):
    save_volume(small_phantom, tmp_path / "v")
    np.save(tmp_path / "v" / "labels.npy", np.zeros((3, 3, 3), np.uint8))
    with pytest.raises(VolumeFormatError, match="shape"):
        load_volume(tmp_path / "v")


def test_wrong_dtype_detected(tmp_path, small_phantom):
    save_volume(small_phantom, tmp_path / "v")
    np.save(tmp_path / "v" / "image.npy", small_phantom.image.astype(np.float64))
    with pytest.raises(VolumeFormatError, match="float32"):
        load_volume(tmp_path / "v")


def test_labels_out_of_range_rejected(tmp_path):
    s = VolumeSample(np.zeros((2, 2, 2), np.float32), np.full((2, 2, 2), 300))
    with pytest.raises(VolumeFormatError):
        save_volume(s, tmp_path / "v")


def test_dataset_writer_is_reproducible(tmp_path):
    spec = PhantomSpec(grid_shape=(16, 16, 16), n_vessels=2)
    m1 = write_phantom_dataset(spec, 10, tmp_path / "a", seed=7)
    m2 = write_phantom_dataset(spec, 10, tmp_path / "b", seed=7)
    assert m1 == m2
    assert (tmp_path / "a" / "manifest.json").read_text() == (tmp_path / "b" / "manifest.json").read_text()
    for p, _ in m1.entries:
        assert np.array_equal(np.load(tmp_path / "a" / p / "image.npy"), np.load(tmp_path / "b" / p / "image.npy"))
    loaded = load_manifest(tmp_path / "a" / "manifest.json")
    assert loaded == m1
    validate_json(m1.to_dict(), "manifest")
    assert [len(m1.paths(t)) for t in ("train", "val", "test")] == [7, 1, 2]
    assert load_volume(tmp_path / "a" / m1.paths("train")[2]).meta["seed"] == 9
    assert np.allclose(compute_class_fractions(m1, tmp_path / "a"), m1.class_fractions)


def test_dataset_writer_errors(tmp_path):
    with pytest.raises(ValueError):
        write_phantom_dataset(PhantomSpec(), 0, tmp_path)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        write_phantom_dataset(PhantomSpec(), 1, blocker / "sub")
