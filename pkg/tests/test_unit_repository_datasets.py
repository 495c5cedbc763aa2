import gzip
import struct

import numpy as np
import pytest

from src.repository.datasets import load_idx, read_idx_labels, synth_blobs, write_idx
from src.services.errors import IdxFormatError, LabelError


def test_blobs_shape_and_order():
    ds = synth_blobs(num_classes=3, per_class=4, dim=2, spread=0.1, seed=0)
    assert ds.samples.shape == (12, 2)
    assert ds.targets.tolist() == [0] * 4 + [1] * 4 + [2] * 4
    assert ds.labels.sum() == 12


def test_blobs_streams_share_geometry():
    train = synth_blobs(3, 400, 4, 0.2, seed=5, sample_stream=0)
    test = synth_blobs(3, 400, 4, 0.2, seed=5, sample_stream=1)
    assert not np.allclose(train.samples, test.samples)
    for c in range(3):
        np.testing.assert_allclose(
            train.samples[train.targets == c].mean(axis=0), test.samples[test.targets == c].mean(axis=0), atol=0.08
        )


def test_blobs_neighbour_colocates_classes():
    ds = synth_blobs(4, 500, 3, 0.1, seed=1, neighbours=[(2, 0, 0.0)])
    np.testing.assert_allclose(ds.samples[ds.targets == 2].mean(axis=0), ds.samples[ds.targets == 0].mean(axis=0), atol=0.03)


def test_blobs_reject_bad_neighbour():
    with pytest.raises(LabelError):
        synth_blobs(3, 2, 2, 0.1, seed=0, neighbours=[(5, 0, 0.5)])


@pytest.mark.parametrize("suffix", ["", ".gz"])
def test_idx_files_load(tmp_path, suffix):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4) * 10
    labels = np.array([7, 1], dtype=np.uint8)
    images_path, labels_path = tmp_path / f"images{suffix}", tmp_path / f"labels{suffix}"
    write_idx(images, labels, images_path, labels_path)

    ds = load_idx(images_path, labels_path)

    assert ds.samples.shape == (2, 1, 3, 4)
    assert ds.input_shape == (1, 3, 4)
    np.testing.assert_allclose(ds.samples[:, 0], images / 255.0)
    assert ds.targets.tolist() == [7, 1]
    if suffix:
        assert images_path.read_bytes()[:2] == b"\x1f\x8b"


def test_idx_bad_magic(tmp_path):
    path = tmp_path / "labels"
    path.write_bytes(struct.pack(">II", 0x0803, 1) + b"\x00")
    with pytest.raises(IdxFormatError) as info:
        read_idx_labels(path)
    assert info.value.category == "magic"


def test_idx_truncated(tmp_path):
    path = tmp_path / "labels.gz"
    path.write_bytes(gzip.compress(struct.pack(">II", 0x0801, 5) + b"\x01\x02"))
    with pytest.raises(IdxFormatError) as info:
        read_idx_labels(path)
    assert info.value.category == "truncated"


def test_idx_count_mismatch(tmp_path):
    write_idx(np.zeros((3, 2, 2)), np.zeros(3), tmp_path / "a", tmp_path / "b")
    write_idx(np.zeros((2, 2, 2)), np.zeros(2), tmp_path / "c", tmp_path / "d")
    with pytest.raises(IdxFormatError) as info:
        load_idx(tmp_path / "a", tmp_path / "d")
    assert info.value.category == "count"


def test_idx_label_out_of_range(tmp_path):
    write_idx(np.zeros((1, 2, 2)), np.array([9]), tmp_path / "a", tmp_path / "b")
    with pytest.raises(LabelError):
        load_idx(tmp_path / "a", tmp_path / "b", num_classes=5)
