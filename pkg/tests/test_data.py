"""IDX/CIFAR parsers against handcrafted binaries, synthesis, and grouping."""

import gzip
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import codedinference as ci
from codedinference import ConfigurationError, DataFormatError, Dataset
from codedinference.data import (epoch_groups, load_cifar10, load_idx,
                                 sample_groups, synthesize, uniform_sampler)

from .conftest import make_toy_base


def write_idx_pair(directory, count=6, rows=5, cols=5, *, seed=0,
                   image_magic=0x803, label_magic=0x801, gz=False,
                   label_count=None, truncate_images=False):
    rng = np.random.default_rng(seed)
    pixels = rng.integers(0, 256, size=(count, rows, cols), dtype=np.uint8)
    labels = rng.integers(0, 10, size=count, dtype=np.uint8)

    image_bytes = struct.pack(">IIII", image_magic, count, rows, cols) + pixels.tobytes()
    if truncate_images:
        image_bytes = image_bytes[:-3]
    label_count = count if label_count is None else label_count
    label_bytes = struct.pack(">II", label_magic, label_count) + labels.tobytes()[:label_count]

    suffix = ".gz" if gz else ""
    images_path = directory / f"images-idx3-ubyte{suffix}"
    labels_path = directory / f"labels-idx1-ubyte{suffix}"
    opener = gzip.open if gz else open
    with opener(images_path, "wb") as fh:
        fh.write(image_bytes)
    with opener(labels_path, "wb") as fh:
        fh.write(label_bytes)
    return images_path, labels_path, pixels, labels


class TestLoadIdx:
    @pytest.mark.parametrize("gz", [False, True])
    def test_roundtrip(self, tmp_path, gz):
        images_path, labels_path, pixels, labels = write_idx_pair(tmp_path, gz=gz)
        ds = load_idx(images_path, labels_path, split="train", name="craft")
        assert ds.images.shape == (6, 1, 5, 5)
        assert ds.labels.tolist() == labels.tolist()
        np.testing.assert_allclose(ds.images[:, 0] * 255.0, pixels, atol=1e-5)

    def test_pixel_255_scales_to_one(self, tmp_path):
        images_path, labels_path, pixels, _ = write_idx_pair(tmp_path, seed=1)
        ds = load_idx(images_path, labels_path)
        where = np.argwhere(pixels == 255)
        assert len(where)  # seed chosen so a 255 byte exists
        i, r, c = where[0]
        assert ds.images[i, 0, r, c] == 1.0

    def test_label_magic_in_image_slot_rejected(self, tmp_path):
        images_path, labels_path, _, _ = write_idx_pair(tmp_path, image_magic=0x801)
        with pytest.raises(DataFormatError, match="0x00000801"):
            load_idx(images_path, labels_path)

    def test_bad_label_magic(self, tmp_path):
        images_path, labels_path, _, _ = write_idx_pair(tmp_path, label_magic=0x803)
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(images_path, labels_path)

    def test_truncated_names_offset(self, tmp_path):
        images_path, labels_path, _, _ = write_idx_pair(tmp_path, truncate_images=True)
        with pytest.raises(DataFormatError, match="offset"):
            load_idx(images_path, labels_path)

    def test_count_mismatch(self, tmp_path):
        images_path, labels_path, _, _ = write_idx_pair(tmp_path, label_count=4)
        with pytest.raises(DataFormatError, match="mismatch"):
            load_idx(images_path, labels_path)

    def test_images_only(self, tmp_path):
        images_path, _, _, _ = write_idx_pair(tmp_path)
        ds = load_idx(images_path)
        assert ds.labels is None


def write_cifar_dir(directory, per_batch=4, *, corrupt=False):
    rng = np.random.default_rng(3)
    labels_all = []
    for stem in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
        records = bytearray()
        for _ in range(per_batch):
            label = int(rng.integers(0, 10))
            labels_all.append(label)
            # distinct constant planes make the channel order observable
            red = np.full(1024, 10, np.uint8)
            green = np.full(1024, 20, np.uint8)
            blue = np.full(1024, 30, np.uint8)
            records.append(label)
            records += red.tobytes() + green.tobytes() + blue.tobytes()
        if corrupt and stem == "data_batch_2":
            records = records[:-1]
        (directory / f"{stem}.bin").write_bytes(bytes(records))
    return labels_all


class TestLoadCifar10:
    def test_counts_and_labels(self, tmp_path):
        labels = write_cifar_dir(tmp_path, per_batch=4)
        train = load_cifar10(tmp_path, "train", normalize=False)
        test = load_cifar10(tmp_path, "test", normalize=False)
        assert len(train) == 5 * 4
        assert len(test) == 4
        assert train.labels.tolist() == labels[:20]
        assert test.labels.tolist() == labels[20:]

    def test_plane_order_red_first(self, tmp_path):
        write_cifar_dir(tmp_path)
        ds = load_cifar10(tmp_path, "train", normalize=False)
        np.testing.assert_allclose(ds.images[0, 0], 10 / 255.0, atol=1e-6)
        np.testing.assert_allclose(ds.images[0, 1], 20 / 255.0, atol=1e-6)
        np.testing.assert_allclose(ds.images[0, 2], 30 / 255.0, atol=1e-6)

    def test_record_length_violation(self, tmp_path):
        write_cifar_dir(tmp_path, corrupt=True)
        with pytest.raises(DataFormatError, match="3073"):
            load_cifar10(tmp_path, "train", normalize=False)

    def test_normalization_recorded_in_digest(self, tmp_path):
        write_cifar_dir(tmp_path)
        raw = load_cifar10(tmp_path, "train", normalize=False)
        norm = load_cifar10(tmp_path, "train", normalize=True)
        assert raw.preprocessing == "raw01"
        assert norm.preprocessing.startswith("cifar10-channelnorm")
        assert raw.digest != norm.digest

    def test_missing_batch(self, tmp_path):
        with pytest.raises(ConfigurationError, match="data_batch_1"):
            load_cifar10(tmp_path, "train")


class TestSynthesize:
    def test_count_and_cache_coherence(self, toy_base):
        ds = synthesize(toy_base, uniform_sampler(), 50, seed=9)
        assert len(ds) == 50
        recomputed = toy_base.predict_scores(ds.images)
        assert np.array_equal(ds.targets, recomputed)

    def test_sampler_bounds(self, toy_base):
        ds = synthesize(toy_base, uniform_sampler(0.0, 1.0), 40, seed=0)
        assert ds.images.min() >= 0.0
        assert ds.images.max() <= 1.0

    def test_seeded_reproducibility(self, toy_base):
        a = synthesize(toy_base, uniform_sampler(), 30, seed=4)
        b = synthesize(toy_base, uniform_sampler(), 30, seed=4)
        assert a.digest == b.digest


class TestGrouping:
    def test_partition_10_by_2(self):
        groups = epoch_groups(10, 2, np.random.default_rng(0))
        assert groups.shape == (5, 2)
        assert sorted(groups.ravel().tolist()) == list(range(10))

    def test_remainder_unused(self):
        groups = epoch_groups(11, 5, np.random.default_rng(0))
        assert groups.shape == (2, 5)
        assert len(set(groups.ravel().tolist())) == 10

    def test_too_few_items(self):
        with pytest.raises(ConfigurationError):
            epoch_groups(3, 5, np.random.default_rng(0))

    def test_stream_deterministic(self):
        a = [g.tolist() for _, g in zip(range(12), sample_groups(10, 2, seed=7))]
        b = [g.tolist() for _, g in zip(range(12), sample_groups(10, 2, seed=7))]
        assert a == b
        c = [g.tolist() for _, g in zip(range(12), sample_groups(10, 2, seed=8))]
        assert a != c

    def test_stream_epoch_boundaries(self):
        stream = sample_groups(10, 2, seed=1)
        first_epoch = [next(stream) for _ in range(5)]
        second_epoch = [next(stream) for _ in range(5)]
        assert sorted(np.concatenate(first_epoch).tolist()) == list(range(10))
        assert sorted(np.concatenate(second_epoch).tolist()) == list(range(10))

    @given(n=st.integers(2, 40), k=st.integers(1, 6), seed=st.integers(0, 99))
    def test_epoch_coverage_property(self, n, k, seed):
        if n < k:
            return
        groups = epoch_groups(n, k, np.random.default_rng(seed))
        flat = groups.ravel().tolist()
        assert len(flat) == (n // k) * k
        assert len(set(flat)) == len(flat)


class TestDatasetValue:
    def test_save_load_preserves_digest(self, tmp_path, toy_base):
        ds = synthesize(toy_base, uniform_sampler(), 25, seed=2)
        path = ds.save(tmp_path / "ds.npz")
        loaded = Dataset.load(path)
        assert loaded.digest == ds.digest
        assert loaded.preprocessing == ds.preprocessing

    def test_labeled_roundtrip(self, tmp_path):
        images = np.random.default_rng(0).random((12, 1, 4, 4)).astype(np.float32)
        labels = np.arange(12) % 3
        ds = Dataset(images=images, labels=labels, split="train", name="x")
        loaded = Dataset.load(ds.save(tmp_path / "ds.npz"))
        assert loaded.digest == ds.digest
        assert loaded.labels.tolist() == ds.labels.tolist()
        assert loaded.split == "train"

    def test_digest_covers_preprocessing(self):
        images = np.zeros((4, 1, 4, 4), np.float32)
        a = Dataset(images=images, preprocessing="raw01")
        b = Dataset(images=images, preprocessing="other")
        assert a.digest != b.digest

    def test_geometry_validation(self):
        with pytest.raises(ConfigurationError):
            Dataset(images=np.zeros((4, 4), np.float32))
        with pytest.raises(ConfigurationError):
            Dataset(images=np.zeros((4, 1, 4, 4), np.float32),
                    labels=np.zeros(3, np.int64))

    def test_subset_alignment(self, toy_base):
        ds = synthesize(toy_base, uniform_sampler(), 20, seed=1)
        sub = ds.subset([3, 5, 7])
        assert np.array_equal(sub.images[1], ds.images[5])
        assert np.array_equal(sub.targets[2], ds.targets[7])
