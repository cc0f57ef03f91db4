import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unlearnaug.datasets import (CIFAR10_TEST_FILES, CIFAR10_TRAIN_FILES, Dataset, load_cifar, make_synthetic,
                                 read_cifar_file, split_forget, to_cifar_bytes)
from unlearnaug.errors import FormatError, InputError


def two_record_fixture() -> bytes:
    # record 1: label 3, pixel i has value i % 256 (R plane, then G, then B)
    # record 2: label 9, R plane all 255, G plane all 0, B plane all 128
    rec1 = bytes([3]) + bytes(i % 256 for i in range(3072))
    rec2 = bytes([9]) + bytes([255]) * 1024 + bytes([0]) * 1024 + bytes([128]) * 1024
    return rec1 + rec2


class TestCifar:
    def test_two_record_fixture_exact(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(two_record_fixture())
        images, labels, coarse = read_cifar_file(path, "cifar10")
        assert labels.tolist() == [3, 9] and coarse is None
        assert images.shape == (2, 3, 32, 32) and images.dtype == np.uint8
        assert images[0, 0, 0, 0] == 0 and images[0, 0, 0, 5] == 5
        # pixel 1030 is in the G plane at row 0, column 6
        assert images[0, 1, 0, 6] == 1030 % 256
        assert images[0, 2, 31, 31] == 3071 % 256
        assert (images[1, 0] == 255).all() and (images[1, 1] == 0).all() and (images[1, 2] == 128).all()

    def test_fixture_scaled_by_255(self, tmp_path):
        for name in CIFAR10_TRAIN_FILES + CIFAR10_TEST_FILES:
            (tmp_path / name).write_bytes(two_record_fixture())
        _, test = load_cifar(tmp_path, "cifar10")
        assert test.labels.tolist() == [3, 9]
        assert test.images[0, 0, 0, 5] == np.float32(5 / 255)
        assert (test.images[1, 0] == 1).all() and (test.images[1, 2] == np.float32(128 / 255)).all()

    def test_malformed_length(self, tmp_path):
        path = tmp_path / "data_batch_1.bin"
        path.write_bytes(two_record_fixture()[:-1])
        with pytest.raises(FormatError, match="data_batch_1.bin"):
            read_cifar_file(path, "cifar10")

    def test_cifar100_uses_fine_label(self, tmp_path):
        path = tmp_path / "train.bin"
        path.write_bytes(bytes([4, 77]) + bytes(3072))
        _, labels, coarse = read_cifar_file(path, "cifar100")
        assert labels.tolist() == [77] and coarse.tolist() == [4]

    def test_load_directory_and_roundtrip(self, tmp_path):
        raw = two_record_fixture()
        for name in CIFAR10_TRAIN_FILES + CIFAR10_TEST_FILES:
            (tmp_path / name).write_bytes(raw)
        train, test = load_cifar(tmp_path, "cifar10")
        assert len(train) == 10 and len(test) == 2 and train.num_classes == 10
        assert to_cifar_bytes(test, "cifar10") == raw

    def test_missing_file_named(self, tmp_path):
        (tmp_path / "data_batch_1.bin").write_bytes(two_record_fixture())
        with pytest.raises(FormatError, match="data_batch_2.bin"):
            load_cifar(tmp_path, "cifar10")

    def test_subdirectory_layout(self, tmp_path):
        sub = tmp_path / "cifar-10-batches-bin"
        sub.mkdir()
        for name in CIFAR10_TRAIN_FILES + CIFAR10_TEST_FILES:
            (sub / name).write_bytes(two_record_fixture())
        train, _ = load_cifar(tmp_path, "cifar10")
        assert len(train) == 10


class TestSynthetic:
    def test_counts_balanced(self):
        data = make_synthetic(2, 10, (3, 4, 4), seed=0)
        assert len(data) == 20 and np.bincount(data.labels).tolist() == [10, 10]

    def test_deterministic(self):
        a = make_synthetic(3, 5, (3, 4, 4), seed=7)
        b = make_synthetic(3, 5, (3, 4, 4), seed=7)
        assert a.images.tobytes() == b.images.tobytes()

    def test_zero_noise_identical_within_class(self):
        data = make_synthetic(3, 4, (3, 8, 8), seed=1, noise=0.0)
        for c in range(3):
            imgs = data.images[data.labels == c]
            assert all(np.array_equal(imgs[0], im) for im in imgs)
        assert not np.array_equal(data.images[0], data.images[4])

    def test_range_and_split(self):
        train = make_synthetic(4, 10, (3, 8, 8), seed=2, noise=1.0)
        test = make_synthetic(4, 10, (3, 8, 8), seed=2, noise=1.0, split="test")
        assert train.images.min() >= 0 and train.images.max() <= 1
        assert test.split == "test" and not np.array_equal(train.images, test.images)

    def test_validation(self):
        with pytest.raises(InputError):
            make_synthetic(1, 5)
        with pytest.raises(InputError):
            make_synthetic(3, 0)

    def test_dataset_rejects_out_of_range(self):
        with pytest.raises(InputError):
            Dataset(np.full((1, 1, 2, 2), 1.5), [0], 2)
        with pytest.raises(InputError):
            Dataset(np.zeros((1, 1, 2, 2)), [2], 2)


class TestPartition:
    def test_random_size(self):
        data = make_synthetic(10, 20, (1, 2, 2))
        part = split_forget(data, "random", 0.1, 0)
        assert part.forget.size == 20 and part.remain.size == 180

    def test_classwise_exact(self):
        data = make_synthetic(10, 20, (1, 2, 2))
        part = split_forget(data, "classwise", 3, 0)
        assert part.forget.tolist() == np.flatnonzero(data.labels == 3).tolist()

    def test_zero_selection(self):
        with pytest.raises(InputError):
            split_forget(make_synthetic(2, 5, (1, 2, 2)), "random", 0.01, 0)

    def test_full_forget_leaves_empty_remain(self):
        part = split_forget(make_synthetic(2, 5, (1, 2, 2)), "random", 1.0, 0)
        assert part.remain.size == 0

    def test_bad_class_and_mode(self):
        data = make_synthetic(2, 5, (1, 2, 2))
        with pytest.raises(InputError):
            split_forget(data, "classwise", 2, 0)
        with pytest.raises(InputError):
            split_forget(data, "sideways", 0.5, 0)

    def test_independent_of_image_contents(self):
        a = make_synthetic(4, 10, (1, 2, 2), seed=0)
        b = Dataset(np.random.default_rng(0).random(a.images.shape), a.labels, 4)
        assert np.array_equal(split_forget(a, "random", 0.3, 5).forget, split_forget(b, "random", 0.3, 5).forget)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 6), st.integers(1, 30), st.floats(0.01, 1.0), st.integers(0, 2**31), st.booleans())
    def test_partition_invariant(self, k, per_class, rate, seed, classwise):
        data = Dataset(np.zeros((k * per_class, 1, 1, 1)), np.repeat(np.arange(k), per_class), k)
        n = len(data)
        try:
            part = (split_forget(data, "classwise", seed % k, seed) if classwise
                    else split_forget(data, "random", rate, seed))
        except InputError:
            assert not classwise and np.floor(rate * n + 0.5) == 0
            return
        part.check(n)
        assert np.intersect1d(part.forget, part.remain).size == 0
        if classwise:
            assert (data.labels[part.forget] == seed % k).all() and part.forget.size == per_class
        else:
            assert part.forget.size == int(np.floor(rate * n + 0.5))
        again = split_forget(data, part.mode, part.parameter, seed)
        assert np.array_equal(again.forget, part.forget)
