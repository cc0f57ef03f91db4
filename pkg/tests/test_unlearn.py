import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from unlearnaug.augment import AugmentPolicy
from unlearnaug.datasets import Dataset, ForgetPartition, make_synthetic, split_forget
from unlearnaug.errors import InputError, TrainingError
from unlearnaug.evaluation import core_accuracies
from unlearnaug.models import ArchSpec, Model, accuracy, build_model
from unlearnaug.unlearn import (SaliencyMask, TrainConfig, compute_saliency_mask, draw_random_labels, fine_tune,
                                forget_gradients, measure_rte, random_label, retrain, salun, top_fraction_mask, train)

from .oracles import top_k_bruteforce

SMALL = ArchSpec("tiny-resnet", (3, 4, 4), 3)


@pytest.fixture(scope="module")
def small():
    data = make_synthetic(3, 12, (3, 4, 4), seed=1, noise=0.2)
    part = split_forget(data, "random", 0.25, 3)
    cfg = TrainConfig(epochs=2, lr=0.02, batch_size=8, seed=4)
    return data, part, cfg, train(SMALL, data, cfg)


def same_weights(a: Model, b: Model) -> bool:
    return all(a.params[n].data.tobytes() == b.params[n].data.tobytes() for n in a.params)


class TestTrain:
    def test_zero_epochs_is_fresh_init(self, small):
        data, _, _, _ = small
        assert same_weights(train(SMALL, data, TrainConfig(epochs=0, seed=9)), build_model(SMALL, 9))

    def test_deterministic(self, small):
        data, _, cfg, model = small
        assert same_weights(train(SMALL, data, cfg), model)

    def test_deterministic_with_augmentation(self, small):
        data, _, cfg, _ = small
        aug = TrainConfig(epochs=1, lr=0.02, batch_size=8, seed=4, policy=AugmentPolicy("Default+AugMix"))
        assert same_weights(train(SMALL, data, aug), train(SMALL, data, aug))

    def test_loss_history_recorded(self, small):
        data, _, cfg, model = small
        assert len(model.loss_history) == cfg.epochs * int(np.ceil(len(data) / cfg.batch_size))

    def test_fits_separable_blobs(self):
        data = make_synthetic(2, 40, (3, 8, 8), seed=3, noise=0.1)
        model = train(ArchSpec("tiny-resnet", (3, 8, 8), 2), data, TrainConfig(epochs=20, lr=0.01, batch_size=16))
        assert accuracy(model, data) >= 95.0

    def test_divergence_raises_training_error(self):
        data = make_synthetic(2, 8, (1, 2, 2), seed=0)
        with pytest.raises(TrainingError) as err:
            train(ArchSpec("mlp", (1, 2, 2), 2), data, TrainConfig(epochs=50, lr=1e30, momentum=0, batch_size=4))
        assert err.value.epoch >= 0 and err.value.batch >= 0

    def test_config_validation(self):
        with pytest.raises(InputError):
            TrainConfig(epochs=-1)
        with pytest.raises(InputError):
            TrainConfig(batch_size=0)
        with pytest.raises(InputError):
            TrainConfig(momentum=1.0)


class TestRetrain:
    def test_empty_forget_equals_train(self, small):
        data, _, cfg, model = small
        part = ForgetPartition(np.array([], dtype=np.int64), np.arange(len(data)), "random", 0.0, 0)
        assert same_weights(retrain(SMALL, part, data, cfg), model)

    def test_independent_of_forget_images(self, small):
        data, part, cfg, _ = small
        noisy = data.images.copy()
        noisy[part.forget] = np.random.default_rng(0).random(noisy[part.forget].shape)
        mutated = Dataset(noisy, data.labels, data.num_classes)
        assert same_weights(retrain(SMALL, part, data, cfg), retrain(SMALL, part, mutated, cfg))

    def test_never_reads_forget(self, small):
        data, part, cfg, _ = small
        log = []
        retrain(SMALL, part, data, cfg, access_log=log)
        assert not set(i for _, i in log) & set(part.forget.tolist())

    def test_empty_remain(self, small):
        data, _, cfg, _ = small
        with pytest.raises(InputError):
            retrain(SMALL, split_forget(data, "random", 1.0, 0), data, cfg)

    def test_forget_behaves_like_held_out(self):
        arch = ArchSpec("tiny-resnet", (3, 8, 8), 4)
        data = make_synthetic(4, 50, (3, 8, 8), seed=5, noise=0.5)
        test = make_synthetic(4, 50, (3, 8, 8), seed=5, noise=0.5, split="test")
        part = split_forget(data, "random", 0.3, 1)
        model = retrain(arch, part, data, TrainConfig(epochs=10, lr=0.01, batch_size=32))
        ua, _, ta = core_accuracies(model, part, data, test)
        assert abs(ua - ta) <= 10.0


class TestFineTune:
    def test_zero_epochs_identity(self, small):
        data, part, _, model = small
        assert same_weights(fine_tune(model, part, data, TrainConfig(epochs=0)), model)

    def test_zero_lr_identity(self, small):
        data, part, _, model = small
        cfg = TrainConfig(epochs=2, lr=0.0, momentum=0.0, weight_decay=0.0, batch_size=8)
        assert same_weights(fine_tune(model, part, data, cfg), model)

    def test_does_not_mutate_original(self, small):
        data, part, cfg, model = small
        before = {k: v.copy() for k, v in model.state().items()}
        fine_tune(model, part, data, cfg)
        assert all(np.array_equal(before[k], model.state()[k]) for k in before)

    def test_access_log_excludes_forget(self, small):
        data, part, cfg, model = small
        log = []
        fine_tune(model, part, data, cfg, access_log=log)
        visited = {i for _, i in log}
        assert visited == set(part.remain.tolist())
        assert len(log) == cfg.epochs * part.remain.size

    def test_remain_accuracy_does_not_collapse(self):
        arch = ArchSpec("tiny-resnet", (3, 8, 8), 4)
        data = make_synthetic(4, 50, (3, 8, 8), seed=6, noise=0.3)
        part = split_forget(data, "random", 0.5, 2)
        original = train(arch, data, TrainConfig(epochs=20, lr=0.01, batch_size=16))
        tuned = fine_tune(original, part, data, TrainConfig(epochs=5, lr=0.01, batch_size=16))
        remain = data.subset(part.remain)
        assert accuracy(tuned, remain) >= accuracy(original, remain) - 5.0


class TestRandomLabel:
    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 20), st.integers(0, 2**31), st.integers(1, 50))
    def test_relabel_valid(self, k, seed, n):
        y = np.random.default_rng(seed).integers(0, k, n)
        new = draw_random_labels(y, k, seed)
        assert (new != y).all() and (new >= 0).all() and (new < k).all()

    def test_two_classes_forced(self):
        y = np.array([0, 1, 1, 0])
        assert draw_random_labels(y, 2, 5).tolist() == [1, 0, 0, 1]

    def test_relabel_uniform_over_others(self):
        y = np.full(10_000, 4)
        new = draw_random_labels(y, 10, 11)
        counts = np.bincount(new, minlength=10)
        assert counts[4] == 0
        assert stats.chisquare(np.delete(counts, 4)).pvalue > 0.01

    def test_single_class_rejected(self):
        with pytest.raises(InputError):
            draw_random_labels(np.zeros(3, int), 1, 0)

    def test_trains_on_forget_and_remain(self, small):
        data, part, cfg, model = small
        log = []
        random_label(model, part, data, cfg, access_log=log)
        assert {i for _, i in log} == set(range(len(data)))
        log = []
        random_label(model, part, data, cfg, forget_only=True, access_log=log)
        assert {i for _, i in log} == set(part.forget.tolist())

    def test_relabel_drawn_from_partition_seed(self, small):
        data, part, cfg, model = small
        a = random_label(model, part, data, cfg)
        b = random_label(model, part, data, cfg)
        assert same_weights(a, b)

    def test_empty_forget(self, small):
        data, _, cfg, model = small
        part = ForgetPartition(np.array([], dtype=np.int64), np.arange(len(data)), "random", 0.0, 0)
        with pytest.raises(InputError):
            random_label(model, part, data, cfg)


class TestSaliency:
    def test_hand_set_gradients(self):
        scores = {"a": np.array([5.0, 1.0, 9.0, 3.0]), "b": np.array([[7.0, 2.0], [8.0, 0.5]]),
                  "c": np.array([4.0, 6.0])}
        mask = top_fraction_mask(scores, 0.5)
        flat = np.concatenate([v.ravel() for v in scores.values()])
        assert mask.selected == 5
        assert set(np.flatnonzero(mask.flat())) == top_k_bruteforce(flat, 5)

    def test_ties_prefer_lower_index(self):
        mask = top_fraction_mask({"w": np.array([1.0, 2.0, 2.0, 2.0, 0.0])}, 0.4)
        assert mask.masks["w"].tolist() == [False, True, True, False, False]

    def test_full_fraction(self):
        mask = top_fraction_mask({"w": np.zeros((3, 3))}, 1.0)
        assert mask.masks["w"].all()

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 60), st.sampled_from([0.1, 0.3, 0.5, 0.7, 0.9, 1.0]))
    def test_count_and_oracle(self, seed, size, k):
        rng = np.random.default_rng(seed)
        scores = {"x": rng.integers(0, 4, size).astype(float), "y": rng.integers(0, 4, (2, 3)).astype(float)}
        mask = top_fraction_mask(scores, k)
        total = size + 6
        assert mask.selected == int(np.ceil(round(k * total, 9)))
        flat = np.concatenate([v.ravel() for v in scores.values()])
        assert set(np.flatnonzero(mask.flat())) == top_k_bruteforce(flat, mask.selected)

    def test_bad_fraction(self):
        with pytest.raises(InputError):
            top_fraction_mask({"w": np.ones(3)}, 0.0)

    def test_mask_from_forget_gradient(self, small):
        data, part, _, model = small
        grads = forget_gradients(model, part, data)
        mask = compute_saliency_mask(model, part, data, 0.3)
        assert set(mask.masks) == set(model.params)
        flat = np.concatenate([np.abs(grads[n]).ravel() for n in model.params])
        assert set(np.flatnonzero(mask.flat())) == top_k_bruteforce(flat, mask.selected)

    def test_empty_forget(self, small):
        data, _, _, model = small
        part = ForgetPartition(np.array([], dtype=np.int64), np.arange(len(data)), "random", 0.0, 0)
        with pytest.raises(InputError):
            compute_saliency_mask(model, part, data)


class TestSalUn:
    def _mask(self, model, fill=None, seed=0):
        rng = np.random.default_rng(seed)
        masks = {n: (np.full(p.shape, fill, bool) if fill is not None else rng.random(p.shape) < 0.5)
                 for n, p in model.params.items()}
        return SaliencyMask(masks, 0.5)

    def test_zero_mask_freezes_everything(self, small):
        data, part, cfg, model = small
        assert same_weights(salun(model, part, data, self._mask(model, False), cfg), model)

    def test_full_mask_equals_random_label(self, small):
        data, part, cfg, model = small
        assert same_weights(salun(model, part, data, self._mask(model, True), cfg),
                            random_label(model, part, data, cfg))

    def test_mixed_mask_contract(self, small):
        data, part, cfg, model = small
        mask = self._mask(model, seed=3)
        out = salun(model, part, data, mask, cfg)
        moved = 0
        for n, p in out.params.items():
            frozen = ~mask.masks[n]
            assert p.data[frozen].tobytes() == model.params[n].data[frozen].tobytes()
            moved += int((p.data[mask.masks[n]] != model.params[n].data[mask.masks[n]]).sum())
        assert moved > 0

    def test_shape_mismatch(self, small):
        data, part, cfg, model = small
        with pytest.raises(InputError):
            salun(model, part, data, SaliencyMask({"fc.w": np.ones((1, 1), bool)}, 0.5), cfg)


class TestRTE:
    def test_minutes_and_ordering(self):
        data = make_synthetic(2, 20, (1, 4, 4), seed=0)
        arch = ArchSpec("mlp", (1, 4, 4), 2)
        part = split_forget(data, "random", 0.5, 0)
        original, _ = measure_rte(train, arch, data, TrainConfig(epochs=1))
        _, slow = measure_rte(retrain, arch, part, data, TrainConfig(epochs=40))
        _, fast = measure_rte(fine_tune, original, part, data, TrainConfig(epochs=1))
        assert slow > fast >= 0

    def test_seconds_to_minutes(self, monkeypatch):
        ticks = iter([100.0, 130.0])
        monkeypatch.setattr("unlearnaug.unlearn.time.perf_counter", lambda: next(ticks))
        result, minutes = measure_rte(lambda: "done")
        assert result == "done" and minutes == pytest.approx(0.5)
