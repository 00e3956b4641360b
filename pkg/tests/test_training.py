import os

import numpy as np
import pytest

from rapa.network import Network, NetworkConfig
from rapa.numcore import SeededRng
from rapa.synthetic import write_synthetic_cifar10
from rapa.training import (
    RECORD_BYTES,
    DatasetError,
    DatasetSplit,
    TrainConfig,
    augment,
    evaluate,
    load_cifar10,
    lr_at_epoch,
    read_batch_file,
    sgd_step,
    train_epoch,
)


class TestLoader:
    def test_record_counts(self, small_dataset_dir):
        train, test = load_cifar10(small_dataset_dir)
        assert len(train) == 120 and len(test) == 40
        assert train.images.shape == (120, 32, 32, 3)
        assert train.images.dtype == np.float32
        assert set(np.unique(train.labels)) <= set(range(10))

    def test_train_mean_subtracted(self, small_dataset_dir):
        train, _ = load_cifar10(small_dataset_dir)
        np.testing.assert_allclose(train.images.mean(axis=0), 0.0, atol=1e-5)

    def test_round_trip_bytes(self, small_dataset_dir):
        # Re-serializing parsed records reproduces the input bytes exactly.
        path = os.path.join(small_dataset_dir, "data_batch_1.bin")
        labels, pixels = read_batch_file(path)
        rebuilt = np.concatenate(
            [np.concatenate(([l], p)) for l, p in zip(labels, pixels)]
        ).astype(np.uint8)
        with open(path, "rb") as f:
            assert rebuilt.tobytes() == f.read()

    def test_truncated_file(self, tmp_path):
        bad = tmp_path / "data_batch_1.bin"
        bad.write_bytes(b"\x00" * 3072)
        with pytest.raises(DatasetError, match=r"truncated record at byte offset 0"):
            read_batch_file(str(bad))

    def test_truncation_offset_names_record(self, tmp_path):
        bad = tmp_path / "x.bin"
        bad.write_bytes(b"\x01" + b"\x00" * 3072 + b"\x02" * 100)
        with pytest.raises(DatasetError, match=rf"byte offset {RECORD_BYTES}"):
            read_batch_file(str(bad))

    def test_bad_label_rejected(self, tmp_path):
        bad = tmp_path / "x.bin"
        bad.write_bytes(bytes([11]) + b"\x00" * 3072)
        with pytest.raises(DatasetError, match="label 11"):
            read_batch_file(str(bad))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetError, match="missing batch file"):
            load_cifar10(str(tmp_path))


class TestAugment:
    def test_identity_when_no_mirror_zero_delta(self, rng):
        # find a seed whose draws are (no mirror, tiny delta)
        image = rng.normal(0, 0.2, (32, 32, 3)).astype(np.float32)
        for seed in range(5000):
            g = SeededRng(seed)
            mirror = g.random() < 0.5
            delta = g.uniform(-0.1, 0.1)
            if not mirror and abs(delta) < 1e-4:
                out = augment(image, SeededRng(seed))
                np.testing.assert_allclose(out, image, atol=1.5e-4)
                return
        pytest.fail("no suitable seed found")

    def test_double_mirror_identity(self):
        image = np.arange(32 * 32 * 3, dtype=np.float32).reshape(32, 32, 3) / 3072
        np.testing.assert_array_equal(image[:, ::-1, :][:, ::-1, :], image)

    def test_histogram_shift_equals_delta(self, rng):
        image = rng.normal(0, 0.1, (32, 32, 3)).astype(np.float32)
        seed = 5
        g = SeededRng(seed)
        mirrored = g.random() < 0.5
        delta = g.uniform(-0.1, 0.1)
        out = augment(image, SeededRng(seed))
        base = image[:, ::-1, :] if mirrored else image
        np.testing.assert_allclose(out - base, np.float32(delta), atol=1e-7)

    def test_clamped_to_range(self):
        image = np.full((32, 32, 3), 0.99, dtype=np.float32)
        for seed in range(50):
            out = augment(image, SeededRng(seed))
            assert out.max() <= 1.0 and out.min() >= -1.0


class TestLrSchedule:
    CFG = TrainConfig(lr=0.05, lr_gamma=0.75, warmup_epochs=5)

    def test_warmup_division(self):
        assert lr_at_epoch(self.CFG, 0) == pytest.approx(0.001)

    def test_first_post_warmup(self):
        assert lr_at_epoch(self.CFG, 5) == pytest.approx(0.05)

    def test_one_anneal_step(self):
        assert lr_at_epoch(self.CFG, 30) == pytest.approx(0.0375)

    def test_non_increasing_piecewise_constant(self):
        values = [lr_at_epoch(self.CFG, e) for e in range(5, 130)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        # constant within each 25-epoch block
        for start in range(0, 100, 25):
            block = values[start : start + 25]
            assert len(set(block)) == 1


class TestSgdStep:
    def test_no_grad_no_decay(self):
        p = {"w": np.ones(3)}
        sgd_step(p, {"w": np.zeros(3)}, lr=0.1, decay_coeff=0.0)
        np.testing.assert_array_equal(p["w"], 1.0)

    def test_decay_only_formula(self):
        # w=1, g=0, lr=1, decay 1e-4: w <- 1 - 1e-4
        p = {"w": np.ones(1)}
        sgd_step(p, {"w": np.zeros(1)}, lr=1.0, decay_coeff=1e-4)
        assert p["w"][0] == pytest.approx(1.0 - 1e-4, abs=1e-12)

    def test_elementwise_brute_force(self, rng):
        w = rng.normal(0, 1, (4, 5))
        g = rng.normal(0, 1, (4, 5))
        lr, decay = 0.05, 1e-4
        want = w - lr * (g + decay * lr * w)
        p = {"x.weight": w.copy()}
        sgd_step(p, {"x.weight": g}, lr=lr, decay_coeff=decay)
        np.testing.assert_allclose(p["x.weight"], want, rtol=1e-12)

    def test_bias_and_beta_excluded_from_decay(self):
        p = {"a.bias": np.ones(2), "pool0.beta": np.ones(2)}
        sgd_step(p, {"a.bias": np.zeros(2), "pool0.beta": np.zeros(2)}, lr=1.0, decay_coeff=1e-4)
        np.testing.assert_array_equal(p["a.bias"], 1.0)
        np.testing.assert_array_equal(p["pool0.beta"], 1.0)

    def test_decay_contracts_weights(self, rng):
        w = rng.normal(0, 1, 10)
        p = {"w.weight": w.copy()}
        for _ in range(5):
            before = np.abs(p["w.weight"]).copy()
            sgd_step(p, {"w.weight": np.zeros(10)}, lr=0.5, decay_coeff=1e-2)
            after = np.abs(p["w.weight"])
            assert np.all(after < before)
            assert np.all(np.sign(p["w.weight"]) == np.sign(w))


def tiny_split(rng, n=20):
    images = rng.normal(0, 0.25, (n, 32, 32, 3)).astype(np.float32)
    labels = (np.arange(n) % 10).astype(np.int64)
    return DatasetSplit(images=images, labels=labels, name="tiny")


class TestTrainEpoch:
    def test_lr_zero_keeps_weights(self, rng):
        net = Network(NetworkConfig(), rng.derive("init"))
        before = {k: v.copy() for k, v in net.parameters().items()}
        cfg = TrainConfig(lr=1e-300, epochs=1, augment=False)  # ~0 within float32
        data = tiny_split(rng, n=4)
        stats = train_epoch(net, data, cfg, rng.derive("t"), epoch=0)
        assert set(stats) == {"train_err_pct", "mean_loss", "lr"}
        for k, v in net.parameters().items():
            np.testing.assert_array_equal(v, before[k])

    def test_deterministic_replay(self, rng):
        data = tiny_split(rng)
        runs = []
        for _ in range(2):
            net = Network(NetworkConfig(tiles=(4, 1, 1), scheme="random"), SeededRng(3).derive("init"))
            cfg = TrainConfig(lr=0.01, epochs=2)
            stats = [
                train_epoch(net, data, cfg, SeededRng(3).derive("train"), epoch=e)
                for e in range(2)
            ]
            runs.append((stats, {k: v.copy() for k, v in net.parameters().items()}))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            np.testing.assert_array_equal(runs[0][1][k], runs[1][1][k])

    def test_worker_count_does_not_change_results(self, rng):
        data = tiny_split(rng)
        nets = []
        for workers in (1, 3):
            net = Network(NetworkConfig(tiles=(4, 1, 1), scheme="random"), SeededRng(3).derive("init"))
            cfg = TrainConfig(lr=0.01, epochs=1)
            train_epoch(net, data, cfg, SeededRng(3).derive("train"), epoch=0, workers=workers)
            nets.append({k: v.copy() for k, v in net.parameters().items()})
        for k in nets[0]:
            np.testing.assert_array_equal(nets[0][k], nets[1][k])

    def test_loss_decreases_when_overfitting(self, rng):
        data = tiny_split(rng, n=10)
        net = Network(NetworkConfig(), SeededRng(9).derive("init"))
        cfg = TrainConfig(lr=0.02, lr_gamma=1.0, warmup_epochs=0, augment=False)
        losses = [
            train_epoch(net, data, cfg, SeededRng(9).derive("train"), epoch=e)["mean_loss"]
            for e in range(20)
        ]
        assert losses[-1] < losses[0] * 0.8


class TestEvaluate:
    def test_chance_level_random_labels(self, rng):
        net = Network(NetworkConfig(), rng.derive("init"))
        images = rng.normal(0, 0.25, (1000, 32, 32, 3)).astype(np.float32)
        labels = rng.integers(0, 10, size=1000).astype(np.int64)
        data = DatasetSplit(images=images, labels=labels, name="chance")
        err = evaluate(net, data, rng.derive("eval"))
        assert abs(err - 90.0) < 2.0

    def test_vote_one_equals_single(self, rng):
        net = Network(NetworkConfig(tiles=(4, 1, 1), scheme="random"), rng.derive("init"))
        data = tiny_split(rng)
        a = evaluate(net, data, SeededRng(4).derive("e"), votes=1)
        b = evaluate(net, data, SeededRng(4).derive("e"), votes=1)
        assert a == b

    def test_perfect_memorization_zero_error(self, rng):
        # a net whose logits simply copy a pixel-conditioned class signal
        # would be contrived; instead memorize 10 images by training
        data = tiny_split(rng, n=10)
        net = Network(NetworkConfig(), SeededRng(13).derive("init"))
        cfg = TrainConfig(lr=0.02, lr_gamma=1.0, warmup_epochs=0, augment=False)
        for e in range(120):
            stats = train_epoch(net, data, cfg, SeededRng(13).derive("train"), epoch=e)
            if stats["train_err_pct"] == 0.0:
                break
        assert evaluate(net, data, rng.derive("eval")) == 0.0

    def test_empty_split_rejected(self, rng):
        net = Network(NetworkConfig(), rng.derive("init"))
        empty = DatasetSplit(
            images=np.zeros((0, 32, 32, 3), dtype=np.float32),
            labels=np.zeros(0, dtype=np.int64),
            name="empty",
        )
        with pytest.raises(DatasetError):
            evaluate(net, empty, rng)


@pytest.mark.slow
class TestMemorization:
    def test_100_images_under_5pct_within_200_epochs(self):
        r = SeededRng(100)
        images = r.derive("img").normal(0, 0.25, (100, 32, 32, 3)).astype(np.float32)
        labels = (np.arange(100) % 10).astype(np.int64)
        data = DatasetSplit(images=images, labels=labels, name="memo")
        for scheme, tiles, lr in [("none", (1, 1, 1), 0.005), ("random", (16, 4, 1), 0.05)]:
            net = Network(NetworkConfig(tiles=tiles, scheme=scheme), SeededRng(7).derive("init"))
            cfg = TrainConfig(lr=lr, lr_gamma=0.75, warmup_epochs=1, augment=False)
            reached = False
            for e in range(200):
                stats = train_epoch(net, data, cfg, SeededRng(7).derive("train"), epoch=e)
                if stats["train_err_pct"] < 5.0:
                    reached = True
                    break
            assert reached, f"{scheme}: train error stuck at {stats['train_err_pct']}"
