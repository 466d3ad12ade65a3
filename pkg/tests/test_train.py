"""SGD, the training loop, checkpoints, evaluation and the stress test."""

import numpy as np
import pytest

from elastic_cnn import train as train_mod
from elastic_cnn.arch import get_preset
from elastic_cnn.cost import model_cost
from elastic_cnn.data import STRATA, SyntheticSpec, generate_synthetic
from elastic_cnn.errors import ConfigError, FormatError, InputError, TrainingDiverged
from elastic_cnn.network import build
from elastic_cnn.tensor import DTYPE, Tensor
from elastic_cnn.train import (
    SGD, Checkpoint, TrainConfig, evaluate, network_from_checkpoint, read_log, restore, snapshot,
    stress_test, train, valid_resolutions,
)

PARAMS = dict(train_samples=128, test_samples=64, seed=21)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SyntheticSpec(**PARAMS))


def config(**kw):
    base = dict(arch="toy_resnext_8_elastic", epochs=1, batch_size=32, seed=0, dataset_params=dict(PARAMS))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained(data):
    return train(config(), data)


class TestSGD:
    def test_hand_computed_steps(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        opt = SGD([w], momentum=0.9, weight_decay=0.1)
        w.grad = np.array([0.5], dtype=DTYPE)
        opt.step(0.1)
        # g' = 0.5 + 0.1*2 = 0.7; v = 0.7; w = 2 - 0.07
        assert w.data[0] == pytest.approx(1.93, rel=1e-6)
        opt.step(0.1)
        # g' = 0.5 + 0.193 = 0.693; v = 0.9*0.7 + 0.693 = 1.323
        assert w.data[0] == pytest.approx(1.93 - 0.1323, rel=1e-6)

    def test_no_grad_params_untouched(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        SGD([w], weight_decay=0.5).step(1.0)
        assert w.data[0] == 1.0


class TestConfig:
    @pytest.mark.parametrize("epoch,lr", [(0, 0.1), (29, 0.1), (30, 0.01), (59, 0.01), (60, 0.001), (95, 0.0001)])
    def test_step_schedule(self, epoch, lr):
        assert TrainConfig().lr_at(epoch) == pytest.approx(lr)

    @pytest.mark.parametrize("kw", [dict(batch_size=0), dict(base_lr=-1), dict(momentum=1.0),
                                    dict(lr_decay_factor=0), dict(dataset="imagenet")])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()


class TestTrain:
    def test_log_rows(self, trained, tmp_path):
        assert [(r.epoch, r.split) for r in trained.log] == [(0, "train"), (0, "test")]
        path = tmp_path / "log.csv"
        path.write_text(trained.log_csv())
        assert path.read_text().splitlines()[0] == "epoch,split,loss,top1"
        back = read_log(path)
        assert back[0].loss == pytest.approx(trained.log[0].loss, abs=1e-6)

    def test_checkpoint_counters(self, trained):
        ckpt = trained.checkpoint
        assert ckpt.step == 4 and ckpt.epoch == 1
        assert ckpt.config["arch"] == "toy_resnext_8_elastic"
        assert {"param", "buffer", "velocity"} == set(ckpt.kinds.values())

    def test_zero_lr_keeps_params(self, data):
        before = build(get_preset("toy_resnext_8_elastic"), seed=0)
        after = train(config(base_lr=0.0), data).network
        for (n, a), (_, b) in zip(before.named_parameters(), after.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes(), n

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_loss_decreases(self, seed):
        params = dict(train_samples=320, test_samples=0, seed=100 + seed)
        result = train(config(arch="toy_resnext_8", epochs=2, seed=seed, dataset_params=params))
        losses = [r.loss for r in result.log if r.split == "train"]
        assert losses[1] < losses[0]

    def test_nan_aborts_with_context(self, data, monkeypatch):
        real = train_mod._forward_loss

        def poisoned(network, x, y):
            loss, logits = real(network, x, y)
            return Tensor(np.array(np.nan), requires_grad=True), logits

        monkeypatch.setattr(train_mod, "_forward_loss", poisoned)
        with pytest.raises(TrainingDiverged, match=r"epoch 0, step 0, lr 0\.1"):
            train(config(), data)


class TestCheckpoint:
    def test_identical_seeds_byte_identical(self, data, trained, tmp_path):
        again = train(config(), data, log_path=tmp_path / "log.csv")
        assert again.checkpoint.to_bytes() == trained.checkpoint.to_bytes()
        assert (tmp_path / "log.csv").read_text() == trained.log_csv()

    def test_save_load_save(self, trained, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        trained.checkpoint.save(a)
        Checkpoint.load(a).save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_restored_network_identical(self, trained):
        net = network_from_checkpoint(trained.checkpoint)
        for (_, a), (_, b) in zip(net.named_parameters(), trained.network.named_parameters()):
            assert a.data.tobytes() == b.data.tobytes()
        assert snapshot(net).arrays.keys() <= trained.checkpoint.arrays.keys()

    def test_mismatch_names_first_parameter(self, trained):
        other = build(get_preset("toy_resnext_8", num_classes=4))
        with pytest.raises(ConfigError, match=r"mismatch at parameter 'stages\.0\.blocks\.0\.branches"):
            restore(other, trained.checkpoint)

    def test_layout(self, trained):
        blob = trained.checkpoint.to_bytes()
        assert blob[:8] == b"ELASTCKP"
        assert int.from_bytes(blob[8:12], "little") == 1

    @pytest.mark.parametrize("mutate,match", [
        (lambda b: b"XXXXXXXX" + b[8:], "magic"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\0\0\0\0", "trailing"),
        (lambda b: b[:8] + (7).to_bytes(4, "little") + b[12:], "version 7"),
    ])
    def test_corrupt(self, trained, mutate, match):
        with pytest.raises(FormatError, match=match):
            Checkpoint.from_bytes(mutate(trained.checkpoint.to_bytes()))


class TestEvaluate:
    def test_strata_weighted_average(self, trained, data):
        res = evaluate(trained.checkpoint, data.test)
        total = sum(acc * cnt for acc, cnt in res.strata.values())
        assert sum(cnt for _, cnt in res.strata.values()) == res.count == 64
        assert total / res.count == pytest.approx(res.top1)
        assert set(res.strata) <= set(STRATA)

    def test_stress_flops_and_pool_shape(self, trained, data):
        results = {r.resolution: r for r in stress_test(trained.checkpoint, data.test, [16, 32, 64])}
        native = results[32]
        assert native.flops == model_cost(get_preset("toy_resnext_8_elastic")).total_flops
        assert results[16].flops / native.flops == pytest.approx(0.25, rel=0.02)
        assert results[64].flops / native.flops == pytest.approx(4.0, rel=0.02)
        c, h, w = native.pool_input_shape
        for r, scale in ((16, 0.25), (64, 4.0)):
            c2, h2, w2 = results[r].pool_input_shape
            assert c2 == c and (h2 * w2) / (h * w) == scale

    def test_invalid_resolution_lists_sizes(self, trained, data):
        with pytest.raises(InputError, match=r"valid sizes.*: 4, 8, 12"):
            evaluate(trained.checkpoint, data.test, 18)
        assert valid_resolutions(get_preset("toy_resnext_8_elastic"), 1, 20) == [4, 8, 12, 16, 20]

    def test_memorises_tiny_split(self):
        params = dict(train_samples=16, test_samples=0, seed=3, noise=0.0)
        cfg = config(arch="toy_resnext_8", epochs=25, batch_size=16, base_lr=0.05,
                     weight_decay=0.0, dataset_params=params)
        result = train(cfg)
        data = generate_synthetic(SyntheticSpec(**params))
        assert evaluate(result.checkpoint, data.train).top1 == 1.0
