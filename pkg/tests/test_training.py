import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mewunet.checks import gradient_check
from mewunet.checkpoint import CheckpointError, decode, encode, load_checkpoint, save_checkpoint
from mewunet.data import synth_generate
from mewunet.network import NetworkConfig, build_network
from mewunet.tensor import Tensor
from mewunet.training import (
    Optimizer, TrainConfig, adamw_step, bce_dice_loss, clip_grad_norm, cosine_lr, evaluate, read_config_file,
    sgd_step, train,
)

TINY = dict(stage_channels="4,4,8,8,8", mewb_counts="1,1,1,1", batch_size=4, lr=3e-3)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    return synth_generate(8, 16, 2, 21, tmp_path_factory.mktemp("tiny"), train_fraction=0.75)


class TestLoss:
    def test_saturated_correct_logits(self):
        gt = np.array([[[0, 1], [1, 0]]])
        logits = np.stack([np.where(gt == 0, 40.0, -40.0), np.where(gt == 1, 40.0, -40.0)], axis=1)
        assert bce_dice_loss(Tensor(logits), gt).item() < 1e-5

    def test_uniform_binary_is_ln2(self):
        gt = np.random.default_rng(0).integers(0, 2, (2, 4, 4))
        # bce weight only: mean cross entropy at p = 0.5
        assert bce_dice_loss(Tensor(np.zeros((2, 1, 4, 4))), gt, (1.0, 0.0)).item() == pytest.approx(math.log(2))
        assert bce_dice_loss(Tensor(np.zeros((2, 2, 4, 4))), gt, (1.0, 0.0)).item() == pytest.approx(math.log(2))

    def test_dice_closed_form(self):
        gt = np.zeros((1, 2, 2), dtype=int)
        gt[0, 0, 0] = 1
        # sigmoid(0) = 0.5 everywhere: intersection 0.5, sums 2 and 1
        expected = 1 - (2 * 0.5 + 1e-5) / (2.0 + 1.0 + 1e-5)
        assert bce_dice_loss(Tensor(np.zeros((1, 1, 2, 2))), gt, (0.0, 1.0)).item() == pytest.approx(expected)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_gradient(self, rng, k):
        x = Tensor(rng.uniform(-1, 1, size=(2, k, 4, 4)), requires_grad=True)
        gt = rng.integers(0, max(k, 2), (2, 4, 4))
        assert gradient_check(lambda: bce_dice_loss(x, gt), [x]) < 1e-4

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            bce_dice_loss(Tensor(np.zeros((1, 2, 2, 2))), np.full((1, 2, 2), 2))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_non_negative(self, seed):
        r = np.random.default_rng(seed)
        k = int(r.integers(1, 4))
        gt = r.integers(0, max(k, 2), (2, 3, 3))
        assert bce_dice_loss(Tensor(r.normal(scale=5, size=(2, k, 3, 3))), gt).item() >= 0


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        assert cosine_lr(0, 10, 1e-3, 1e-5) == 1e-3
        assert cosine_lr(10, 10, 1e-3, 1e-5) == 1e-5
        assert cosine_lr(5, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2, abs=1e-18)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(11, 10, 1.0)

    @settings(max_examples=50)
    @given(st.integers(1, 500), st.floats(1e-6, 1.0), st.floats(0, 1e-6))
    def test_monotone(self, total, hi, lo):
        vals = [cosine_lr(t, total, hi, lo) for t in range(total + 1)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestOptimizers:
    def test_adamw_zero_grad_no_decay(self, rng):
        w = rng.normal(size=5)
        ref = w.copy()
        adamw_step([w], [np.zeros(5)], {}, 0.1, weight_decay=0.0)
        assert np.array_equal(w, ref)

    def test_adamw_zero_grad_decay(self, rng):
        w = rng.normal(size=5)
        ref = w * (1 - 0.1 * 0.01)
        adamw_step([w], [np.zeros(5)], {}, 0.1, weight_decay=0.01)
        assert np.array_equal(w, ref)

    def test_adamw_hand_trace(self):
        lr, b1, b2, eps, wd = 0.1, 0.9, 0.999, 1e-8, 0.01
        w, m, v = 1.0, 0.0, 0.0
        expected = []
        for t in (1, 2, 3):
            g = 2 * w
            w = w - lr * wd * w
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            expected.append(w)
        arr, state = np.array([1.0]), {}
        got = []
        for _ in range(3):
            adamw_step([arr], [2 * arr.copy()], state, lr, b1, b2, eps, wd)
            got.append(arr[0])
        assert got == pytest.approx(expected, abs=1e-15)
        # first step of Adam moves by lr (times the sign) regardless of scale, before decay
        assert expected[0] == pytest.approx(1 - 0.001 - 0.1, abs=1e-8)

    def test_sgd_plain(self, rng):
        w = rng.normal(size=4)
        g = rng.normal(size=4)
        ref = w - 0.05 * g
        sgd_step([w], [g], {}, 0.05, momentum=0.0, weight_decay=0.0)
        assert np.allclose(w, ref, atol=1e-15)

    def test_sgd_coast(self):
        w = np.array([1.0])
        state = {"step": 3, "velocity": [np.array([2.0])]}
        sgd_step([w], [np.zeros(1)], state, 0.1, momentum=0.9, weight_decay=0.0)
        assert w[0] == pytest.approx(1.0 - 0.1 * 0.9 * 2.0, abs=1e-15)

    def test_sgd_hand_trace(self):
        w, state = np.array([1.0]), {}
        sgd_step([w], [2 * w.copy()], state, 0.1, momentum=0.9, weight_decay=0.0)
        assert w[0] == pytest.approx(0.8, abs=1e-15)
        sgd_step([w], [2 * w.copy()], state, 0.1, momentum=0.9, weight_decay=0.0)
        assert w[0] == pytest.approx(0.46, abs=1e-15)

    @pytest.mark.parametrize("kind", ["adamw", "sgd"])
    def test_zero_grad_zero_decay_noop(self, rng, kind):
        p = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        ref = p.data.copy()
        opt = Optimizer([p], kind, weight_decay=0.0)
        for _ in range(3):
            p.grad = np.zeros((3, 3))
            opt.step(0.1)
        assert np.array_equal(p.data, ref)

    def test_default_decay(self):
        assert Optimizer([], "adamw").weight_decay == 1e-2
        assert Optimizer([], "sgd").weight_decay == 1e-4

    def test_clip(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([3.0, 4.0])
        assert clip_grad_norm([p], 1.0) == 5.0
        assert np.allclose(p.grad, [0.6, 0.8])


class TestConfig:
    def test_file_and_types(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("# comment\nlr = 0.01\nepochs=5  # trailing\naugment = false\nweight_decay = none\n")
        cfg = TrainConfig.from_mapping(read_config_file(f))
        assert cfg.lr == 0.01 and cfg.epochs == 5 and cfg.augment is False and cfg.weight_decay is None

    @pytest.mark.parametrize("bad", [{"lr": "0"}, {"epochs": "0"}, {"optimizer": "rmsprop"}, {"bogus": "1"},
                                     {"bce_weight": "0", "dice_weight": "0"}, {"branches": "hw,zz"}])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig.from_mapping(bad)

    def test_presets(self):
        assert TrainConfig.preset("isic").optimizer == "adamw"
        s = TrainConfig.preset("synapse")
        assert (s.lr, s.epochs, s.optimizer) == (3e-3, 600, "sgd")


class TestTrain:
    def test_one_epoch_one_record(self, tiny_data, tmp_path):
        res = train(TrainConfig(epochs=1, out_dir=str(tmp_path), **TINY), tiny_data)
        assert len(res.records) == 1
        lines = (tmp_path / "train_log.tsv").read_text().splitlines()
        assert len(lines) == 1 and len(lines[0].split("\t")) == 5
        assert res.best_checkpoint.exists() and res.last_checkpoint.exists()

    def test_same_seed_same_log(self, tiny_data, tmp_path):
        a = train(TrainConfig(epochs=2, seed=4, out_dir=str(tmp_path / "a"), **TINY), tiny_data)
        b = train(TrainConfig(epochs=2, seed=4, out_dir=str(tmp_path / "b"), **TINY), tiny_data)
        assert (tmp_path / "a/train_log.tsv").read_bytes() == (tmp_path / "b/train_log.tsv").read_bytes()
        # metadata differs only by out_dir; every stored array must match
        _, arr_a = decode((tmp_path / "a/last.ckpt").read_bytes())
        _, arr_b = decode((tmp_path / "b/last.ckpt").read_bytes())
        assert all(n == m and np.array_equal(x, y) for (n, x), (m, y) in zip(arr_a, arr_b))
        assert [r.loss for r in a.records] == [r.loss for r in b.records]

    def test_sgd_and_batchnorm_run(self, tiny_data, tmp_path):
        res = train(TrainConfig(epochs=2, optimizer="sgd", norm="batch", branches="hw,dw",
                                out_dir=str(tmp_path), **TINY), tiny_data)
        assert all(np.isfinite(r.loss) for r in res.records)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            train(TrainConfig(epochs=1, manifest=str(tmp_path / "nope.tsv"), out_dir=str(tmp_path)))

    def test_evaluate(self, tiny_data, tmp_path):
        res = train(TrainConfig(epochs=1, out_dir=str(tmp_path), **TINY), tiny_data)
        rep = evaluate(res.best_checkpoint, tiny_data, "test", export_dir=tmp_path / "pred",
                       report_stem=tmp_path / "rep")
        assert set(rep["mean"]) == {"mIoU", "DSC", "Acc", "Spe", "Sen", "HD95"}
        assert len(list((tmp_path / "pred").glob("*_pred.pgm"))) == len(tiny_data.ids("test"))
        assert rep == evaluate(res.best_checkpoint, tiny_data, "test")

    def test_evaluate_class_mismatch(self, tiny_data, tmp_path):
        res = train(TrainConfig(epochs=1, out_dir=str(tmp_path), **TINY), tiny_data)
        tiny_data.num_classes, saved = 3, tiny_data.num_classes
        try:
            with pytest.raises(ValueError, match="classes"):
                evaluate(res.best_checkpoint, tiny_data, "test")
        finally:
            tiny_data.num_classes = saved


class TestCheckpoint:
    def _net(self, dtype="float64", norm="group"):
        return build_network(NetworkConfig(height=16, width=16, stage_channels=(4, 4, 8, 8, 8),
                                           mewb_counts=(1, 1, 1, 1), dtype=dtype, norm_kind=norm), 5)

    @pytest.mark.parametrize("dtype", ["float64", "float32"])
    def test_round_trip_bitwise(self, rng, tmp_path, dtype):
        net = self._net(dtype, "batch")
        net(Tensor(rng.normal(size=(2, 3, 16, 16))))  # move running stats off their defaults
        net.eval()
        probe = Tensor(rng.normal(size=(2, 3, 16, 16)))
        ref = net(probe).data
        p1 = save_checkpoint(tmp_path / "a.ckpt", net, {"epoch": 3}, [("optim.m.0", np.arange(3.0))])
        loaded, meta, extra = load_checkpoint(p1)
        loaded.eval()
        assert np.array_equal(loaded(probe).data, ref)
        assert meta["epoch"] == 3 and np.array_equal(extra["optim.m.0"], np.arange(3.0))
        p2 = save_checkpoint(tmp_path / "b.ckpt", loaded, {"epoch": 3}, list(extra.items()))
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt(self, tmp_path):
        blob = encode({"network": {}}, [("x", np.zeros(4))])
        with pytest.raises(CheckpointError):
            decode(b"NOTACKPT" + blob[8:])
        with pytest.raises(CheckpointError):
            decode(blob[:-3])

    def test_encode_decode(self):
        arrays = [("a", np.arange(6.0).reshape(2, 3)), ("b", np.ones(2, dtype=np.float32))]
        meta, back = decode(encode({"k": 1}, arrays))
        assert meta == {"k": 1}
        assert [n for n, _ in back] == ["a", "b"]
        assert all(np.array_equal(x, y) and x.dtype == y.dtype for (_, x), (_, y) in zip(arrays, back))
