import json

import numpy as np
import pytest

from eigenshape import training as tr
from eigenshape.netcore import grad_check


@pytest.fixture(scope="module")
def toy_data():
    rng = np.random.default_rng(0)
    n, d = 24, 32
    images = rng.random((n, 1, d, d)).astype(np.float32)
    lams = rng.uniform(20, 200, size=n)
    rasters = rng.standard_normal((n, d, d)).astype(np.float32)
    masks = (rng.random((n, d, d)) > 0.4).astype(np.float32)
    rasters *= masks
    norms = np.sqrt((rasters.astype(np.float64) ** 2).sum(axis=(1, 2), keepdims=True))
    rasters = (rasters * (d / norms)).astype(np.float32)
    return images, lams, rasters, masks


class TestL1Loss:
    def test_exact_match(self):
        loss, grad = tr.l1_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_known_value_and_grad(self):
        loss, grad = tr.l1_loss(np.array([2.0]), np.array([1.0]))
        assert loss == 1.0
        assert grad[0] == 1.0

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal(50), rng.standard_normal(50)
        loss, _ = tr.l1_loss(a, b)
        assert loss == pytest.approx(np.abs(a - b).sum() / 50)

    def test_empty_batch(self):
        with pytest.raises(tr.EmptyBatch):
            tr.l1_loss(np.array([]), np.array([]))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        pred = rng.standard_normal(9)
        target = rng.standard_normal(9)
        g = np.zeros_like(pred)

        def loss():
            l, gr = tr.l1_loss(pred, target)
            g[...] = gr
            return l

        assert grad_check(loss, [(pred, g)]) < 1e-4


class TestArm2Loss:
    def test_exact_match_zero(self, toy_data):
        _, _, rasters, masks = toy_data
        loss, _ = tr.arm2_loss(rasters[:4], rasters[:4], masks[:4])
        assert loss == 0.0

    def test_negated_prediction_zero(self, toy_data):
        _, _, rasters, masks = toy_data
        loss, _ = tr.arm2_loss(-rasters[:4], rasters[:4], masks[:4])
        assert loss == 0.0

    def test_zero_prediction_unit_loss(self, toy_data):
        _, _, rasters, masks = toy_data
        loss, _ = tr.arm2_loss(np.zeros_like(rasters[:4]), rasters[:4], masks[:4])
        assert loss == 1.0

    def test_sign_invariance_bitwise(self, toy_data):
        _, _, rasters, masks = toy_data
        rng = np.random.default_rng(3)
        pred = rng.standard_normal(rasters[:4].shape).astype(np.float32)
        l1, _ = tr.arm2_loss(pred, rasters[:4], masks[:4])
        l2, _ = tr.arm2_loss(-pred, rasters[:4], masks[:4])
        assert l1 == l2

    def test_outside_mask_invariance_exact(self, toy_data):
        _, _, rasters, masks = toy_data
        rng = np.random.default_rng(4)
        pred = rng.standard_normal(rasters[:4].shape).astype(np.float32)
        noise = rng.standard_normal(pred.shape).astype(np.float32) * (1 - masks[:4]) * 100
        l1, _ = tr.arm2_loss(pred, rasters[:4], masks[:4])
        l2, _ = tr.arm2_loss(pred + noise, rasters[:4], masks[:4])
        assert l1 == l2

    def test_gradient_zero_outside_mask(self, toy_data):
        _, _, rasters, masks = toy_data
        rng = np.random.default_rng(5)
        pred = rng.standard_normal(rasters[:4].shape).astype(np.float32)
        _, grad = tr.arm2_loss(pred, rasters[:4], masks[:4])
        assert np.all(grad[masks[:4] == 0] == 0)

    def test_zero_target_raises(self):
        with pytest.raises(tr.ZeroTarget):
            tr.arm2_loss(np.ones((1, 4, 4)), np.zeros((1, 4, 4)), np.ones((1, 4, 4)))

    def test_gradient(self):
        rng = np.random.default_rng(6)
        pred = rng.standard_normal((3, 6, 6))
        target = rng.standard_normal((3, 6, 6))
        mask = (rng.random((3, 6, 6)) > 0.3).astype(float)
        target *= mask
        g = np.zeros_like(pred)

        def loss():
            l, gr = tr.arm2_loss(pred, target, mask)
            g[...] = gr
            return l

        assert grad_check(loss, [(pred, g)], max_entries=40) < 1e-4


class TestSplitAndSchedule:
    def test_split_contract(self):
        a, b = tr.split_dataset(10, 0.8, 1)
        assert a.size == 8 and b.size == 2
        assert np.intersect1d(a, b).size == 0
        assert np.array_equal(np.sort(np.concatenate([a, b])), np.arange(10))

    def test_split_deterministic(self):
        assert np.array_equal(tr.split_dataset(100, 0.8, 7)[0],
                              tr.split_dataset(100, 0.8, 7)[0])

    def test_lr_schedule(self):
        cnn = tr.cnn_config()
        assert tr.lr_at(cnn, 0) == 0.001
        assert tr.lr_at(cnn, 25) == pytest.approx(0.001 * 0.5**2)
        fno = tr.fno_config()
        assert tr.lr_at(fno, 10) == pytest.approx(0.0008)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            tr.TrainConfig(epochs=0)
        with pytest.raises(ValueError):
            tr.TrainConfig(split_ratio=1.5)


class TestTrainLoops:
    def test_cnn_smoke(self, toy_data, tmp_path):
        images, lams, _, _ = toy_data
        cfg = tr.cnn_config(epochs=3, batch_size=8, seed=1)
        log = tmp_path / "hist.jsonl"
        model, hist = tr.train_eigenvalue(cfg, images, lams, log_path=log)
        assert len(hist.train_loss) == 3
        assert all(np.isfinite(hist.train_loss))
        rows = [json.loads(line) for line in open(log)]
        assert len(rows) == 3
        assert set(rows[0]) == {"epoch", "train_loss", "test_loss", "lr", "seconds"}

    def test_cnn_deterministic(self, toy_data):
        images, lams, _, _ = toy_data
        cfg = tr.cnn_config(epochs=2, batch_size=8, seed=5)
        m1, _ = tr.train_eigenvalue(cfg, images, lams)
        m2, _ = tr.train_eigenvalue(cfg, images, lams)
        for p1, p2 in zip(m1.params(), m2.params()):
            assert np.array_equal(p1.value, p2.value), p1.name

    def test_fno_smoke_and_initial_loss(self, toy_data):
        images, _, rasters, masks = toy_data
        cfg = tr.fno_config(epochs=2, batch_size=8, seed=2)
        model, hist = tr.train_eigenfunction(cfg, images, rasters, masks)
        assert len(hist.train_loss) == 2
        # near-zero initial predictions give arm2 ~ ||y||/||y|| = 1
        assert hist.train_loss[0] == pytest.approx(1.0, abs=0.2)

    def test_train_loss_decreases(self, toy_data):
        images, lams, _, _ = toy_data
        cfg = tr.cnn_config(epochs=4, batch_size=8, seed=3)
        _, hist = tr.train_eigenvalue(cfg, images, lams)
        assert hist.train_loss[-1] <= hist.train_loss[0]
