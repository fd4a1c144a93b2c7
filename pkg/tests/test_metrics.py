import json
import math

import numpy as np
import pytest

from eigenshape import metrics as mx


class TestRmse:
    def test_exact(self):
        assert mx.rmse([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_known(self):
        assert mx.rmse([3.0], [1.0]) == 2.0

    def test_matches_direct(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal(40), rng.standard_normal(40)
        assert mx.rmse(a, b) == pytest.approx(np.sqrt(((a - b) ** 2).mean()))

    def test_empty(self):
        with pytest.raises(mx.EmptyInput):
            mx.rmse([], [])


class TestR2:
    def test_perfect(self):
        y = np.array([1.0, 2.0, 3.0])
        assert mx.r2(y, y) == 1.0

    def test_mean_predictor_zero(self):
        y = np.array([1.0, 2.0, 3.0])
        assert mx.r2(np.full(3, y.mean()), y) == pytest.approx(0.0)

    def test_worse_than_mean_negative(self):
        y = np.array([1.0, 2.0, 3.0])
        assert mx.r2(np.array([3.0, 1.0, -2.0]), y) < 0

    def test_constant_targets(self):
        with pytest.raises(mx.ConstantTargets):
            mx.r2([1.0, 2.0], [5.0, 5.0])


class TestMape:
    def test_exact(self):
        assert mx.mape([1.0], [1.0]) == 0.0

    def test_ten_percent(self):
        assert mx.mape([110.0], [100.0]) == pytest.approx(10.0, abs=1e-6)

    def test_empty(self):
        with pytest.raises(mx.EmptyInput):
            mx.mape([], [])


class TestRasterMetrics:
    def test_maxae(self):
        a = np.zeros((4, 4))
        b = a.copy()
        assert mx.maxae(a, b) == 0.0
        b[2, 1] = 0.5
        assert mx.maxae(a, b) == 0.5
        with pytest.raises(mx.ShapeMismatch):
            mx.maxae(np.zeros((2, 2)), np.zeros((3, 3)))

    def test_maxae_matches_scan(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        best = max(abs(b[i, j] - a[i, j]) for i in range(8) for j in range(8))
        assert mx.maxae(a, b) == pytest.approx(best)

    def test_psnr_exact_match_inf(self):
        u = np.ones((4, 4))
        assert mx.psnr(u, u) == math.inf

    def test_psnr_formula(self):
        u = np.full((10, 10), 2.0)
        pred = u + 0.02
        assert mx.psnr(pred, u) == pytest.approx(40.0, abs=1e-9)

    def test_psnr_zero_signal(self):
        with pytest.raises(mx.ZeroSignal):
            mx.psnr(np.ones((2, 2)), np.zeros((2, 2)))

    def test_rel_l1(self):
        u = np.ones((4, 4))
        assert mx.rel_l1(u, u) == 0.0
        assert mx.rel_l1(np.zeros_like(u), u) == 100.0
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
        assert mx.rel_l1(a, b) == pytest.approx(100 * np.abs(b - a).sum() / np.abs(b).sum())


class TestEvaluate:
    def test_perfect_oracle(self):
        y = np.array([10.0, 20.0, 30.0, 40.0])
        report = mx.evaluate_eigenvalues(y, y)
        assert report.rmse == 0.0
        assert report.r2 == 1.0
        assert report.mape_percent == 0.0

    def test_worst_lists_present(self):
        rng = np.random.default_rng(3)
        y = rng.uniform(50, 150, size=30)
        pred = y + rng.standard_normal(30) * 5
        report = mx.evaluate_eigenvalues(pred, y)
        assert len(report.worst["abs_error"]) == 10
        assert {"sample", "true", "pred", "error"} <= set(report.worst["abs_error"][0])
        errs = [w["error"] for w in report.worst["abs_error"]]
        assert errs == sorted(errs, reverse=True)

    def test_fixture_hand_computed(self):
        # 10-sample fixture computed by hand with the definitional formulas
        y = np.array([100.0, 50.0, 80.0, 120.0, 60.0, 90.0, 110.0, 70.0, 130.0, 40.0])
        pred = y + np.array([1.0, -2.0, 0.5, 3.0, -1.0, 0.0, 2.0, -0.5, 1.5, -1.0])
        report = mx.evaluate_eigenvalues(pred, y)
        # SSres = 22.75, SStot = 8250, sum|e|/y = 0.159779804 (hand-computed)
        assert report.rmse == pytest.approx(np.sqrt(2.275), abs=1e-9)
        assert report.r2 == pytest.approx(1 - 22.75 / 8250.0, abs=1e-9)
        assert report.mape_percent == pytest.approx(1.59779804, abs=1e-6)

    def test_eigenfunction_sign_alignment(self):
        rng = np.random.default_rng(4)
        target = rng.standard_normal((3, 8, 8))
        mask = np.ones_like(target)
        pred = -target  # sign-flipped predictions evaluate as perfect
        report = mx.evaluate_eigenfunctions(pred, target, mask)
        assert report.rel_l1_percent == pytest.approx(0.0, abs=1e-12)
        assert report.maxae == pytest.approx(0.0, abs=1e-12)
        assert report.psnr_db == math.inf

    def test_sign_selection_never_hurts(self):
        rng = np.random.default_rng(5)
        target = rng.standard_normal((5, 6, 6))
        pred = rng.standard_normal((5, 6, 6))
        aligned = mx.align_sign(pred.copy(), target)
        for i in range(5):
            raw = ((pred[i] - target[i]) ** 2).sum()
            fixed = ((aligned[i] - target[i]) ** 2).sum()
            assert fixed <= raw + 1e-12

    def test_permutation_invariance(self):
        rng = np.random.default_rng(6)
        y = rng.uniform(30, 90, size=20)
        pred = y + rng.standard_normal(20)
        a = mx.evaluate_eigenvalues(pred, y)
        perm = rng.permutation(20)
        b = mx.evaluate_eigenvalues(pred[perm], y[perm])
        assert a.rmse == pytest.approx(b.rmse)
        assert a.r2 == pytest.approx(b.r2)
        assert a.mape_percent == pytest.approx(b.mape_percent)

    def test_report_json_inf_encoding(self):
        u = np.ones((1, 4, 4))
        report = mx.evaluate_eigenfunctions(u, u, np.ones_like(u))
        payload = json.loads(report.to_json())
        assert payload["psnr_db"] == "inf"


class TestRenderTable:
    def test_layout(self):
        text = mx.render_table(
            [{"Setting": "32x32+dp+ma", "RMSE": 2.2121, "R2": 0.9988, "MAPE": "1.15%"}],
            ["Setting", "RMSE", "R2", "MAPE"])
        lines = text.splitlines()
        assert lines[0].split("|")[0].strip() == "Setting"
        assert "2.212" in lines[2]
        assert "1.15%" in lines[2]
