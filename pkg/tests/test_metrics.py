import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from advcloud import metrics
from advcloud.metrics import f_measure, l2, mae, psnr, quality_scores, s_measure, sod_scores, ssim


def random_case(seed, size=8):
    rng = np.random.default_rng(seed)
    kind = seed % 4
    if kind == 0:
        pred = rng.uniform(size=(size, size))
    elif kind == 1:
        # 8-bit style maps exercise exact threshold ties
        pred = rng.integers(0, 256, size=(size, size)) / 255.0
    elif kind == 2:
        pred = np.clip(rng.normal(0.5, 0.4, size=(size, size)), 0, 1)
    else:
        pred = (rng.uniform(size=(size, size)) > 0.6).astype(float)
    gt = (rng.uniform(size=(size, size)) > rng.uniform(0.3, 0.8)).astype(float)
    return pred, gt


CASES = range(100)


class TestAgainstOracles:
    @pytest.mark.parametrize("seed", CASES)
    def test_mae_f_s(self, seed):
        pred, gt = random_case(seed, size=8 if seed % 2 else 16)
        assert mae(pred, gt) == pytest.approx(oracles.mae(pred, gt), abs=1e-9)
        assert f_measure(pred, gt) == pytest.approx(oracles.f_max(pred, gt), abs=1e-9)
        assert s_measure(pred, gt) == pytest.approx(oracles.s_measure(pred, gt), abs=1e-9)

    @pytest.mark.parametrize("seed", CASES)
    def test_psnr_l2(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(3, 8, 8))
        y = np.clip(x + rng.normal(scale=rng.uniform(0.001, 0.3), size=x.shape), 0, 1)
        assert psnr(x, y) == pytest.approx(oracles.psnr(x, y), abs=1e-9)
        assert l2(x, y) == pytest.approx(oracles.l2(x, y), abs=1e-9)

    @pytest.mark.parametrize("seed", range(0, 100, 5))
    def test_ssim(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(3, 13, 14))
        y = np.clip(x + rng.normal(scale=0.2, size=x.shape), 0, 1)
        assert ssim(x, y) == pytest.approx(oracles.ssim(x, y), abs=1e-9)


class TestFMeasure:
    def test_perfect(self):
        gt = np.zeros((6, 6))
        gt[2:4, 1:5] = 1
        assert f_measure(gt, gt) == pytest.approx(1.0)

    def test_all_ones_half_gt(self):
        gt = np.zeros((4, 4))
        gt[:2] = 1
        assert f_measure(np.ones((4, 4)), gt) == pytest.approx(1.3 * 0.5 / (0.3 * 0.5 + 1))
        assert f_measure(np.ones((4, 4)), gt) == pytest.approx(0.5652, abs=1e-4)

    def test_empty_gt_conventions(self):
        assert f_measure(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
        assert f_measure(np.full((3, 3), 0.1), np.zeros((3, 3))) == 0.0

    def test_non_binary_gt_rejected(self):
        with pytest.raises(ValueError, match="binary"):
            f_measure(np.zeros((2, 2)), np.full((2, 2), 0.5))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            mae(np.zeros((2, 2)), np.zeros((2, 3)))

    @pytest.mark.parametrize("seed", range(10))
    def test_invariant_to_background_border(self, seed):
        pred, gt = random_case(seed)
        big_p, big_g = np.pad(pred, 3), np.pad(gt, 3)
        assert f_measure(big_p, big_g) == pytest.approx(f_measure(pred, gt), abs=1e-12)

    def test_noise_degrades_mean_f(self):
        rng = np.random.default_rng(7)
        gts = [(rng.uniform(size=(16, 16)) > 0.7).astype(float) for _ in range(50)]
        preds = [g * 0.6 + 0.2 for g in gts]
        means = []
        for level in (0.0, 0.2, 0.4, 0.6, 0.8):
            noisy = [np.clip(p + rng.normal(0, level, size=p.shape), 0, 1) for p in preds]
            means.append(np.mean([f_measure(p, g) for p, g in zip(noisy, gts)]))
        assert all(a > b for a, b in zip(means, means[1:]))


class TestSMeasure:
    def test_self_similarity(self):
        gt = np.zeros((10, 10))
        gt[3:7, 2:6] = 1
        assert s_measure(gt, gt) >= 0.999
        assert s_measure(1 - gt, gt) < s_measure(gt, gt)

    def test_uniform_gt_cases(self):
        assert s_measure(np.full((4, 4), 0.25), np.zeros((4, 4))) == pytest.approx(0.75)
        assert s_measure(np.full((4, 4), 0.25), np.ones((4, 4))) == pytest.approx(0.25)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), arrays(np.bool_, (6, 6)))
    def test_range(self, pred, gt):
        s = s_measure(pred, gt.astype(float))
        assert 0.0 <= s <= 1.0


class TestQuality:
    def test_identity(self, rng):
        x = rng.uniform(size=(3, 16, 16))
        q = quality_scores(x, x)
        assert q.ssim == pytest.approx(1.0) and q.psnr == 99.0 and q.l2 == 0.0

    def test_constant_images(self):
        a, b = np.full((3, 12, 12), 0.25), np.full((3, 12, 12), 0.75)
        c1 = 0.01 ** 2
        assert ssim(a, b) == pytest.approx((2 * 0.25 * 0.75 + c1) / (0.25 ** 2 + 0.75 ** 2 + c1), rel=1e-9)
        assert psnr(a, b) == pytest.approx(10 * np.log10(1 / 0.25))
        assert psnr(a, b) == pytest.approx(6.0206, abs=1e-4)
        assert l2(a, b) == pytest.approx(127.5 ** 2)

    def test_symmetric(self, rng):
        x, y = rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
        assert psnr(x, y) == psnr(y, x) and l2(x, y) == l2(y, x)

    def test_ssim_needs_window(self):
        with pytest.raises(ValueError, match="11x11"):
            ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))

    def test_sod_scores_bundle(self):
        gt = np.zeros((1, 8, 8))
        gt[0, 2:5, 2:5] = 1
        s = sod_scores(gt, gt)
        assert s.mae == 0.0 and s.f_beta == pytest.approx(1.0) and s.s_measure >= 0.999

    def test_constants(self):
        assert metrics.BETA2 == 0.3 and metrics.S_ALPHA == 0.5 and len(metrics.THRESHOLDS) == 255
