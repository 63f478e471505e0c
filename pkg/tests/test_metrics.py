import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import ref_mse, ref_psnr, ref_ssim
from patchedit.exceptions import DimensionError, MetricError
from patchedit.metrics import format_table, masked_report, mse, psnr, seam_score, ssim


def _fixture(seed, C=1, size=64):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (C, size, size))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    mask = rng.uniform(size=(size, size)) < 0.6
    return a, b, mask


class TestMse:
    def test_trivial(self):
        z, o = np.zeros((1, 4, 4)), np.ones((1, 4, 4))
        assert mse(z, z) == 0.0 and mse(z, o) == 1.0

    def test_half_mask(self):
        a = np.zeros((1, 8, 8))
        b = a.copy()
        b[:, :4] = 0.1
        mask = np.zeros((8, 8), bool)
        mask[:4] = True
        assert mse(a, b, mask) == pytest.approx(0.01, abs=1e-15)

    def test_empty_mask(self):
        with pytest.raises(MetricError):
            mse(np.zeros((1, 4, 4)), np.zeros((1, 4, 4)), np.zeros((4, 4), bool))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mse(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))

    @given(st.integers(0, 2**31))
    def test_symmetric_nonnegative(self, seed):
        a, b, m = _fixture(seed, size=12)
        assert mse(a, b, m) == mse(b, a, m) >= 0
        assert mse(a, a, m) == 0


class TestPsnr:
    def test_closed_forms(self):
        a = np.zeros((1, 4, 4))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)
        assert psnr(a, a + 1.0) == 0.0
        assert psnr(a, a) == math.inf


class TestSsim:
    def test_identical(self, rng):
        a = rng.uniform(size=(3, 16, 16))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)

    def test_constant_pair(self):
        c1 = 0.01**2
        assert ssim(np.zeros((1, 16, 16)), np.ones((1, 16, 16))) == pytest.approx(c1 / (1 + c1), rel=1e-9)

    def test_symmetric(self, rng):
        a, b = rng.uniform(size=(2, 2, 20, 20))
        assert abs(ssim(a, b) - ssim(b, a)) <= 1e-9

    def test_too_small(self):
        with pytest.raises(MetricError):
            ssim(np.zeros((1, 10, 20)), np.zeros((1, 10, 20)))

    def test_mask_without_window_centers(self):
        m = np.zeros((16, 16), bool)
        m[0, 0] = True
        with pytest.raises(MetricError):
            ssim(np.zeros((1, 16, 16)), np.zeros((1, 16, 16)), m)


@pytest.mark.parametrize("seed", range(3))
def test_against_reference(seed):
    a, b, m = _fixture(seed, C=2, size=24)
    assert abs(mse(a, b) - ref_mse(a, b)) <= 1e-12
    assert abs(mse(a, b, m) - ref_mse(a, b, m)) <= 1e-12
    assert abs(psnr(a, b, m) - ref_psnr(a, b, m)) <= 1e-9
    assert abs(ssim(a, b) - ref_ssim(a, b)) <= 1e-9
    assert abs(ssim(a, b, m) - ref_ssim(a, b, m)) <= 1e-9


def test_full_mask_is_bit_exact(rng):
    a, b, _ = _fixture(7, C=3, size=32)
    full = np.ones((32, 32), bool)
    for f in (mse, psnr, ssim):
        assert f(a, b, full) == f(a, b)


class TestSeam:
    @pytest.mark.parametrize("rows,cols", [(2, 1), (1, 2), (2, 2), (4, 4)])
    def test_ramp(self, rows, cols):
        y, x = np.mgrid[0:32, 0:32]
        img = ((x + 2 * y) / 100.0)[None]
        assert seam_score(img, rows, cols) == pytest.approx(1.0, rel=0.05)

    def test_step(self, rng):
        img = rng.uniform(0, 0.01, (1, 32, 32))
        img[:, 16:] += 1.0
        assert seam_score(img, 2, 1) > 5

    def test_constant(self):
        assert seam_score(np.full((1, 16, 16), 0.3), 2, 2) == 0.0

    def test_single_patch(self):
        assert seam_score(np.zeros((1, 8, 8)), 1, 1) is None

    def test_bad_grid(self):
        with pytest.raises(MetricError):
            seam_score(np.zeros((1, 9, 8)), 2, 2)


def test_report_and_table():
    a = np.zeros((1, 16, 16))
    rows = masked_report(a, a)
    assert [r[0] for r in rows] == ["mse", "psnr", "ssim"]
    text = format_table(rows + [("seam", "full", None)])
    lines = text.splitlines()
    assert lines[0] == "metric\tregion\tvalue"
    assert lines[2] == "psnr\tfull\tinf" and lines[4] == "seam\tfull\tn/a"
