import math
from fractions import Fraction

import numpy as np
import pytest

from intnet.metrics import compare_outputs, dequantize, ideal_quantizer_psnr, psnr


def test_psnr_values():
    a = np.zeros(4)
    assert psnr(a, a) == math.inf
    assert psnr(a, np.full(4, 0.1)) == pytest.approx(20.0)
    assert psnr(a, np.full(4, 2.0), peak=2.0) == pytest.approx(0.0)


def test_identical_unity_models_have_zero_error():
    x = np.arange(6, dtype=np.int32).reshape(1, 1, 2, 3)
    cmp = compare_outputs(x.astype(np.float32), x, Fraction(1))
    assert cmp.max_abs == 0 and cmp.mean_abs == 0 and cmp.psnr == math.inf


def test_regress_divides_by_ratio():
    f = np.array([[[[0.5, 1.0]]]])
    i = np.array([[[[50, 100]]]])
    assert np.array_equal(dequantize(i, Fraction(100)), f)
    assert compare_outputs(f, i, Fraction(100)).max_abs == 0


def test_classify_ignores_ratio():
    f = np.array([[[[0.1]], [[0.9]]]])
    i = np.array([[[[10]], [[89]]]])
    cmp = compare_outputs(f, i, Fraction(100), mode="classify")
    assert cmp.agreement == 1.0 and cmp.max_abs == pytest.approx(1.0)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        compare_outputs(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)), Fraction(1))
    with pytest.raises(ValueError):
        compare_outputs(np.zeros(2), np.zeros(2), Fraction(1), mode="other")


def test_ideal_quantizer_psnr():
    assert ideal_quantizer_psnr(1 / 256, 1.0) == pytest.approx(10 * math.log10(12 * 256**2))
