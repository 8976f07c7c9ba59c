import math

import numpy as np
import pytest

from src.errors import ConfigurationError, ShapeError
from src.metrics import INF, MetricsReport, pixel_accuracy, psnr, ssim, to_8bit


def test_psnr_known_values():
    a = np.full((4, 4, 3), 255, dtype=np.uint8)
    b = np.full((4, 4, 3), 127.5)
    # MSE = 127.5^2 so PSNR = 20 log10(2)
    assert psnr(a, b) == pytest.approx(6.0206, abs=1e-4)

    a = np.zeros((2, 2))
    b = np.full((2, 2), 255.0)
    assert psnr(a, b) == pytest.approx(0.0)


def test_psnr_identical_is_inf():
    a = np.random.default_rng(0).integers(0, 256, size=(8, 8, 3))
    assert psnr(a, a) == INF


def test_psnr_region():
    a = np.zeros((4, 4, 3))
    b = np.zeros((4, 4, 3))
    b[0, 0] = 255.0
    region = np.zeros((4, 4), dtype=bool)
    region[2:, 2:] = True
    assert psnr(a, b, region=region) == INF
    region[0, 0] = True
    # one of five pixels fully wrong
    assert psnr(a, b, region=region) == pytest.approx(10 * math.log10(5), rel=1e-9)
    assert psnr(a, b, region=np.ones((4, 4), dtype=bool)) == pytest.approx(psnr(a, b))


def test_psnr_errors():
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ConfigurationError):
        psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3)), region=np.zeros((4, 4), dtype=bool))
    with pytest.raises(ShapeError):
        psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3)), region=np.ones((3, 4), dtype=bool))


def test_ssim_identical():
    a = np.random.default_rng(1).integers(0, 256, size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, a, mode="global") == pytest.approx(1.0)


def test_ssim_constant_images():
    c1 = (0.01 * 255) ** 2
    expected = (2 * 100 * 150 + c1) / (100**2 + 150**2 + c1)
    a = np.full((16, 16), 100.0)
    b = np.full((16, 16), 150.0)
    assert ssim(a, b) == pytest.approx(expected, rel=1e-12)
    assert ssim(a, b, mode="global") == pytest.approx(expected, rel=1e-12)


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(2)
    a = rng.integers(0, 256, size=(12, 12, 3))
    b = rng.integers(0, 256, size=(12, 12, 3))
    assert ssim(a, b) == pytest.approx(ssim(b, a))
    assert -1.0 <= ssim(a, b) < 1.0


def test_ssim_small_image_window_clipped():
    a = np.full((4, 4), 10.0)
    assert ssim(a, a, window=8) == pytest.approx(1.0)


def test_ssim_errors():
    with pytest.raises(ShapeError):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(ConfigurationError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)), mode="pyramid")


def test_to_8bit():
    out = to_8bit(np.array([0.0, 0.5, 1.0, 1.2, -0.1]))
    assert out.dtype == np.uint8
    assert list(out) == [0, 128, 255, 255, 0]


def test_pixel_accuracy():
    truth = np.array([[0, 1], [1, 2]])
    assert pixel_accuracy(truth, truth) == 1.0
    assert pixel_accuracy(np.zeros((2, 2), dtype=int), truth) == 0.25
    with pytest.raises(ShapeError):
        pixel_accuracy(np.zeros((2, 3)), truth)


def test_metrics_report_row():
    report = MetricsReport(INF, 1.0, 30.0, 120, -5.0, 3, 4)
    row = report.to_row("scene_0000")
    assert row["psnr_db"] == "inf"
    assert row["task_psnr_db"] == 30.0
    assert row["depth"] == 3
    assert row["tier"] == 4
