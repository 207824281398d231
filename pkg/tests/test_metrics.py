import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshfield.metrics import SSIM_C1, psnr, ssim, to_rgb


def oracle_ssim(a, b):
    # direct 2-D window sums, no separability
    x = np.arange(11) - 5.0
    g = np.exp(-0.5 * (x / 1.5) ** 2)
    w = np.outer(g, g) / np.outer(g, g).sum()
    H, W, C = a.shape
    vals = []
    for c in range(C):
        for i in range(H - 10):
            for j in range(W - 10):
                pa, pb = a[i:i + 11, j:j + 11, c], b[i:i + 11, j:j + 11, c]
                ma, mb = (w * pa).sum(), (w * pb).sum()
                va = (w * (pa - ma) ** 2).sum()
                vb = (w * (pb - mb) ** 2).sum()
                cov = (w * (pa - ma) * (pb - mb)).sum()
                vals.append((2 * ma * mb + 1e-4) * (2 * cov + 9e-4)
                            / ((ma ** 2 + mb ** 2 + 1e-4) * (va + vb + 9e-4)))
    return float(np.mean(vals))


def test_identical_images_give_infinite_psnr(rng):
    a = rng.random((8, 8, 3))
    assert psnr(a, a) == math.inf


def test_psnr_of_known_mse():
    a = np.zeros((10, 10, 3))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_decreases_with_noise(rng):
    a = rng.random((32, 32, 3))
    vals = [psnr(a, a + s * rng.normal(size=a.shape)) for s in (0.01, 0.05, 0.2)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_constant_images():
    a, b = np.zeros((16, 16, 3)), np.ones((16, 16, 3))
    assert ssim(a, b) == pytest.approx(SSIM_C1 / (1 + SSIM_C1), rel=1e-9)
    assert ssim(a, b) == pytest.approx(9.999e-5, rel=1e-4)


def test_ssim_self_is_one(rng):
    a = rng.random((20, 24, 3))
    assert abs(ssim(a, a) - 1.0) < 1e-9


def test_ssim_matches_direct_window_oracle(rng):
    a = rng.random((16, 18, 3))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(oracle_ssim(a, b), abs=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5))
def test_ssim_bounded_and_symmetric(seed, noise):
    r = np.random.default_rng(seed)
    a = r.random((14, 14, 3))
    b = np.clip(a + noise * r.normal(size=a.shape), 0, 1)
    s = ssim(a, b)
    assert s <= 1.0 + 1e-12
    assert s == pytest.approx(ssim(b, a), abs=1e-12)


def test_small_image_is_rejected(rng):
    with pytest.raises(ValueError):
        ssim(rng.random((10, 20, 3)), rng.random((10, 20, 3)))


def test_size_mismatch_is_rejected():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_rgba_composites_over_background():
    img = np.zeros((2, 2, 4))
    img[..., :3] = 0.2
    img[..., 3] = 0.5
    assert np.allclose(to_rgb(img, (1.0, 1.0, 1.0)), 0.7)
    assert np.allclose(to_rgb(img), 0.2)
