import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drift_adapt import corruptions as C
from drift_adapt.corruptions import Corruption, apply
from drift_adapt.synth import generate_scene


@pytest.fixture(scope="module")
def fixture_images():
    return np.concatenate([generate_scene(("corruption-fixture", i)).image for i in range(10)])


def test_none_is_bitwise_identity(fixture_images):
    out = apply(fixture_images, Corruption("none"))
    assert out.tobytes() == fixture_images.tobytes()
    assert out is not fixture_images


@pytest.mark.parametrize("severity", range(1, 6))
def test_gaussian_noise_std(severity):
    x = np.full((1, 1, 320, 320), 0.5)
    out = C.gaussian_noise(x, C.GAUSSIAN_SIGMA[severity - 1], seed=severity, clip=False)
    assert np.std(out - x) == pytest.approx(C.GAUSSIAN_SIGMA[severity - 1], rel=0.05)


@pytest.mark.parametrize("severity", range(1, 6))
def test_impulse_fraction(severity):
    x = np.full((1, 1, 128, 128), 0.5, np.float32)
    out = apply(x, Corruption("impulse_noise", severity, seed=3))
    frac = np.mean((out == 0) | (out == 1))
    assert abs(frac - C.IMPULSE_RATE[severity - 1]) <= 0.02


def test_blur_constant_image():
    x = np.full((1, 3, 16, 16), 0.37, np.float32)
    np.testing.assert_allclose(apply(x, Corruption("gaussian_blur", 5)), x, atol=1e-7)


@pytest.mark.parametrize("sigma", C.BLUR_SIGMA)
def test_blur_kernel_normalized(sigma):
    assert C.gaussian_kernel(sigma).sum() == pytest.approx(1.0, abs=1e-6)


def test_blur_preserves_mean_with_periodic_padding():
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    out = C.gaussian_blur(x, 2.0, mode="wrap")
    np.testing.assert_allclose(out.mean(axis=(2, 3)), x.mean(axis=(2, 3)), atol=1e-4)


def test_fog_monotone_on_fixture_images(fixture_images):
    lum = [apply(fixture_images, Corruption("fog", s)).mean() for s in (1, 5)]
    assert lum[1] > lum[0]


@pytest.mark.parametrize("kind", C.CORRUPTION_KINDS)
def test_severity_monotone(kind, fixture_images):
    dev = [np.abs(apply(fixture_images, Corruption(kind, s, seed=1)) - fixture_images).mean() for s in range(1, 6)]
    assert all(b >= a for a, b in zip(dev, dev[1:])), dev


@pytest.mark.parametrize("kind", C.KINDS)
def test_outputs_in_unit_range(kind, fixture_images):
    out = apply(fixture_images, Corruption(kind, 5, seed=2))
    assert out.dtype == np.float32 and out.shape == fixture_images.shape
    assert out.min() >= 0.0 and out.max() <= 1.0


@pytest.mark.parametrize("kind", C.CORRUPTION_KINDS)
def test_seeded_determinism(kind, fixture_images):
    a = apply(fixture_images, Corruption(kind, 3, seed=9))
    b = apply(fixture_images, Corruption(kind, 3, seed=9))
    assert a.tobytes() == b.tobytes()
    assert np.all(fixture_images >= 0)  # input untouched


def test_input_outside_unit_range_rejected():
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        apply(np.full((1, 1, 4, 4), 1.5), Corruption("gaussian_noise"))


@pytest.mark.parametrize("kwargs", [{"kind": "rain"}, {"kind": "fog", "severity": 0},
                                    {"kind": "fog", "severity": 6}])
def test_invalid_corruption(kwargs):
    with pytest.raises(ValueError):
        Corruption(**kwargs)


def test_plasma_range_and_periodicity():
    p = C.plasma_fractal(64, seed=4)
    assert p.shape == (64, 64)
    assert p.min() == 0.0 and p.max() == 1.0
    assert C.plasma_fractal(64, seed=4).tobytes() == p.tobytes()
    # periodic grid: wrapped neighbours differ no more than interior ones on average
    assert np.abs(p[0] - p[-1]).mean() < 3 * np.abs(np.diff(p, axis=0)).mean()


@given(st.sampled_from(C.CORRUPTION_KINDS), st.integers(1, 5), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_range_property(kind, severity, seed):
    x = np.random.default_rng(seed).random((1, 3, 16, 16)).astype(np.float32)
    out = apply(x, Corruption(kind, severity, seed))
    assert out.min() >= 0.0 and out.max() <= 1.0
