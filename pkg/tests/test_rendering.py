import math

import numpy as np
import pytest

from lacet.rendering import (
    DecoderHead,
    decode_tokens,
    get_perceptual,
    photometric_loss,
    psnr,
    register_perceptual,
    ssim,
)
from lacet.tape import Tensor, tmean

SSIM_C1 = 0.01 ** 2


def make_head(rng, d=16, p=4, zero=False) -> DecoderHead:
    proj = np.zeros((d, 3 * p * p)) if zero else rng.normal(size=(d, 3 * p * p))
    return DecoderHead(Tensor(np.ones(d)), Tensor(np.zeros(d)), Tensor(proj))


def test_decode_zero_projection_gives_half():
    rng = np.random.default_rng(0)
    head = make_head(rng, zero=True)
    out = decode_tokens(Tensor(rng.normal(size=(5, 16))), head, 4)
    np.testing.assert_array_equal(out.data, 0.5)


def test_decode_range_and_shape():
    rng = np.random.default_rng(1)
    head = make_head(rng)
    out = decode_tokens(Tensor(rng.normal(size=(7, 16)) * 5), head, 4)
    assert out.shape == (7, 4, 4, 3)
    assert out.data.min() > 0.0 and out.data.max() < 1.0
    with pytest.raises(ValueError):
        decode_tokens(Tensor(rng.normal(size=(7, 16))), head, 5)


def test_photometric_loss():
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(8, 8, 3))
    assert photometric_loss(Tensor(img), img).item() == 0.0
    pred = np.clip(img + 0.125, 0, 1)
    # constant offset c -> loss c^2 (use an offset that stays in range)
    base = rng.uniform(0.2, 0.6, size=(8, 8, 3))
    off = photometric_loss(Tensor(base + 0.1), base, mu=0.0)
    assert abs(off.item() - 0.01) < 1e-12

    def perceptual(p, g):
        return tmean(p) * 0.0 + 3.0

    loss = photometric_loss(Tensor(base), base, mu=0.5, perceptual=perceptual)
    assert abs(loss.item() - 1.5) < 1e-12
    with pytest.raises(ValueError):
        photometric_loss(Tensor(np.zeros((2, 2))), np.zeros((3, 3)))


def test_perceptual_registry():
    register_perceptual("probe2", lambda p, g: 0.0)
    assert get_perceptual("probe2") is not None
    assert get_perceptual(None) is None
    with pytest.raises(ValueError):
        get_perceptual("missing")


def test_psnr_values():
    base = np.full((16, 16, 3), 0.5)
    off = base + 0.1  # mse 0.01
    assert abs(psnr(off, base) - 20.0) < 1e-12
    assert psnr(base, base) == 99.0
    # halving residuals adds 20 log10(2) dB
    a = psnr(base + 0.1, base)
    b = psnr(base + 0.05, base)
    assert abs((b - a) - 20 * math.log10(2)) < 1e-10


def test_ssim_self_is_one():
    rng = np.random.default_rng(3)
    img = rng.uniform(size=(32, 32, 3))
    assert abs(ssim(img, img) - 1.0) < 1e-12


def test_ssim_anticorrelated_is_negative():
    rng = np.random.default_rng(4)
    pattern = 0.5 + 0.4 * np.sign(rng.normal(size=(32, 32)))
    assert ssim(1.0 - pattern, pattern) < 0.0


def test_ssim_constant_images_formula():
    # closed form evaluated independently: (2ab + C1) / (a^2 + b^2 + C1)
    a, b = 0.3, 0.6
    expect = (2 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)
    got = ssim(np.full((32, 32), a), np.full((32, 32), b))
    assert abs(got - expect) < 1e-12


def test_ssim_small_image_fallback():
    rng = np.random.default_rng(5)
    img = rng.uniform(size=(5, 5, 3))
    assert abs(ssim(img, img) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((5, 5)))
