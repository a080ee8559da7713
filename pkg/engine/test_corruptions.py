"""Corruption checks.

Run with: python -m engine.test_corruptions
"""

import sys

import numpy as np
import torch

from engine.corruptions import (
    AugmentationPolicy,
    augment_batch,
    corrupt,
    corrupt_batch,
    gaussian_kernel,
)


def _image(seed=0, shape=(3, 8, 8)):
    return torch.rand(shape, generator=torch.Generator().manual_seed(seed))


def test_zero_noise_is_identity():
    img = _image()
    assert torch.equal(corrupt(img, "GAUSS_NOISE", {"sigma": 0.0}, seed=3), img)


def test_noise_is_seeded_and_clamped():
    img = _image()
    a = corrupt(img, "GAUSS_NOISE", {"sigma": 0.5}, seed=1)
    b = corrupt(img, "GAUSS_NOISE", {"sigma": 0.5}, seed=1)
    assert torch.equal(a, b)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0
    assert not torch.equal(a, img)


def test_full_frame_crop_is_bitwise_identity():
    img = _image()
    assert torch.equal(corrupt(img, "RANDOM_CROP", {"ratio": 1.0}, seed=5), img)


def test_crop_keeps_shape():
    img = _image(shape=(3, 16, 16))
    out = corrupt(img, "RANDOM_CROP", {"ratio": 0.5}, seed=2)
    assert out.shape == img.shape


def test_blur_matches_direct_convolution_on_interior():
    img = _image(shape=(1, 5, 5))
    out = corrupt(img, "GAUSS_BLUR", {"kernel": 3, "sigma": 1.0})
    kern = gaussian_kernel(3, 1.0)
    assert abs(kern.sum() - 1.0) < 1e-12
    arr = img[0].double().numpy()
    for r in range(1, 4):
        for c in range(1, 4):
            expected = float((kern * arr[r - 1:r + 2, c - 1:c + 2]).sum())
            assert abs(float(out[0, r, c]) - expected) < 1e-6


def test_blur_preserves_constant_image():
    img = torch.full((3, 6, 6), 0.4)
    out = corrupt(img, "GAUSS_BLUR", {"kernel": 5, "sigma": 1.5})
    assert torch.allclose(out, img, atol=1e-6)


def test_jpeg_roundtrip_shape_and_range():
    img = _image(shape=(3, 16, 16))
    out = corrupt(img, "JPEG", {"quality": 50})
    assert out.shape == img.shape and out.dtype == img.dtype
    assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0
    gray = corrupt(_image(shape=(1, 16, 16)), "JPEG", {"quality": 90})
    assert gray.shape == (1, 16, 16)


def test_invalid_params_rejected():
    img = _image()
    for kind, params in (("JPEG", {"quality": 0}), ("JPEG", {"quality": 101}),
                         ("GAUSS_NOISE", {"sigma": -0.1}), ("GAUSS_BLUR", {"kernel": 4, "sigma": 1.0}),
                         ("RANDOM_CROP", {"ratio": 0.0}), ("RANDOM_CROP", {"ratio": 1.2}),
                         ("ROTATE", {})):
        try:
            corrupt(img, kind, params)
            raise AssertionError(f"{kind} {params} accepted")
        except ValueError:
            pass


def test_policy_bounds_validated():
    for bad in ({"jpeg_quality": (90, 50)}, {"crop_ratio": (0.5, 1.5)}, {"probability": 2.0},
                {"enabled": ("ROTATE",)}, {"blur_kernel": (2, 4)}):
        try:
            AugmentationPolicy(**bad)
            raise AssertionError(f"{bad} accepted")
        except ValueError:
            pass


def test_augment_batch_deterministic_and_disabled_passthrough():
    images = torch.stack([_image(i) for i in range(6)])
    policy = AugmentationPolicy(probability=1.0)
    a = augment_batch(images, policy, seed=4)
    b = augment_batch(images, policy, seed=4)
    assert torch.equal(a, b)
    assert torch.equal(augment_batch(images, AugmentationPolicy.disabled(), seed=4), images)


def test_corrupt_batch_applies_to_every_image():
    images = torch.stack([_image(i) for i in range(3)])
    out = corrupt_batch(images, "GAUSS_BLUR", {"kernel": 3, "sigma": 1.0})
    assert out.shape == images.shape
    assert not torch.equal(out, images)


def main() -> int:
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith("test_") and callable(fn)]
    passed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"[PASS] {name}")
            passed += 1
        except Exception as exc:
            print(f"[FAIL] {name}: {type(exc).__name__}: {exc}")
    print(f"\n{passed}/{len(tests)} checks passed")
    return 0 if passed == len(tests) else 1


if __name__ == "__main__":
    sys.exit(main())
