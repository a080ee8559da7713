"""
SEAL Image Corruptions
JPEG compression, Gaussian noise, Gaussian blur and random crop, used both as
detector training augmentation and as the attacks in the robustness table.
Images are torch tensors (C, H, W) in [0, 1]; the pixel work is done by OpenCV.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Optional

import cv2
import numpy as np
import torch

from config.parameters import AUGMENTATION_DEFAULTS, CORRUPTION_KINDS

logger = logging.getLogger(__name__)


def _to_hwc(image: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(image.detach().cpu().numpy().transpose(1, 2, 0).astype(np.float32))


def _from_hwc(arr: np.ndarray, like: torch.Tensor) -> torch.Tensor:
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(like.dtype)


def validate_params(kind: str, params: dict) -> None:
    """Raise ValueError unless ``params`` are valid for ``kind``."""
    if kind == "JPEG":
        q = params.get("quality")
        if not isinstance(q, (int, np.integer)) or not 1 <= int(q) <= 100:
            raise ValueError(f"JPEG quality must be an integer in [1, 100], got {q!r}")
    elif kind == "GAUSS_NOISE":
        sigma = params.get("sigma")
        if sigma is None or not sigma >= 0:
            raise ValueError(f"Noise sigma must be >= 0, got {sigma!r}")
    elif kind == "GAUSS_BLUR":
        k, sigma = params.get("kernel"), params.get("sigma")
        if not isinstance(k, (int, np.integer)) or k < 1 or k % 2 == 0:
            raise ValueError(f"Blur kernel must be an odd positive integer, got {k!r}")
        if sigma is None or not sigma > 0:
            raise ValueError(f"Blur sigma must be > 0, got {sigma!r}")
    elif kind == "RANDOM_CROP":
        ratio = params.get("ratio")
        if ratio is None or not 0 < ratio <= 1:
            raise ValueError(f"Crop ratio must lie in (0, 1], got {ratio!r}")
    else:
        raise ValueError(f"Unknown corruption {kind!r}; choose from {CORRUPTION_KINDS}")


def gaussian_kernel(kernel: int, sigma: float) -> np.ndarray:
    """Normalised 2-D Gaussian kernel, identical to the one cv2.GaussianBlur applies."""
    k1 = cv2.getGaussianKernel(kernel, sigma, cv2.CV_64F)
    return k1 @ k1.T


def corrupt(image: torch.Tensor, kind: str, params: dict, seed: int = 0) -> torch.Tensor:
    """
    Apply one corruption to a (C, H, W) image in [0, 1].

    Args:
        kind: JPEG | GAUSS_NOISE | GAUSS_BLUR | RANDOM_CROP
        params: {"quality"} | {"sigma"} | {"kernel", "sigma"} | {"ratio"}
        seed: Drives the random noise / crop position

    Returns:
        Corrupted image, same shape and dtype.
    """
    validate_params(kind, params)
    if image.dim() != 3:
        raise ValueError(f"corrupt expects a (C, H, W) image, got shape {tuple(image.shape)}")
    c, h, w = image.shape

    if kind == "JPEG":
        arr = np.rint(np.clip(_to_hwc(image), 0.0, 1.0) * 255.0).astype(np.uint8)
        if c == 1:
            arr = arr[:, :, 0]
        ok, buf = cv2.imencode(".jpg", arr, [cv2.IMWRITE_JPEG_QUALITY, int(params["quality"])])
        if not ok:
            raise RuntimeError("OpenCV failed to JPEG-encode the image")
        decoded = cv2.imdecode(buf, cv2.IMREAD_UNCHANGED)
        return _from_hwc(decoded.astype(np.float32) / 255.0, image)

    if kind == "GAUSS_NOISE":
        sigma = float(params["sigma"])
        if sigma == 0:
            return image.clone()
        gen = torch.Generator().manual_seed(int(seed))
        noise = torch.randn(image.shape, generator=gen, dtype=torch.float64) * sigma
        return (image.to(torch.float64) + noise).clamp(0.0, 1.0).to(image.dtype)

    if kind == "GAUSS_BLUR":
        k = int(params["kernel"])
        sigma = float(params["sigma"])
        blurred = cv2.GaussianBlur(_to_hwc(image), (k, k), sigmaX=sigma, sigmaY=sigma,
                                   borderType=cv2.BORDER_REFLECT_101)
        return _from_hwc(blurred, image)

    # RANDOM_CROP
    ratio = float(params["ratio"])
    if ratio == 1.0:
        return image.clone()
    ch, cw = max(1, int(round(h * ratio))), max(1, int(round(w * ratio)))
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = _to_hwc(image)[top:top + ch, left:left + cw]
    resized = cv2.resize(crop, (w, h), interpolation=cv2.INTER_LINEAR)
    return _from_hwc(resized, image)


@dataclass(frozen=True)
class AugmentationPolicy:
    """Which corruptions to sample, their parameter ranges and the per-sample probability."""

    enabled: tuple[str, ...] = tuple(AUGMENTATION_DEFAULTS["enabled"])
    jpeg_quality: tuple[int, int] = tuple(AUGMENTATION_DEFAULTS["jpeg_quality"])
    noise_sigma: tuple[float, float] = tuple(AUGMENTATION_DEFAULTS["noise_sigma"])
    blur_kernel: tuple[int, int] = tuple(AUGMENTATION_DEFAULTS["blur_kernel"])
    blur_sigma: tuple[float, float] = tuple(AUGMENTATION_DEFAULTS["blur_sigma"])
    crop_ratio: tuple[float, float] = tuple(AUGMENTATION_DEFAULTS["crop_ratio"])
    probability: float = AUGMENTATION_DEFAULTS["probability"]

    def __post_init__(self):
        for name in ("enabled", "jpeg_quality", "noise_sigma", "blur_kernel", "blur_sigma", "crop_ratio"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        unknown = [k for k in self.enabled if k not in CORRUPTION_KINDS]
        if unknown:
            raise ValueError(f"Unknown corruption(s) {unknown}; choose from {CORRUPTION_KINDS}")
        ranges = {
            "jpeg_quality": (1, 100),
            "noise_sigma": (0.0, 1.0),
            "blur_kernel": (1, 31),
            "blur_sigma": (1e-6, 10.0),
            "crop_ratio": (1e-6, 1.0),
        }
        for name, (lo_bound, hi_bound) in ranges.items():
            lo, hi = getattr(self, name)
            if not lo_bound <= lo <= hi <= hi_bound:
                raise ValueError(f"{name} range {(lo, hi)} must be nonempty and inside [{lo_bound}, {hi_bound}]")
        if self.blur_kernel[0] % 2 == 0 or self.blur_kernel[1] % 2 == 0:
            raise ValueError(f"blur_kernel bounds must be odd, got {self.blur_kernel}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability must lie in [0, 1], got {self.probability}")

    @classmethod
    def disabled(cls) -> "AugmentationPolicy":
        return cls(enabled=(), probability=0.0)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "AugmentationPolicy":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def sample_params(self, kind: str, rng: np.random.Generator) -> dict:
        if kind == "JPEG":
            return {"quality": int(rng.integers(self.jpeg_quality[0], self.jpeg_quality[1] + 1))}
        if kind == "GAUSS_NOISE":
            return {"sigma": float(rng.uniform(*self.noise_sigma))}
        if kind == "GAUSS_BLUR":
            odd = list(range(self.blur_kernel[0], self.blur_kernel[1] + 1, 2))
            return {"kernel": int(rng.choice(odd)), "sigma": float(rng.uniform(*self.blur_sigma))}
        return {"ratio": float(rng.uniform(*self.crop_ratio))}


def augment_batch(images: torch.Tensor, policy: AugmentationPolicy, seed: int) -> torch.Tensor:
    """Independently corrupt each image with probability ``policy.probability``."""
    if not policy.enabled or policy.probability == 0 or images.shape[0] == 0:
        return images
    rng = np.random.default_rng(seed)
    out = images.clone()
    for i in range(images.shape[0]):
        if rng.random() >= policy.probability:
            continue
        kind = policy.enabled[int(rng.integers(len(policy.enabled)))]
        params = policy.sample_params(kind, rng)
        out[i] = corrupt(images[i], kind, params, seed=int(rng.integers(2**31)))
    return out


def corrupt_batch(images: torch.Tensor, kind: str, params: dict, seed: int = 0) -> torch.Tensor:
    """Apply the same corruption to every image (per-image seeds offset from ``seed``)."""
    if images.shape[0] == 0:
        return images.clone()
    return torch.stack([corrupt(img, kind, params, seed + i) for i, img in enumerate(images)])
