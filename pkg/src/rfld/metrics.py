"""Image quality metrics: MSE, PSNR, and windowed SSIM.

PSNR returns +inf for identical images.  SSIM uses the reference parameters
(11x11 Gaussian window, sigma 1.5, c1 = (0.01*MAX)^2, c2 = (0.03*MAX)^2) over
the valid region only; color images score as the mean of per-channel SSIM.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(reference, test, max_value: float):
    ref = np.asarray(reference, dtype=np.float64)
    tst = np.asarray(test, dtype=np.float64)
    if ref.shape != tst.shape:
        raise ValueError(f"image dimensions differ: {ref.shape} vs {tst.shape}")
    if ref.ndim == 3 and ref.shape[-1] not in (1, 3):
        raise ValueError(f"channel count must be 1 or 3, got {ref.shape[-1]}")
    if ref.ndim not in (2, 3):
        raise ValueError(f"images must be HxW or HxWxC, got shape {ref.shape}")
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    return ref, tst


@dataclass(frozen=True)
class ImagePair:
    """Reference/test images with their declared peak value (255 or 1.0)."""

    reference: np.ndarray
    test: np.ndarray
    max_value: float = 1.0

    def __post_init__(self):
        ref, tst = _check_pair(self.reference, self.test, self.max_value)
        slack = 1e-9 * self.max_value
        for name, img in (("reference", ref), ("test", tst)):
            if img.min() < -slack or img.max() > self.max_value + slack:
                raise ValueError(f"{name} values fall outside [0, {self.max_value}]")
        object.__setattr__(self, "reference", ref)
        object.__setattr__(self, "test", tst)

    def mse(self) -> float:
        return mse(self.reference, self.test)

    def psnr(self) -> float:
        return psnr(self.reference, self.test, self.max_value)

    def ssim(self) -> float:
        return ssim(self.reference, self.test, self.max_value)


def mse(reference, test) -> float:
    """Mean squared difference over all pixels (and channels)."""
    ref, tst = _check_pair(reference, test, 1.0)
    diff = ref - tst
    return float(np.mean(diff * diff))


def psnr(reference, test, max_value: float = 1.0) -> float:
    """10*log10(MAX^2 / MSE) in dB; +inf when the images are identical."""
    err = mse(_check_pair(reference, test, max_value)[0], test)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / err)


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable correlation with a 1D kernel along both axes, valid region."""
    k = kernel.size
    h = img.shape[0] - k + 1
    out = np.zeros((h, img.shape[1]))
    for i, kv in enumerate(kernel):
        out += kv * img[i : i + h, :]
    w = img.shape[1] - k + 1
    res = np.zeros((h, w))
    for i, kv in enumerate(kernel):
        res += kv * out[:, i : i + w]
    return res


def _ssim_channel(x: np.ndarray, y: np.ndarray, max_value: float) -> float:
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * max_value) ** 2
    c2 = (SSIM_K2 * max_value) ** 2
    mu_x = _filter_valid(x, kernel)
    mu_y = _filter_valid(y, kernel)
    xx = _filter_valid(x * x, kernel) - mu_x * mu_x
    yy = _filter_valid(y * y, kernel) - mu_y * mu_y
    xy = _filter_valid(x * y, kernel) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


def ssim(reference, test, max_value: float = 1.0) -> float:
    """Mean local structural similarity in [-1, 1]; 1 means identical."""
    ref, tst = _check_pair(reference, test, max_value)
    if ref.shape[0] < SSIM_WINDOW or ref.shape[1] < SSIM_WINDOW:
        raise ValueError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM"
        )
    if ref.ndim == 2:
        return _ssim_channel(ref, tst, max_value)
    scores = [
        _ssim_channel(ref[:, :, c], tst[:, :, c], max_value)
        for c in range(ref.shape[-1])
    ]
    return float(np.mean(scores))
