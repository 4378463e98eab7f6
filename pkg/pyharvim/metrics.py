"""
Image quality metrics on [0, 1] grayscale images.
"""
import logging
import math

import numpy as np
from scipy.signal import convolve2d

from .const import PSNR_CAP, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW
from .exceptions import ShapeMismatchException
from .tensor import Tensor
from .utils import image_side_of

_LOGGER = logging.getLogger(__name__)


def _as_image(value) -> np.ndarray:
    data = value.numpy() if isinstance(value, Tensor) else np.asarray(value)
    data = data.astype(np.float64)
    if data.ndim == 1:
        side = image_side_of(data.size)
        return data.reshape(side, side)
    return data


def _pair(a, b):
    a, b = _as_image(a), _as_image(b)
    if a.shape != b.shape:
        raise ShapeMismatchException(f"images differ in shape: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """ 10 log10(1 / MSE) in dB, capped at PSNR_CAP """
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    profile = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    window = np.outer(profile, profile)
    return window / window.sum()


def ssim(a, b) -> float:
    """ Mean SSIM over the valid positions of an 11x11 Gaussian window """
    a, b = _pair(a, b)
    window = gaussian_window()
    if a.shape[0] < window.shape[0] or a.shape[1] < window.shape[1]:
        raise ShapeMismatchException(f"SSIM needs images of at least {window.shape}, got {a.shape}")

    def filtered(image):
        return convolve2d(image, window, mode="valid")

    mu_a, mu_b = filtered(a), filtered(b)
    var_a = filtered(a * a) - mu_a ** 2
    var_b = filtered(b * b) - mu_b ** 2
    covariance = filtered(a * b) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * covariance + SSIM_C2)
    denominator = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(numerator / denominator))


METRICS = {"psnr": psnr, "ssim": ssim}


def v_metric(reconstruction, observation, x_true, metric) -> float:
    """ metric(reconstruction, x_T) - metric(observation, x_T); metric is a callable or a METRICS name """
    if isinstance(metric, str):
        metric = METRICS[metric]
    return metric(reconstruction, x_true) - metric(observation, x_true)
