import math
import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .logutils import sgsflogger, logfile

__author__ = 'SGSFormerTools developers'
"""Image quality metrics on images in [0, 1]: PSNR and SSIM (11x11 Gaussian
window, sigma 1.5, K1 = 0.01, K2 = 0.03, data range 1). The differentiable
forms are shared with the training loss.
"""

logger = sgsflogger(__name__, logfile)

MSE_FLOOR = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_array(img):
    img = img.data if isinstance(img, Tensor) else img
    return np.asarray(img, dtype=np.float64)


def psnr(a, b):
    """10 log10(1 / max(MSE, 1e-10)) in dB
    :rtype: float
    """
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        logger.error("psnr: shapes {0} and {1} differ".format(a.shape, b.shape))
        raise ValueError("psnr: shapes {0} and {1} differ".format(a.shape, b.shape))
    mse = float(np.mean((a - b) ** 2))
    return 10.0 * math.log10(1.0 / max(mse, MSE_FLOOR))


def psnr_tensor(a, b):
    """Differentiable PSNR in dB (gradient vanishes on the MSE floor)"""
    diff = T.sub(a, b)
    mse = T.clamp(T.mean(diff * diff), lo=MSE_FLOOR)
    return T.log(mse) * (-10.0 / math.log(10.0))


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    coords = np.arange(size, dtype=np.float64) - size // 2
    g = np.exp(-coords ** 2 / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _window_size(height, width):
    size = min(SSIM_WINDOW, height, width)
    return size if size % 2 else size - 1


def ssim_tensor(a, b):
    """Differentiable mean SSIM over channels and valid window positions.
    :param a: images [N, C, H, W] or [C, H, W]
    :type a: Tensor
    :param b: images of the same shape
    :type b: Tensor
    :rtype: Tensor
    """
    a, b = T.tensor(a), T.tensor(b)
    if a.shape != b.shape:
        logger.error("ssim: shapes {0} and {1} differ".format(a.shape, b.shape))
        raise ValueError("ssim: shapes {0} and {1} differ".format(a.shape, b.shape))
    height, width = a.shape[-2:]
    planes = int(np.prod(a.shape[:-2]))
    a = T.reshape(a, (planes, 1, height, width))
    b = T.reshape(b, (planes, 1, height, width))
    size = _window_size(height, width)
    window = Tensor(gaussian_window(size).astype(a.dtype)[None, None])
    half = size // 2

    def _filter(x):
        return T.crop(T.conv2d(x, window), half, half, height - 2 * half, width - 2 * half)

    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    mu_a, mu_b = _filter(a), _filter(b)
    mu_aa, mu_bb, mu_ab = mu_a * mu_a, mu_b * mu_b, mu_a * mu_b
    var_a = _filter(a * a) - mu_aa
    var_b = _filter(b * b) - mu_bb
    cov = _filter(a * b) - mu_ab
    numerator = (mu_ab * 2.0 + c1) * (cov * 2.0 + c2)
    denominator = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return T.mean(numerator / denominator)


def ssim(a, b):
    """Mean SSIM of two images in [0, 1]
    :rtype: float
    """
    with no_grad():
        return ssim_tensor(Tensor(_as_array(a)), Tensor(_as_array(b))).item()
