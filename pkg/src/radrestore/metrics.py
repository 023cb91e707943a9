"""Image quality and diversity metrics.

PSNR/SSIM/hf_energy are plain numpy functions; the perceptual proxy is a
differentiable torch function standing in for a learned patch similarity,
pluggable anywhere a DistanceFn is expected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

PSNR_CAP_DB = 99.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(peak ** 2 / mse), PSNR_CAP_DB)


def ssim(a, b) -> float:
    """Single-scale SSIM: 11x11 Gaussian window sigma=1.5, C1=0.01^2,
    C2=0.03^2 on the [0,1] scale, averaged over valid pixels and channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if min(a.shape[0], a.shape[1]) < 11:
        raise ValueError("image smaller than the 11x11 SSIM window")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    sigma, radius = 1.5, 5
    truncate = radius / sigma

    def filt(x):
        return ndimage.gaussian_filter(x, sigma=sigma, truncate=truncate, mode="reflect")

    vals = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        ux, uy = filt(x), filt(y)
        uxx, uyy, uxy = filt(x * x), filt(y * y), filt(x * y)
        vx = uxx - ux * ux
        vy = uyy - uy * uy
        vxy = uxy - ux * uy
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux ** 2 + uy ** 2 + c1) * (vx + vy + c2))
        vals.append(s[radius:-radius, radius:-radius].mean())
    return float(np.mean(vals))


def _luminance(img: torch.Tensor) -> torch.Tensor:
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def _downsample2(img: torch.Tensor) -> torch.Tensor:
    h = (img.shape[0] // 2) * 2
    w = (img.shape[1] // 2) * 2
    x = img[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def perceptual_proxy(a, b, levels: int = 3):
    """Pyramid gradient distance: per level, mean squared differences of RGB
    and of the luminance horizontal/vertical gradients, weighted 1/levels.

    Differentiable when given torch inputs; returns a float otherwise.
    """
    torch_in = isinstance(a, torch.Tensor) or isinstance(b, torch.Tensor)
    ta = a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a, dtype=np.float64))
    tb = b if isinstance(b, torch.Tensor) else torch.as_tensor(np.asarray(b, dtype=np.float64))
    if ta.shape != tb.shape:
        raise ValueError(f"extent mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    ca, cb = ta, tb
    total = 0.0
    for _ in range(levels):
        diff = ca - cb
        gd = _luminance(ca) - _luminance(cb)
        gx = gd[:, 1:] - gd[:, :-1]
        gy = gd[1:, :] - gd[:-1, :]
        total = total + (diff ** 2).mean() + (gx ** 2).mean() + (gy ** 2).mean()
        if min(ca.shape[0], ca.shape[1]) < 4:
            break
        ca, cb = _downsample2(ca), _downsample2(cb)
    total = total / levels
    return total if torch_in else float(total)


@dataclass
class DistanceFn:
    """Named nonnegative symmetric image-pair distance."""

    name: str
    fn: callable

    def __call__(self, a, b):
        return self.fn(a, b)


PERCEPTUAL_PROXY = DistanceFn("perceptual_proxy", perceptual_proxy)


def diversity_score(images, d=PERCEPTUAL_PROXY) -> float:
    """Mean over images of the minimum distance to any other image in the set."""
    images = list(images)
    if len(images) < 2:
        raise ValueError("diversity score needs at least two images")
    minima = []
    for i, a in enumerate(images):
        dist = [float(d(a, b)) for j, b in enumerate(images) if j != i]
        minima.append(min(dist))
    return float(sum(minima) / len(images))


_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def hf_energy(img) -> float:
    """Mean squared 3x3 Laplacian response (sharpness proxy)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=2)
    resp = ndimage.convolve(img, _LAPLACIAN, mode="reflect")
    if min(img.shape) > 2:
        resp = resp[1:-1, 1:-1]
    return float(np.mean(resp ** 2))
