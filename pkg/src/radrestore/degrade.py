"""Seeded, bit-reproducible image degradation stages and the oracle restorer.

Images are H x W x 3 float64 arrays in [0, 1]; every stage clamps back into
range. Stage randomness is driven entirely by explicit seeds so datasets can
be regenerated byte-for-byte.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy import ndimage
from scipy.fft import dctn, idctn
from scipy.interpolate import CubicSpline


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("non-finite image values")
    return img


def downsample(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter average over factor x factor blocks (crops to a multiple)."""
    img = _check_image(img)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return img.copy()
    h = (img.shape[0] // factor) * factor
    w = (img.shape[1] // factor) * factor
    img = img[:h, :w]
    return img.reshape(h // factor, factor, w // factor, factor, 3).mean(axis=(1, 3))


def convolve_blur(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """2D convolution per channel with reflect padding."""
    img = _check_image(img)
    kernel = np.asarray(kernel, dtype=np.float64)
    if (kernel < 0).any():
        raise ValueError("kernel entries must be nonnegative")
    s = kernel.sum()
    if abs(s - 1.0) > 1e-12:
        warnings.warn("kernel does not sum to 1; normalizing")
        kernel = kernel / s
    out = np.empty_like(img)
    for c in range(3):
        out[:, :, c] = ndimage.convolve(img[:, :, c], kernel, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def gaussian_kernel(radius: int) -> np.ndarray:
    """'Radius r' blur: sigma = r/3 over a (2r+1)^2 support, normalized."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return np.ones((1, 1))
    sigma = radius / 3.0
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return _check_image(img).copy()
    return convolve_blur(img, gaussian_kernel(radius))


def motion_kernel(size: int, seed: int) -> np.ndarray:
    """Camera-motion blur kernel: a seeded smooth random path (cubic spline
    through random control points) splatted with bilinear antialiasing into
    a size x size grid, then normalized."""
    if size % 2 == 0 or size < 3:
        raise ValueError("kernel size must be odd and >= 3")
    rng = np.random.default_rng(seed)
    n_ctrl = 5
    extent = 0.5 * (size - 2)
    ctrl = rng.uniform(-extent, extent, size=(n_ctrl, 2))
    ctrl -= ctrl.mean(axis=0)
    u = np.linspace(0.0, 1.0, n_ctrl)
    spline_x = CubicSpline(u, ctrl[:, 0])
    spline_y = CubicSpline(u, ctrl[:, 1])
    tt = np.linspace(0.0, 1.0, 64 * size)
    path = np.stack([spline_x(tt), spline_y(tt)], axis=-1)
    center = 0.5 * (size - 1)
    kernel = np.zeros((size, size))
    px = np.clip(path[:, 0] + center, 0.0, size - 1 - 1e-9)
    py = np.clip(path[:, 1] + center, 0.0, size - 1 - 1e-9)
    ix, iy = px.astype(int), py.astype(int)
    fx, fy = px - ix, py - iy
    np.add.at(kernel, (iy, ix), (1 - fx) * (1 - fy))
    np.add.at(kernel, (iy, ix + 1), fx * (1 - fy))
    np.add.at(kernel, (iy + 1, ix), (1 - fx) * fy)
    np.add.at(kernel, (iy + 1, ix + 1), fx * fy)
    return kernel / kernel.sum()


def shot_read_noise(img: np.ndarray, delta_r: float, delta_s: float, seed: int,
                    clamp: bool = True) -> np.ndarray:
    """Per-pixel Gaussian with variance delta_r^2 + delta_s^2 * I^2."""
    img = _check_image(img)
    if delta_r < 0 or delta_s < 0:
        raise ValueError("noise parameters must be >= 0")
    if delta_r == 0 and delta_s == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    std = np.sqrt(delta_r ** 2 + (delta_s * img) ** 2)
    noisy = img + rng.standard_normal(img.shape) * std
    return np.clip(noisy, 0.0, 1.0) if clamp else noisy


# preset matching the "gain 8" noise strength; both parameters stay configurable
GAIN_PRESETS = {"gain8": (0.08, 0.04)}


# baseline JPEG quantization tables (luminance, chrominance)
_JPEG_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)
_JPEG_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99]], dtype=np.float64)


def _scaled_table(table: np.ndarray, quality: int) -> np.ndarray:
    if not 1 <= quality <= 100:
        raise ValueError("quality must be in [1, 100]")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((table * scale + 50.0) / 100.0), 1.0, 255.0)


def _pad_to_multiple(plane: np.ndarray, m: int) -> np.ndarray:
    h, w = plane.shape
    ph, pw = (-h) % m, (-w) % m
    return np.pad(plane, ((0, ph), (0, pw)), mode="edge")


def _quantize_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Blockwise DCT, quantize, dequantize, inverse DCT on a level-shifted plane."""
    h, w = plane.shape
    blocks = plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)
    coeffs = dctn(blocks, axes=(2, 3), norm="ortho") * 4.0  # match JPEG DCT scaling
    quant = np.round(coeffs / table) * table
    rec = idctn(quant / 4.0, axes=(2, 3), norm="ortho")
    return rec.transpose(0, 2, 1, 3).reshape(h, w)


def jpeg_codec(img: np.ndarray, quality: int) -> np.ndarray:
    """Baseline JPEG reconstruction: YCbCr, 4:2:0 chroma, 8x8 DCT with
    quality-scaled quantization tables. Entropy coding is lossless and is
    skipped; quantization reproduces exactly what a baseline codec keeps."""
    img = _check_image(img)
    h, w = img.shape[:2]
    r, g, b = (img[:, :, i] * 255.0 for i in range(3))
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    lt = _scaled_table(_JPEG_LUMA, quality)
    ct = _scaled_table(_JPEG_CHROMA, quality)
    y_rec = _quantize_plane(_pad_to_multiple(y, 8) - 128.0, lt)[:h, :w] + 128.0
    chroma_rec = []
    for plane in (cb, cr):
        p = _pad_to_multiple(plane, 16)
        sub = p.reshape(p.shape[0] // 2, 2, p.shape[1] // 2, 2).mean(axis=(1, 3))
        rec = _quantize_plane(sub - 128.0, ct) + 128.0
        # bilinear chroma upsampling, the usual decoder choice
        sh, sw = rec.shape
        up = ndimage.map_coordinates(
            rec,
            np.meshgrid(np.clip((np.arange(p.shape[0]) - 0.5) / 2.0, 0, sh - 1),
                        np.clip((np.arange(p.shape[1]) - 0.5) / 2.0, 0, sw - 1),
                        indexing="ij"),
            order=1, mode="nearest")
        chroma_rec.append(up[:h, :w])
    cb_r, cr_r = chroma_rec
    r2 = y_rec + 1.402 * (cr_r - 128.0)
    g2 = y_rec - 0.344136 * (cb_r - 128.0) - 0.714136 * (cr_r - 128.0)
    b2 = y_rec + 1.772 * (cb_r - 128.0)
    out = np.stack([r2, g2, b2], axis=-1) / 255.0
    return np.clip(out, 0.0, 1.0)


# --- stage configuration -------------------------------------------------

@dataclass
class Downsample:
    factor: int

    def apply(self, img, seed):
        return downsample(img, self.factor)


@dataclass
class GaussianBlur:
    radius: int

    def apply(self, img, seed):
        return gaussian_blur(img, self.radius)


@dataclass
class MotionBlur:
    size: int = 13
    path_seed: int = 0

    def apply(self, img, seed):
        return convolve_blur(img, motion_kernel(self.size, seed))


@dataclass
class ShotReadNoise:
    read: float = 0.08
    shot: float = 0.04
    seed: int = 0

    def apply(self, img, seed):
        return shot_read_noise(img, self.read, self.shot, seed)


@dataclass
class Jpeg:
    quality: int = 50

    def apply(self, img, seed):
        return jpeg_codec(img, self.quality)


STAGE_TYPES = {
    "downsample": Downsample,
    "gaussian_blur": GaussianBlur,
    "motion_blur": MotionBlur,
    "shot_read_noise": ShotReadNoise,
    "jpeg": Jpeg,
}


@dataclass
class DegradationConfig:
    """Ordered degradation stages; per_view_kernel controls whether stage
    randomness (motion kernels, noise) is redrawn per view or shared."""

    stages: list = dc_field(default_factory=list)
    per_view_kernel: bool = True

    def apply(self, img: np.ndarray, view_index: int = 0) -> np.ndarray:
        out = np.asarray(img, dtype=np.float64)
        for k, stage in enumerate(self.stages):
            base = getattr(stage, "path_seed", getattr(stage, "seed", 0))
            stage_seed = base * 100003 + k * 1009
            if self.per_view_kernel:
                stage_seed += view_index * 7919
            out = stage.apply(out, stage_seed)
        return out

    @classmethod
    def from_dicts(cls, stage_dicts, per_view_kernel: bool = True) -> "DegradationConfig":
        stages = []
        for d in stage_dicts:
            d = dict(d)
            kind = d.pop("type")
            stages.append(STAGE_TYPES[kind](**d))
        return cls(stages, per_view_kernel)


def mixed_pipeline_config(scene_type: str = "object", seed: int = 0) -> DegradationConfig:
    """Gaussian blur -> shot/read noise (std 25/255) -> JPEG q=50, in order.

    Blur radius 7 for object scenes, 3 for forward-facing ones.
    """
    radius = 7 if scene_type == "object" else 3
    return DegradationConfig([
        GaussianBlur(radius),
        ShotReadNoise(read=25.0 / 255.0, shot=0.0, seed=seed),
        Jpeg(50),
    ])


def oracle_restore(clean: np.ndarray, degraded: np.ndarray, inconsistency: float,
                   seed: int) -> np.ndarray:
    """Stand-in for per-view 2D restoration: sharp output with controlled
    multi-view inconsistency.

    The clean image is warped by a seeded smooth random displacement field
    with RMS displacement `inconsistency` pixels, plus a high-frequency
    texture perturbation of proportional amplitude. Each view gets its own
    seed, so restored views disagree with one another but stay sharp.
    """
    clean = _check_image(clean)
    degraded = _check_image(degraded)
    if clean.shape != degraded.shape:
        raise ValueError("clean and degraded extents differ (upsample first)")
    a = float(inconsistency)
    if a < 0:
        raise ValueError("inconsistency amplitude must be >= 0")
    if a == 0.0:
        return clean.copy()
    h, w = clean.shape[:2]
    rng = np.random.default_rng(seed)
    grid = 6
    low = rng.standard_normal((2, grid, grid))
    disp = np.stack([ndimage.zoom(low[i], (h / grid, w / grid), order=1,
                                  mode="reflect", grid_mode=True) for i in range(2)])
    rms = np.sqrt((disp ** 2).sum(axis=0).mean())
    disp *= a / max(rms, 1e-12)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + disp[0], xx + disp[1]])
    warped = np.stack([ndimage.map_coordinates(clean[:, :, c], coords, order=1,
                                               mode="reflect") for c in range(3)], axis=-1)
    texture = rng.standard_normal(clean.shape)
    texture -= ndimage.gaussian_filter(texture, sigma=(1.5, 1.5, 0))
    warped = warped + 0.02 * a * texture
    return np.clip(warped, 0.0, 1.0)
