"""Image I/O: 8-bit PNG for display outputs, raw float32 for lossless
intermediates (magic 'RAFF', then W, H, C as u32 and row-major f32 payload,
little-endian)."""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

RAFF_MAGIC = b"RAFF"


def quantize_u8(img: np.ndarray) -> np.ndarray:
    """Round-half-up quantization of [0,1] floats to bytes."""
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(quantize_u8(img)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_raff(path, img: np.ndarray) -> None:
    arr = np.ascontiguousarray(img, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(RAFF_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(arr.tobytes())


def load_raff(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RAFF_MAGIC:
            raise ValueError(f"bad float-image magic {magic!r}")
        w, h, c = struct.unpack("<III", fh.read(12))
        payload = fh.read(4 * w * h * c)
        if len(payload) != 4 * w * h * c:
            raise ValueError("truncated float-image file")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float64)


def save_image(path, img: np.ndarray) -> None:
    path = str(path)
    if path.endswith(".png"):
        save_png(path, img)
    elif path.endswith(".raff"):
        save_raff(path, img)
    else:
        raise ValueError(f"unsupported image extension: {path}")


def load_image(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".png"):
        return load_png(path)
    if path.endswith(".raff"):
        return load_raff(path)
    raise ValueError(f"unsupported image extension: {path}")
