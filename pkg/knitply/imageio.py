import logging
import os

import numpy as np
from PIL import Image

from knitply.errors import ParseError

logger = logging.getLogger(__name__)


def write_pfm(image: np.ndarray, path: str) -> None:
    """
    Color PFM: "PF", "<width> <height>", "-1.0" (little endian), then float32 RGB rows bottom-up.
    """
    image = np.asarray(image, dtype='<f4')
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"Expected an (H, W, 3) image, got shape {image.shape}")
    height, width, _ = image.shape
    with open(path, 'wb') as f:
        f.write(f"PF\n{width} {height}\n-1.0\n".encode('ascii'))
        f.write(np.ascontiguousarray(image[::-1]).tobytes())
    logger.info(f"Wrote {width}x{height} PFM to '{path}'")


def read_pfm(path: str) -> np.ndarray:
    if not os.path.exists(path):
        raise ParseError(f"Image not found: {path}", stage='render')
    with open(path, 'rb') as f:
        data = f.read()
    try:
        magic, dims, scale, payload = data.split(b'\n', 3)
        width, height = (int(x) for x in dims.split())
        scale = float(scale)
    except ValueError:
        raise ParseError(f"Malformed PFM header in '{path}'", stage='render')
    if magic.strip() != b'PF':
        raise ParseError(f"'{path}' is not a color PFM (magic {magic[:4]!r})", stage='render')
    dtype = '<f4' if scale < 0 else '>f4'
    expected = width * height * 3 * 4
    if len(payload) != expected:
        raise ParseError(f"'{path}' holds {len(payload)} bytes of pixels, expected {expected}", stage='render')
    image = np.frombuffer(payload, dtype=dtype).reshape(height, width, 3)[::-1]
    return image.astype(np.float32) * abs(scale)


def to_srgb8(image: np.ndarray, exposure: float = 1.0) -> np.ndarray:
    """Exposure, clamp, sRGB transfer curve, 8-bit quantization."""
    linear = np.clip(np.asarray(image, dtype=float) * exposure, 0.0, 1.0)
    encoded = np.where(linear <= 0.0031308, 12.92 * linear, 1.055 * np.power(linear, 1 / 2.4) - 0.055)
    return np.round(encoded * 255.0).astype(np.uint8)


def from_srgb8(pixels: np.ndarray) -> np.ndarray:
    encoded = np.asarray(pixels, dtype=float) / 255.0
    return np.where(encoded <= 0.04045, encoded / 12.92, np.power((encoded + 0.055) / 1.055, 2.4))


def write_png(image: np.ndarray, path: str, exposure: float = 1.0) -> None:
    Image.fromarray(to_srgb8(image, exposure), mode='RGB').save(path)
    logger.info(f"Wrote PNG to '{path}'")


def read_image(path: str) -> np.ndarray:
    """Linear RGB float image from a PFM, or from any 8-bit format Pillow reads (decoded from sRGB)."""
    if path.lower().endswith('.pfm'):
        return read_pfm(path).astype(float)
    if not os.path.exists(path):
        raise ParseError(f"Image not found: {path}", stage='render')
    with Image.open(path) as img:
        return from_srgb8(np.asarray(img.convert('RGB')))


def box_downscale(image: np.ndarray, factor: float) -> np.ndarray:
    """Box filter to round(factor * size) pixels per axis (at least one)."""
    image = np.asarray(image, dtype=float)
    height, width = image.shape[:2]
    out_h, out_w = max(1, int(round(height * factor))), max(1, int(round(width * factor)))
    rows = np.linspace(0, height, out_h + 1).astype(int)
    cols = np.linspace(0, width, out_w + 1).astype(int)
    # cumulative sums give exact box averages over uneven blocks
    table = np.zeros((height + 1, width + 1) + image.shape[2:])
    table[1:, 1:] = image.cumsum(axis=0).cumsum(axis=1)
    total = table[rows[1:]][:, cols[1:]] - table[rows[:-1]][:, cols[1:]] - table[rows[1:]][:, cols[:-1]] \
        + table[rows[:-1]][:, cols[:-1]]
    area = np.outer(np.diff(rows), np.diff(cols))
    return total / (area[..., None] if image.ndim == 3 else area)
