"""In-memory JPEG lossy round trip (encode then decode, no entropy coding).

Images are ``uint8`` arrays of shape ``(H, W, 3)`` holding interleaved RGB.
Every stage rounds half away from zero, so results are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BLOCK = 8

# ITU-T T.81 Annex K, tables K.1 and K.2 (natural row-major order).
BASE_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)

BASE_CHROMA_TABLE = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
], dtype=np.int64)


def _dct_matrix() -> np.ndarray:
    k = np.arange(BLOCK)
    m = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / (2 * BLOCK))
    m *= 0.5
    m[0, :] *= 1.0 / np.sqrt(2.0)
    return m


# Row u holds the u-th orthonormal DCT-II basis vector.
DCT_MATRIX = _dct_matrix()


@dataclass(frozen=True)
class YCbCrPlanes:
    """Luma and chroma planes as ``uint8`` arrays.

    Chroma planes are either at luma resolution or 4:2:0 subsampled
    (``ceil(h / 2) x ceil(w / 2)``).
    """

    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    @property
    def luma_dims(self) -> tuple[int, int]:
        return self.y.shape

    @property
    def chroma_dims(self) -> tuple[int, int]:
        return self.cb.shape


def round_half_away(x):
    """Round to nearest integer, ties away from zero (``np.round`` ties to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected uint8 array of shape (H, W, 3), got {img.dtype} {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("image must have positive width and height")
    return img


def check_quality(quality: int) -> int:
    if isinstance(quality, bool) or int(quality) != quality:
        raise ValueError(f"quality must be an integer, got {quality!r}")
    quality = int(quality)
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    return quality


def rgb_to_ycbcr(img: np.ndarray) -> YCbCrPlanes:
    """Full-range BT.601 (JFIF) conversion; chroma stays at full resolution."""
    img = check_image(img)
    rgb = img.astype(np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return YCbCrPlanes(_to_u8(y), _to_u8(cb), _to_u8(cr))


def ycbcr_to_rgb(planes: YCbCrPlanes) -> np.ndarray:
    if not (planes.y.shape == planes.cb.shape == planes.cr.shape):
        raise ValueError(
            f"plane dimensions differ: y {planes.y.shape}, cb {planes.cb.shape}, cr {planes.cr.shape}"
        )
    y = planes.y.astype(np.float64)
    cb = planes.cb.astype(np.float64) - 128.0
    cr = planes.cr.astype(np.float64) - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return _to_u8(np.stack([r, g, b], axis=-1))


def subsample_420(plane: np.ndarray) -> np.ndarray:
    """Average each 2x2 tile; odd edges are replicated first."""
    plane = np.asarray(plane)
    h, w = plane.shape
    padded = np.pad(plane.astype(np.float64), ((0, h % 2), (0, w % 2)), mode="edge")
    tiles = padded.reshape(padded.shape[0] // 2, 2, padded.shape[1] // 2, 2)
    return _to_u8(tiles.mean(axis=(1, 3)))


def upsample_420(plane: np.ndarray, target_dims: tuple[int, int]) -> np.ndarray:
    plane = np.asarray(plane)
    th, tw = target_dims
    if plane.shape != ((th + 1) // 2, (tw + 1) // 2):
        raise ValueError(f"chroma dims {plane.shape} inconsistent with target {target_dims}")
    return np.repeat(np.repeat(plane, 2, axis=0), 2, axis=1)[:th, :tw]


def dct2d_8x8(block: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of one block, or a stack of blocks ``(..., 8, 8)``."""
    block = np.asarray(block, dtype=np.float64)
    return DCT_MATRIX @ block @ DCT_MATRIX.T


def idct2d_8x8(coeffs: np.ndarray) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=np.float64)
    return DCT_MATRIX.T @ coeffs @ DCT_MATRIX


def build_quant_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """Luma and chroma tables scaled from the Annex-K bases (IJG convention)."""
    quality = check_quality(quality)
    scale = 5000 // quality if quality < 50 else 200 - 2 * quality

    def scaled(base):
        return np.clip((base * scale + 50) // 100, 1, 255)

    return scaled(BASE_LUMA_TABLE), scaled(BASE_CHROMA_TABLE)


def quantize_dequantize(coeffs: np.ndarray, table: np.ndarray) -> np.ndarray:
    table = np.asarray(table, dtype=np.float64)
    return round_half_away(np.asarray(coeffs, dtype=np.float64) / table) * table


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // BLOCK, BLOCK, w // BLOCK, BLOCK).swapaxes(1, 2)


def _from_blocks(blocks: np.ndarray) -> np.ndarray:
    bh, bw = blocks.shape[:2]
    return blocks.swapaxes(1, 2).reshape(bh * BLOCK, bw * BLOCK)


def _code_plane(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    pad = ((0, -h % BLOCK), (0, -w % BLOCK))
    samples = np.pad(plane, pad, mode="edge").astype(np.float64) - 128.0
    coeffs = dct2d_8x8(_to_blocks(samples))
    recon = _from_blocks(idct2d_8x8(quantize_dequantize(coeffs, table))) + 128.0
    return _to_u8(recon)[:h, :w]


def compress(img: np.ndarray, quality: int) -> np.ndarray:
    """Return ``img`` after a JPEG encode/decode round trip at ``quality``."""
    img = check_image(img)
    luma_table, chroma_table = build_quant_tables(quality)
    planes = rgb_to_ycbcr(img)
    h, w = planes.luma_dims
    y = _code_plane(planes.y, luma_table)
    cb = upsample_420(_code_plane(subsample_420(planes.cb), chroma_table), (h, w))
    cr = upsample_420(_code_plane(subsample_420(planes.cr), chroma_table), (h, w))
    return ycbcr_to_rgb(YCbCrPlanes(y, cb, cr))


def compress_batch(images: np.ndarray, quality: int) -> np.ndarray:
    """Apply :func:`compress` to each image of an ``(N, H, W, 3)`` stack."""
    images = np.asarray(images)
    out = np.empty_like(images)
    for i, img in enumerate(images):
        out[i] = compress(img, quality)
    return out
