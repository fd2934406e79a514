"""JPEG-style compression baseline: 8x8 block DCT with quality-scaled quantization.

Only the lossy part of the codec is modelled (no chroma subsampling, no
entropy coding); every channel uses the standard luminance table.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

BLOCK = 8

LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


@lru_cache(maxsize=None)
def dct_matrix(n: int = BLOCK) -> np.ndarray:
    """Orthonormal DCT-II matrix ``C`` so that ``C @ x`` transforms columns."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    c = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * i + 1) * k / (2 * n))
    c[0] /= np.sqrt(2.0)
    return c


def quant_table(quality: int) -> np.ndarray:
    """IJG scaling of the luminance table; entries clipped to [1, 255]."""
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((LUMINANCE_TABLE * scale + 50) / 100), 1, 255)


def _blocks(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """(..., H, W) -> (..., H/8, W/8, 8, 8) with edge padding to a multiple of 8."""
    h, w = x.shape[-2:]
    ph, pw = -h % BLOCK, -w % BLOCK
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    x = np.pad(x, pad, mode="edge")
    hb, wb = x.shape[-2] // BLOCK, x.shape[-1] // BLOCK
    b = x.reshape(x.shape[:-2] + (hb, BLOCK, wb, BLOCK)).swapaxes(-3, -2)
    return b, (h, w)


def _unblocks(b: np.ndarray, size: tuple) -> np.ndarray:
    hb, wb = b.shape[-4:-2]
    x = b.swapaxes(-3, -2).reshape(b.shape[:-4] + (hb * BLOCK, wb * BLOCK))
    return x[..., :size[0], :size[1]]


def jpeg_defense(image, quality: int = 75) -> np.ndarray:
    """Re-encode images in [0, 1] (CHW or NCHW) through block-DCT quantization.

    Output is rounded to 8-bit levels and returned in [0, 1].
    """
    q = quant_table(quality)
    c = dct_matrix()
    x = np.asarray(image, dtype=np.float64)
    blocks, size = _blocks(np.round(np.clip(x, 0, 1) * 255) - 128)
    coef = c @ blocks @ c.T
    coef = np.round(coef / q) * q
    recon = _unblocks(c.T @ coef @ c, size)
    return np.clip(np.round(recon + 128), 0, 255) / 255.0
