"""Multi-scale cloud masks and cloudy-image compositing.

All arrays are NCHW (or CHW / HW where noted). Masks and exposure matrices
carry a single channel that broadcasts over the three colour channels.
"""

from __future__ import annotations

import math

import numpy as np

from advcloud.engine import Tensor, ops, seeded_rng
from advcloud.engine.ops import _interp_matrix
from advcloud.engine.tensor import ShapeError


def cloud_scales(h: int, w: int) -> range:
    return range(1, int(math.floor(math.log2(min(h, w)))) + 1)


def make_cloud_mask(h: int, w: int, rng: np.random.Generator | None = None, *,
                    noise=None) -> np.ndarray:
    """Cloud mask of shape (1, h, w) in [0, 1].

    Sum over scales s of a uniform ``2^s x 2^s`` noise grid, bilinearly
    resized to ``h x w`` and weighted by ``2^-s``. ``noise(s) -> array`` may
    replace the random draw (used to pin the zero/one cases).
    """
    if h < 2 or w < 2:
        raise ValueError(f"cloud mask needs H, W >= 2, got {h}x{w}")
    if noise is None:
        if rng is None:
            raise ValueError("make_cloud_mask needs an rng or a noise function")
        noise = lambda s: rng.uniform(0.0, 1.0, size=(2**s, 2**s))  # noqa: E731
    mask = np.zeros((h, w))
    for s in cloud_scales(h, w):
        grid = np.asarray(noise(s), dtype=np.float64)
        n = 2**s
        if grid.shape != (n, n):
            grid = np.broadcast_to(grid, (n, n))
        mask += _interp_matrix(h, n) @ grid @ _interp_matrix(w, n).T / n
    return np.clip(mask, 0.0, 1.0)[None]


def _check(op: str, image: Tensor, *maps: Tensor) -> None:
    for m in maps:
        try:
            shape = np.broadcast_shapes(image.shape, m.shape)
        except ValueError:
            raise ShapeError(op, image.shape, m.shape) from None
        if shape != image.shape:
            raise ShapeError(op, image.shape, m.shape)


def synthesize_cloudy(image, exposure, mask) -> Tensor:
    """Composite ``I*E*(1-M) + M`` clipped to [0, 1]; differentiable in all inputs."""
    I, E, M = (t if isinstance(t, Tensor) else Tensor(t) for t in (image, exposure, mask))
    _check("synthesize_cloudy", I, E, M)
    out = ops.add(ops.mul(ops.mul(I, E), ops.sub(1.0, M)), M)
    return ops.clamp(out, 0.0, 1.0)


def normal_cloud(image, mask) -> Tensor:
    """``I*(1-M) + M``: the unattacked cloudy image (exposure fixed at one)."""
    I = image if isinstance(image, Tensor) else Tensor(image)
    M = mask if isinstance(mask, Tensor) else Tensor(mask)
    return synthesize_cloudy(I, np.ones(M.shape), M)


def masks_for_ids(ids, h: int, w: int, seed: int) -> np.ndarray:
    """Starting cloud masks (N,1,h,w), one stream per image id."""
    return np.stack([make_cloud_mask(h, w, seeded_rng(seed, ("cloud", i))) for i in ids])
