"""Synthetic saliency dataset and EORSSD-layout directory I/O.

Images are stored channel-first, ``(3, H, W)`` floats in [0, 1]; ground
truths are ``(1, H, W)`` binary masks. PNG files on disk are 8-bit HxWx3
(images) and HxW grayscale (masks).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from advcloud.cloud import make_cloud_mask
from advcloud.engine import seeded_rng
from advcloud.engine.ops import _interp_matrix

log = logging.getLogger(__name__)

FG_MIN, FG_MAX = 0.02, 0.30


@dataclass
class Sample:
    id: str
    image: np.ndarray
    gt: np.ndarray

    def __post_init__(self):
        if self.image.shape[1:] != self.gt.shape[1:]:
            raise ValueError(f"{self.id}: image {self.image.shape} and gt {self.gt.shape} differ in size")


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    test: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        overlap = {s.id for s in self.train} & {s.id for s in self.test}
        if overlap:
            raise ValueError(f"train/test splits share ids: {sorted(overlap)[:5]}")


def stack(samples):
    """``(images (N,3,H,W), gts (N,1,H,W), ids)`` for a list of samples."""
    images = np.stack([s.image for s in samples])
    gts = np.stack([s.gt for s in samples])
    return images, gts, [s.id for s in samples]


# --- synthetic generator ---------------------------------------------------

def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _shape_mask(kind: str, h: int, w: int, rng: np.random.Generator, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    cy = rng.uniform(radius, h - radius)
    cx = rng.uniform(radius, w - radius)
    theta = rng.uniform(0, np.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    aspect = rng.uniform(0.5, 1.0)
    if kind == "ellipse":
        return (u / radius) ** 2 + (v / (radius * aspect)) ** 2 <= 1.0
    if kind == "rect":
        return (np.abs(u) <= radius) & (np.abs(v) <= radius * aspect)
    # convex regular polygon as an intersection of half-planes
    n = int(rng.integers(3, 7))
    inside = np.ones((h, w), dtype=bool)
    for k in range(n):
        a = theta + 2 * np.pi * k / n
        inside &= dx * np.cos(a) + dy * np.sin(a) <= radius * np.cos(np.pi / n)
    return inside


# Scene generator knobs. Objects differ from the clutter mainly in brightness,
# and each scene gets a global haze/contrast factor; this keeps the detector
# dependent on local contrast, which is what cloud cover perturbs.
BG_LEVEL = (0.25, 0.45)
BG_TEXTURE = 0.25
BG_GRAIN = 0.03
OBJ_OFFSET = (0.2, 0.4)
MAX_SATURATION = 0.3
HAZE_CONTRAST = (0.45, 1.0)
HAZE_LEVEL = (0.3, 0.9)


def _place_objects(h: int, w: int, rng: np.random.Generator) -> list:
    for _ in range(200):
        n_obj = int(rng.integers(1, 4))
        target = rng.uniform(FG_MIN * 1.5, FG_MAX * 0.8)
        radius = float(np.clip(np.sqrt(target * h * w / n_obj / np.pi), 2.0, min(h, w) / 2 - 1))
        masks = [_shape_mask(str(rng.choice(["ellipse", "rect", "poly"])), h, w, rng,
                             radius * rng.uniform(0.8, 1.2)) for _ in range(n_obj)]
        if FG_MIN <= np.logical_or.reduce(masks).mean() <= FG_MAX:
            return masks
    raise RuntimeError("could not place objects within the foreground-fraction bounds")  # pragma: no cover


def synth_sample(sample_id: str, h: int, w: int, rng: np.random.Generator) -> Sample:
    tex = make_cloud_mask(h, w, rng)[0]
    tex = (tex - tex.min()) / max(tex.max() - tex.min(), 1e-9)
    grain = rng.uniform(0.0, 1.0, size=(h, w))
    lum = rng.uniform(*BG_LEVEL) + BG_TEXTURE * (tex - 0.5) + BG_GRAIN * (grain - 0.5)
    tint = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0, MAX_SATURATION), 1.0)
    image = tint[:, None, None] * lum[None]
    masks = _place_objects(h, w, rng)
    for m in masks:
        color = _hsv_to_rgb(rng.uniform(0, 1), rng.uniform(0, MAX_SATURATION), 1.0)
        obj = color[:, None, None] * (lum + rng.uniform(*OBJ_OFFSET))[None]
        image = np.where(m[None], obj, image)
    contrast = rng.uniform(*HAZE_CONTRAST)
    image = contrast * image + (1 - contrast) * rng.uniform(*HAZE_LEVEL)
    gt = np.logical_or.reduce(masks)[None].astype(np.float64)
    return Sample(sample_id, np.clip(image, 0.0, 1.0), gt)


def synth_dataset(n_train: int, n_test: int, h: int = 64, w: int = 64, seed: int = 0) -> DatasetSplit:
    """Hazy textured scenes with 1-3 brighter geometric objects; gt marks the objects."""
    if n_train < 1 or n_test < 1:
        raise ValueError("synth_dataset needs at least one train and one test sample")
    if h < 32 or w < 32:
        raise ValueError(f"synth_dataset needs H, W >= 32, got {h}x{w}")
    samples = []
    for i in range(n_train + n_test):
        sid = f"syn{i:05d}"
        samples.append(synth_sample(sid, h, w, seeded_rng(seed, ("synth", i))))
    return DatasetSplit(samples[:n_train], samples[n_train:], seed)


# --- directory I/O -----------------------------------------------------------

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path: Path, image: np.ndarray) -> None:
    """Write a (3,H,W) [0,1] image as 8-bit RGB PNG."""
    PILImage.fromarray(to_uint8(image.transpose(1, 2, 0)), mode="RGB").save(path)


def save_mask(path: Path, mask: np.ndarray) -> None:
    PILImage.fromarray(to_uint8(mask[0]), mode="L").save(path)


def read_image(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def read_mask(path: Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return (arr >= 0.5).astype(np.float64)[None]


def resize_image(image: np.ndarray, size) -> np.ndarray:
    h, w = size
    if image.shape[1:] == (h, w):
        return image
    return _interp_matrix(h, image.shape[1]) @ image @ _interp_matrix(w, image.shape[2]).T


def resize_mask(mask: np.ndarray, size) -> np.ndarray:
    h, w = size
    H, W = mask.shape[1:]
    if (H, W) == (h, w):
        return mask
    rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(int), H - 1)
    cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(int), W - 1)
    return mask[:, rows][:, :, cols]


def _image_stems(folder: Path) -> dict:
    stems = {}
    for p in sorted(folder.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            log.warning("skipping non-image file %s", p)
            continue
        stems[p.stem] = p
    return stems


def _load_pairs(root: Path, size) -> list:
    images, gts = _image_stems(root / "images"), _image_stems(root / "gt")
    for stem in sorted(set(images) ^ set(gts)):
        where = "gt/" if stem in images else "images/"
        raise FileNotFoundError(f"{root}: no counterpart in {where} for stem '{stem}'")
    out = []
    for stem in sorted(images):
        img, gt = read_image(images[stem]), read_mask(gts[stem])
        if size is not None:
            img, gt = resize_image(img, size), resize_mask(gt, size)
        out.append(Sample(stem, img, gt))
    return out


def load_dataset(root, size=(64, 64), test_fraction: float = 0.3, seed: int = 0) -> DatasetSplit:
    """Load ``root/{train,test}/{images,gt}`` or a flat ``root/{images,gt}``.

    A flat directory is split by a seeded permutation of the sorted stems,
    so the split does not depend on directory listing order.
    """
    root = Path(root)
    if (root / "train").is_dir() and (root / "test").is_dir():
        return DatasetSplit(_load_pairs(root / "train", size), _load_pairs(root / "test", size), seed)
    if not ((root / "images").is_dir() and (root / "gt").is_dir()):
        raise FileNotFoundError(f"{root}: expected images/ and gt/ (or train/ and test/) subdirectories")
    samples = _load_pairs(root, size)
    order = seeded_rng(seed, "split").permutation(len(samples))
    n_test = max(1, int(round(test_fraction * len(samples)))) if len(samples) > 1 else 0
    test_idx = set(order[:n_test].tolist())
    train = [s for i, s in enumerate(samples) if i not in test_idx]
    test = [s for i, s in enumerate(samples) if i in test_idx]
    return DatasetSplit(train, test, seed)


def save_dataset(split: DatasetSplit, root) -> None:
    root = Path(root)
    for name, samples in (("train", split.train), ("test", split.test)):
        (root / name / "images").mkdir(parents=True, exist_ok=True)
        (root / name / "gt").mkdir(parents=True, exist_ok=True)
        for s in samples:
            save_image(root / name / "images" / f"{s.id}.png", s.image)
            save_mask(root / name / "gt" / f"{s.id}.png", s.gt)
