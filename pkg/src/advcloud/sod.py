"""Toy fully convolutional saliency detector (the deployed model under attack)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from advcloud.engine import AdamW, ConvBNReLU, Conv2d, Module, Tensor, no_grad, ops, seeded_rng

log = logging.getLogger(__name__)

MIN_SIZE = 8


class SodNet(Module):
    """Encoder of four conv blocks (stride 2 on blocks 2-3), two upsample-conv
    blocks fed by skip connections, and a 1x1 sigmoid head."""

    def __init__(self, channels=(16, 32, 64, 64), seed: int = 0):
        rng = seeded_rng(seed, "sod-init")
        c1, c2, c3, c4 = channels
        self.channels = tuple(channels)
        self.enc1 = ConvBNReLU(3, c1, rng)
        self.enc2 = ConvBNReLU(c1, c2, rng, stride=2)
        self.enc3 = ConvBNReLU(c2, c3, rng, stride=2)
        self.enc4 = ConvBNReLU(c3, c4, rng)
        self.dec1 = ConvBNReLU(c4 + c2, c2, rng)
        self.dec2 = ConvBNReLU(c2 + c1, c1, rng)
        self.head = Conv2d(c1, 1, 1, rng, gain=0.1)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h < MIN_SIZE or w < MIN_SIZE:
            raise ValueError(f"SodNet needs H, W >= {MIN_SIZE}, got {h}x{w}")
        f1 = self.enc1(x)
        f2 = self.enc2(f1)
        f3 = self.enc3(f2)
        f4 = self.enc4(f3)
        u1 = ops.resize_bilinear(f4, f2.shape[-2:])
        d1 = self.dec1(ops.concat([u1, f2], axis=1))
        u2 = ops.resize_bilinear(d1, f1.shape[-2:])
        d2 = self.dec2(ops.concat([u2, f1], axis=1))
        return ops.sigmoid(self.head(d2))


def sod_forward(net: SodNet, image) -> np.ndarray:
    """Saliency map (N,1,H,W) for images (N,3,H,W) without recording a graph."""
    with no_grad():
        return net(Tensor(image)).data


def check_binary(gt: np.ndarray) -> None:
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError("ground truth must be binary (values in {0, 1})")


def sod_loss(pred, gt, per_image: bool = False) -> Tensor:
    """Mean per-pixel BCE; ``per_image`` keeps one value per batch entry."""
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    check_binary(gt_arr)
    pix = ops.bce(pred, Tensor(gt_arr))
    if per_image:
        return ops.mean(pix, axis=tuple(range(1, pix.ndim)))
    return ops.mean(pix)


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    pass


def train_sod(net: SodNet, images: np.ndarray, gts: np.ndarray, epochs: int, *,
              lr: float = 2e-3, batch_size: int = 8, weight_decay: float = 1e-4,
              seed: int = 0) -> TrainHistory:
    """Fit ``net`` on clean images, then freeze it.

    Each epoch visits the samples in a seeded permutation. Aborts with
    :class:`TrainingDiverged` if an epoch's mean loss exceeds ten times the
    first epoch's.
    """
    if len(images) == 0:
        raise ValueError("train_sod: empty training split")
    check_binary(gts)
    net.train()
    opt = AdamW(net.parameters(), lr=lr, weight_decay=weight_decay)
    history = TrainHistory()
    for epoch in range(epochs):
        order = seeded_rng(seed, ("sod-epoch", epoch)).permutation(len(images))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            opt.zero_grad()
            loss = sod_loss(net(Tensor(images[idx])), gts[idx])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        mean_loss = total / len(images)
        history.epoch_loss.append(mean_loss)
        log.info("sod epoch %d loss %.4f", epoch, mean_loss)
        if not np.isfinite(mean_loss) or mean_loss > 10 * history.epoch_loss[0]:
            raise TrainingDiverged(
                f"SOD training diverged at epoch {epoch}: loss {mean_loss:.4g} "
                f"vs initial {history.epoch_loss[0]:.4g}")
    net.freeze()
    return history
