"""DefenseNet pre-processor, generalized-cloud augmentation and its training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from advcloud.attacks import E_RANGE, M_RANGE, AttackBudget, advcloud_attack
from advcloud.cloud import synthesize_cloudy
from advcloud.engine import AdamW, BatchNorm2d, Conv2d, ConvBNReLU, Module, Tensor, no_grad, ops, seeded_rng

log = logging.getLogger(__name__)

DEFENSE_VARIANTS = ("full", "no_generalized", "no_vanilla")
VARIANT_NAMES = {
    "full": "DefenseNet",
    "no_generalized": "DefenseNet w/o Generalized AdvCloud",
    "no_vanilla": "DefenseNet w/o Vanilla AdvCloud",
}
AGM_BASES = ("clean", "adversarial")
LR_SCHEDULES = ("constant", "cosine")


class ResidualBlock(Module):
    """conv-BN-ReLU-conv-BN plus skip, ReLU after the sum; 1x1 projection when strided."""

    def __init__(self, c_in: int, c_out: int, rng, stride: int = 1):
        self.body = ConvBNReLU(c_in, c_out, rng, stride=stride)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(c_out)
        self.proj = Conv2d(c_in, c_out, 1, rng, stride=stride, bias=False) if stride != 1 or c_in != c_out else None

    def forward(self, x):
        h = self.bn2(self.conv2(self.body(x)))
        skip = x if self.proj is None else self.proj(x)
        return ops.relu(ops.add(h, skip))


class DefenseNet(Module):
    """Entry conv, 6 residual blocks (two of them stride 2), 3 dilated
    bottleneck convs, two upsample-conv stages and a zero-initialised output
    conv added to the input (global residual), clamped to [0, 1].

    Input height and width must be multiples of 4.
    """

    def __init__(self, width: int = 16, bottleneck: int = 64, seed: int = 0,
                 dilations=(2, 4, 8)):
        rng = seeded_rng(seed, "defense-init")
        self.width = width
        self.bottleneck_width = bottleneck
        self.entry = Conv2d(3, width, 3, rng)
        strides = (1, 2, 1, 2, 1, 1)
        self.blocks = [ResidualBlock(width, width, rng, stride=s) for s in strides]
        widths = (width,) + (bottleneck,) * len(dilations)
        self.bottleneck = [ConvBNReLU(a, b, rng, dilation=d)
                           for a, b, d in zip(widths[:-1], widths[1:], dilations)]
        self.up1 = ConvBNReLU(bottleneck, width, rng)
        self.up2 = ConvBNReLU(width, width, rng)
        self.out = Conv2d(width, 3, 3, rng)
        self.out.weight.data[...] = 0.0

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4:
            raise ValueError(f"DefenseNet needs H, W divisible by 4, got {h}x{w}")
        f = ops.relu(self.entry(x))
        for block in self.blocks:
            f = block(f)
        for conv in self.bottleneck:
            f = conv(f)
        f = self.up1(ops.resize_bilinear(f, (h // 2, w // 2)))
        f = self.up2(ops.resize_bilinear(f, (h, w)))
        return ops.clamp(ops.add(x, self.out(f)), 0.0, 1.0)


def defend(net: DefenseNet, images, batch_size: int = 16) -> np.ndarray:
    """Cleaned images without recording a graph."""
    images = np.asarray(images, dtype=np.float64)
    with no_grad():
        return np.concatenate([net(Tensor(images[s:s + batch_size])).data
                               for s in range(0, len(images), batch_size)])


@dataclass
class AgmConfig:
    omega_e: float = 0.1
    omega_m: float = 0.05
    base: str = "clean"

    def __post_init__(self):
        if self.omega_e < 0 or self.omega_m < 0:
            raise ValueError("AGM noise amplitudes must be non-negative")
        if self.base not in AGM_BASES:
            raise ValueError(f"agm base must be one of {AGM_BASES}, got {self.base!r}")


def clipped_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return np.clip(rng.standard_normal(shape), -1.0, 1.0)


def agm_generalize(image, exposure, mask, config: AgmConfig, rng: np.random.Generator, adversarial=None):
    """Perturb an attack's (E, M) with scaled clipped Gaussian noise and re-composite.

    Returns ``(E_g, M_g, image_g)``. The composite uses the clean ``image``
    unless ``config.base`` is ``"adversarial"``, in which case ``adversarial``
    is clouded again.
    """
    e_g = np.clip(exposure + config.omega_e * clipped_normal(rng, np.shape(exposure)), *E_RANGE)
    m_g = np.clip(mask + config.omega_m * clipped_normal(rng, np.shape(mask)), *M_RANGE)
    if config.base == "adversarial":
        if adversarial is None:
            raise ValueError("agm base 'adversarial' needs the adversarial image")
        base = adversarial
    else:
        base = image
    with no_grad():
        image_g = synthesize_cloudy(base, e_g, m_g).data
    return e_g, m_g, image_g


@dataclass
class DefenseLossTerms:
    vanilla: Tensor
    generalized: Tensor
    consistency: Tensor
    weight: float
    total: Tensor


def defense_loss(restored, restored_g, clean, weight: float = 0.1) -> DefenseLossTerms:
    """``L1(I', I) + L1(I'_g, I) + weight * L1(I', I'_g)``."""
    restored = restored if isinstance(restored, Tensor) else Tensor(restored)
    restored_g = restored_g if isinstance(restored_g, Tensor) else Tensor(restored_g)
    clean = clean if isinstance(clean, Tensor) else Tensor(clean)
    a = ops.l1(restored, clean)
    b = ops.l1(restored_g, clean)
    c = ops.l1(restored, restored_g)
    total = ops.add(ops.add(a, b), ops.scale(c, weight))
    return DefenseLossTerms(a, b, c, weight, total)


class DefenseDiverged(RuntimeError):
    pass


class FrozenModelMutated(RuntimeError):
    pass


@dataclass
class DefenseHistory:
    variant: str
    epoch_loss: list = field(default_factory=list)
    attack_seconds: float = 0.0


def cached_attacks(images, gts, masks0, sod_net, disc, budget: AttackBudget | None,
                   batch_size: int = 32):
    """AdvCloud (E, M, image) for every training image.

    With frozen detector and discriminator and fixed starting masks the
    attack is deterministic, so one pass serves every epoch.
    """
    parts = [advcloud_attack(images[s:s + batch_size], gts[s:s + batch_size], sod_net, disc, budget,
                             masks0=masks0[s:s + batch_size])
             for s in range(0, len(images), batch_size)]
    return (np.concatenate([p.exposure for p in parts]), np.concatenate([p.mask for p in parts]),
            np.concatenate([p.image for p in parts]))


def train_defense(net: DefenseNet, images, gts, masks0, sod_net, disc, *, epochs: int,
                  variant: str = "full", budget: AttackBudget | None = None,
                  agm: AgmConfig | None = None, lr: float = 1e-3, batch_size: int = 8,
                  weight_decay: float = 1e-4, reg_weight: float = 0.1, seed: int = 0,
                  attacks=None, lr_schedule: str = "constant") -> DefenseHistory:
    """Fit ``net`` to undo AdvCloud, alternating attack and defense steps.

    ``variant`` selects the loss: ``full`` uses all three terms,
    ``no_generalized`` only ``L1(I', I)`` and ``no_vanilla`` only
    ``L1(I'_g, I)``. ``attacks`` may pass a precomputed ``(E, M, image)``
    triple from :func:`cached_attacks`. ``lr_schedule="cosine"`` decays the
    learning rate per epoch along a half cosine towards zero.
    """
    if variant not in DEFENSE_VARIANTS:
        raise ValueError(f"unknown defense variant {variant!r}; expected one of {DEFENSE_VARIANTS}")
    if lr_schedule not in LR_SCHEDULES:
        raise ValueError(f"unknown lr schedule {lr_schedule!r}; expected one of {LR_SCHEDULES}")
    agm = agm or AgmConfig()
    images = np.asarray(images, dtype=np.float64)
    history = DefenseHistory(variant)
    if epochs <= 0:
        return history
    sums = (sod_net.checksum(), disc.checksum() if disc is not None else None)
    if attacks is None:
        t0 = time.perf_counter()
        attacks = cached_attacks(images, gts, masks0, sod_net, disc, budget)
        history.attack_seconds = time.perf_counter() - t0
    exposure, mask, adversarial = attacks
    net.train()
    opt = AdamW(net.parameters(), lr=lr, weight_decay=weight_decay)
    n = len(images)
    for epoch in range(epochs):
        if lr_schedule == "cosine":
            opt.state.lr = lr * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))
        rng = seeded_rng(seed, ("defense-epoch", epoch))
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            clean = Tensor(images[idx])
            opt.zero_grad()
            if variant == "no_generalized":
                loss = ops.l1(net(Tensor(adversarial[idx])), clean)
            else:
                _, _, image_g = agm_generalize(images[idx], exposure[idx], mask[idx], agm, rng,
                                               adversarial=adversarial[idx])
                if variant == "no_vanilla":
                    loss = ops.l1(net(Tensor(image_g)), clean)
                else:
                    both = net(Tensor(np.concatenate([adversarial[idx], image_g])))
                    k = len(idx)
                    restored = ops.take_rows(both, 0, k)
                    restored_g = ops.take_rows(both, k, 2 * k)
                    loss = defense_loss(restored, restored_g, clean, reg_weight).total
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        history.epoch_loss.append(total / count)
        log.info("%s epoch %d loss %.5f", VARIANT_NAMES[variant], epoch, history.epoch_loss[-1])
        if not np.isfinite(history.epoch_loss[-1]) or history.epoch_loss[-1] > 10 * history.epoch_loss[0]:
            raise DefenseDiverged(f"defense loss {history.epoch_loss[-1]:.4g} at epoch {epoch} "
                                  f"exceeds 10x the first epoch ({history.epoch_loss[0]:.4g})")
    net.eval()
    if (sod_net.checksum(), disc.checksum() if disc is not None else None) != sums:
        raise FrozenModelMutated("detector or discriminator parameters changed during defense training")
    return history
