"""Cloud-realism discriminator and its alternating pre-training."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from advcloud.attacks import AttackBudget, advcloud_attack
from advcloud.cloud import normal_cloud
from advcloud.engine import AdamW, Conv2d, Module, Tensor, no_grad, ops, seeded_rng

log = logging.getLogger(__name__)


class Discriminator(Module):
    """Four stride-2 conv+ReLU blocks, global mean pooling, 1x1 conv, sigmoid."""

    def __init__(self, channels=(16, 32, 64, 64), seed: int = 0):
        rng = seeded_rng(seed, "disc-init")
        widths = (3,) + tuple(channels)
        self.blocks = [Conv2d(a, b, 3, rng, stride=2) for a, b in zip(widths[:-1], widths[1:])]
        self.head = Conv2d(widths[-1], 1, 1, rng, gain=0.1)

    def forward(self, x):
        h = x
        for conv in self.blocks:
            h = ops.relu(conv(h))
        pooled = ops.mean(h, axis=(2, 3), keepdims=True)
        return ops.reshape(ops.sigmoid(self.head(pooled)), (x.shape[0],))


def disc_forward(disc: Discriminator, images) -> np.ndarray:
    """Realness scores in (0, 1), one per image."""
    with no_grad():
        return disc(Tensor(images)).data


def disc_loss(disc: Discriminator, fake, real) -> Tensor:
    """``mean log D(real) + mean log(1 - D(fake))``; always <= 0.

    Differentiable in the discriminator parameters and in ``fake``.
    """
    fake = fake if isinstance(fake, Tensor) else Tensor(fake)
    real = real if isinstance(real, Tensor) else Tensor(real)
    if fake.shape[0] == 0 or real.shape[0] == 0:
        raise ValueError("disc_loss needs non-empty batches of both image kinds")
    d_real = ops.clamp(disc(real), 1e-12, 1.0)
    d_fake = ops.clamp(ops.sub(1.0, disc(fake)), 1e-12, 1.0)
    return ops.add(ops.mean(ops.log(d_real)), ops.mean(ops.log(d_fake)))


class DiscriminatorCollapse(RuntimeError):
    pass


@dataclass
class DiscHistory:
    round_loss: list = field(default_factory=list)
    round_accuracy: list = field(default_factory=list)
    # parameters the final round's attack step saw; clouds built against
    # this state are what the returned discriminator was last trained on
    attack_state: dict | None = None


def pretrain_discriminator(disc: Discriminator, images, gts, masks0, sod_net, *,
                           rounds: int = 5, images_per_round: int = 64, disc_steps: int = 30,
                           batch_size: int = 16, lr: float = 1e-3, budget: AttackBudget | None = None,
                           attack_batch: int = 32, seed: int = 0) -> DiscHistory:
    """Alternate between attacking with a frozen discriminator and training it.

    Each round draws ``images_per_round`` training images, builds their
    adversarial clouds against the current (frozen) discriminator, then runs
    ``disc_steps`` AdamW steps ascending the discriminator objective with the
    clouds held fixed. Half of every batch comes from the current round and
    half from all rounds so far, so earlier attack styles are not forgotten.
    The discriminator is frozen on return.
    """
    history = DiscHistory()
    opt = AdamW(disc.parameters(), lr=lr, weight_decay=0.0)
    flat_rounds = 0
    n = len(images)
    pool_real, pool_fake = [], []
    for r in range(rounds):
        rng = seeded_rng(seed, ("disc-round", r))
        idx = np.sort(rng.choice(n, size=min(images_per_round, n), replace=False))
        real = normal_cloud(images[idx], masks0[idx]).data
        _set_trainable(disc, False)
        history.attack_state = disc.state_dict()
        fake = np.concatenate([
            advcloud_attack(images[idx[s:s + attack_batch]], gts[idx[s:s + attack_batch]], sod_net, disc,
                            budget, masks0=masks0[idx[s:s + attack_batch]]).image
            for s in range(0, len(idx), attack_batch)])
        _set_trainable(disc, True)
        pool_real.append(real)
        pool_fake.append(fake)
        all_real, all_fake = np.concatenate(pool_real), np.concatenate(pool_fake)
        losses = []
        half = max(1, batch_size // 2)
        for step in range(disc_steps):
            cur = rng.choice(len(idx), size=min(half, len(idx)), replace=False)
            old = rng.choice(len(all_real), size=min(batch_size - half, len(all_real)), replace=False)
            f_batch = np.concatenate([fake[cur], all_fake[old]])
            r_batch = np.concatenate([real[cur], all_real[old]])
            opt.zero_grad()
            objective = disc_loss(disc, f_batch, r_batch)
            ops.scale(objective, -1.0).backward()
            opt.step()
            losses.append(objective.item())
        s_real, s_fake = disc_forward(disc, real), disc_forward(disc, fake)
        acc = 0.5 * ((s_real > 0.5).mean() + (s_fake <= 0.5).mean())
        history.round_loss.append(float(np.mean(losses)))
        history.round_accuracy.append(float(acc))
        log.info("disc round %d L_D %.4f train acc %.3f real %.3f fake %.3f", r, history.round_loss[-1], acc,
                 s_real.mean(), s_fake.mean())
        flat_rounds = flat_rounds + 1 if np.concatenate([s_real, s_fake]).var() < 1e-6 else 0
        if flat_rounds >= 3:
            raise DiscriminatorCollapse(
                f"discriminator scores have variance < 1e-6 for 3 consecutive rounds (round {r})")
    disc.freeze()
    return history


def _set_trainable(module: Module, flag: bool) -> None:
    for p in module.parameters():
        p.requires_grad = flag
        p.grad = None
