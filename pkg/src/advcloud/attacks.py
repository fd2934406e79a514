"""Adversarial cloud attack and additive-perturbation baselines.

Every attack works on a batch ``(N,3,H,W)``. The per-image objectives are
summed before back-propagation; since no layer mixes batch entries (frozen
networks run in eval mode) each image receives exactly its own gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from advcloud.cloud import normal_cloud, synthesize_cloudy
from advcloud.engine import Tensor, backward, no_grad, ops
from advcloud.sod import sod_loss

BASELINES = ("FGSM", "PGD", "MIFGSM", "NIFGSM", "VMIFGSM")
ADVCLOUD_MODES = ("full", "fix_E", "fix_M")
E_RANGE = (0.0, 2.0)
M_RANGE = (0.0, 1.0)


@dataclass
class AttackBudget:
    eps_m: float = 0.03
    eps_e: float = 0.06
    alpha_m: float = 0.003
    alpha_e: float = 0.015
    steps: int = 10
    eps: float = 8 / 255
    alpha: float = 2 / 255
    momentum: float = 1.0
    vmi_samples: int = 5
    vmi_radius: float = 1.5

    def __post_init__(self):
        for name in ("eps_m", "eps_e", "alpha_m", "alpha_e", "eps", "alpha", "momentum", "vmi_radius"):
            if getattr(self, name) < 0:
                raise ValueError(f"AttackBudget.{name} must be non-negative")
        if self.steps < 0 or self.vmi_samples < 1:
            raise ValueError("AttackBudget.steps must be >= 0 and vmi_samples >= 1")

    def check_reachable(self) -> None:
        """The balls must be reachable within ``steps`` sign steps."""
        if self.alpha_m * self.steps < self.eps_m - 1e-12 or self.alpha_e * self.steps < self.eps_e - 1e-12:
            raise ValueError("step sizes too small to reach the ball radius in the given steps")


@dataclass
class AttackResult:
    kind: str
    image: np.ndarray
    loss_trace: np.ndarray
    objective_trace: np.ndarray
    wall_time: float
    exposure: np.ndarray | None = None
    mask: np.ndarray | None = None

    @property
    def initial_loss(self) -> np.ndarray:
        return self.loss_trace[0]

    @property
    def final_loss(self) -> np.ndarray:
        return self.loss_trace[-1]


def project_ball(x, x0, eps: float, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Clip ``x`` into the L-inf ball of radius ``eps`` around ``x0``, then into ``[lo, hi]``."""
    out = np.clip(x, x0 - eps, x0 + eps)
    if lo is not None or hi is not None:
        out = np.clip(out, lo, hi)
    return out


def sod_objective(model, gts) -> Callable[[Tensor], Tensor]:
    """Per-image mean BCE of ``model`` against ``gts``."""
    return lambda x: sod_loss(model(x), gts, per_image=True)


def disc_log_terms(disc, fake: Tensor, real) -> Tensor:
    """Per-image ``log D(real) + log(1 - D(fake))``."""
    d_fake = ops.reshape(disc(fake), (fake.shape[0],))
    with no_grad():
        d_real = disc(Tensor(real)).data.reshape(-1)
    log_fake = ops.log(ops.clamp(ops.sub(1.0, d_fake), 1e-12, 1.0))
    return ops.add(log_fake, np.log(np.clip(d_real, 1e-12, 1.0)))


def advcloud_attack(images, gts, sod_net, disc=None, budget: AttackBudget | None = None, *,
                    masks0=None, rng: np.random.Generator | None = None, mode: str = "full",
                    loss_fn=None, callback=None) -> AttackResult:
    """Sign ascent on exposure ``E`` and cloud mask ``M`` of ``I*E*(1-M)+M``.

    The objective is the SOD loss, minus the discriminator loss when ``disc``
    is given. ``mode`` freezes one variable for the ablations: ``fix_E``
    keeps the exposure at one (no exposure matrix), ``fix_M`` keeps the
    initial mask (no noise update). ``callback(step, E, M)`` sees every
    projected iterate.
    """
    if mode not in ADVCLOUD_MODES:
        raise ValueError(f"unknown AdvCloud mode {mode!r}; expected one of {ADVCLOUD_MODES}")
    budget = budget or AttackBudget()
    t0 = time.perf_counter()
    images = np.asarray(images, dtype=np.float64)
    n, _, h, w = images.shape
    if masks0 is None:
        if rng is None:
            raise ValueError("advcloud_attack needs masks0 or an rng to draw them")
        from advcloud.cloud import make_cloud_mask
        masks0 = np.stack([make_cloud_mask(h, w, rng) for _ in range(n)])
    M0 = np.asarray(masks0, dtype=np.float64).reshape(n, 1, h, w)
    E0 = np.ones_like(M0)
    loss_fn = loss_fn or sod_objective(sod_net, gts)
    real = normal_cloud(images, M0).data if disc is not None else None

    def evaluate(E, M, need_grad):
        Et = Tensor(E, requires_grad=need_grad and mode != "fix_E")
        Mt = Tensor(M, requires_grad=need_grad and mode != "fix_M")
        adv = synthesize_cloudy(images, Et, Mt)
        ell = loss_fn(adv)
        obj = ell if disc is None else ops.sub(ell, disc_log_terms(disc, adv, real))
        if need_grad:
            backward(ops.sum(obj))
        return Et, Mt, ell.data.copy(), obj.data.copy()

    E, M = E0.copy(), M0.copy()
    losses, objectives = [], []
    for step in range(budget.steps):
        Et, Mt, ell, obj = evaluate(E, M, True)
        losses.append(ell)
        objectives.append(obj)
        if mode != "fix_M":
            M = project_ball(M + budget.alpha_m * np.sign(Mt.grad), M0, budget.eps_m, *M_RANGE)
        if mode != "fix_E":
            E = project_ball(E + budget.alpha_e * np.sign(Et.grad), E0, budget.eps_e, *E_RANGE)
        if callback is not None:
            callback(step, E, M)
    with no_grad():
        _, _, ell, obj = evaluate(E, M, False)
        adv = synthesize_cloudy(images, E, M).data
    losses.append(ell)
    objectives.append(obj)
    return AttackResult(
        kind={"full": "AdvCloud", "fix_E": "AdvCloud w/o Exposure Matrix",
              "fix_M": "AdvCloud w/o Noise"}[mode],
        image=adv, loss_trace=np.array(losses), objective_trace=np.array(objectives),
        wall_time=time.perf_counter() - t0, exposure=E, mask=M)


def advcloud_ablation(images, gts, sod_net, disc=None, budget=None, mode: str = "fix_E", **kw) -> AttackResult:
    if mode not in ("fix_E", "fix_M"):
        raise ValueError(f"ablation mode must be fix_E or fix_M, got {mode!r}")
    return advcloud_attack(images, gts, sod_net, disc, budget, mode=mode, **kw)


def _l1_normalise(g: np.ndarray) -> np.ndarray:
    norm = np.abs(g).mean(axis=tuple(range(1, g.ndim)), keepdims=True)
    return g / np.maximum(norm, 1e-12)


def baseline_attack(kind: str, images, gts, sod_net, budget: AttackBudget | None = None,
                    rng: np.random.Generator | None = None, *, loss_fn=None, callback=None) -> AttackResult:
    """Additive L-inf attacks started from ``images`` (the normal-cloud images).

    FGSM takes one step of size ``eps``; the iterative kinds take ``steps``
    steps of size ``alpha`` with momentum ``momentum`` (MI/NI/VMI), a
    Nesterov look-ahead (NI), or variance tuning over ``vmi_samples``
    neighbours drawn from a ``vmi_radius * eps`` box (VMI). PGD starts from a
    uniform random point in the ball.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown attack kind {kind!r}; expected one of {BASELINES}")
    budget = budget or AttackBudget()
    rng = rng if rng is not None else np.random.default_rng(0)
    t0 = time.perf_counter()
    x0 = np.asarray(images, dtype=np.float64)
    loss_fn = loss_fn or sod_objective(sod_net, gts)
    eps, alpha, mu = budget.eps, budget.alpha, budget.momentum
    losses = []

    def grad(x, keep=True):
        xt = Tensor(x, requires_grad=True)
        ell = loss_fn(xt)
        backward(ops.sum(ell))
        if keep:
            losses.append(ell.data.copy())
        return xt.grad

    def project(x):
        return project_ball(x, x0, eps, 0.0, 1.0)

    if kind == "FGSM":
        x = project(x0 + eps * np.sign(grad(x0)))
        if callback is not None:
            callback(0, x)
    else:
        x = x0.copy()
        if kind == "PGD":
            x = project(x0 + rng.uniform(-eps, eps, size=x0.shape))
        momentum = np.zeros_like(x0)
        variance = np.zeros_like(x0)
        for step in range(budget.steps):
            if kind == "PGD":
                direction = grad(x)
            elif kind == "MIFGSM":
                momentum = mu * momentum + _l1_normalise(grad(x))
                direction = momentum
            elif kind == "NIFGSM":
                # the trace records the loss at the look-ahead point
                g = grad(np.clip(x + alpha * mu * momentum, 0.0, 1.0))
                momentum = mu * momentum + _l1_normalise(g)
                direction = momentum
            else:  # VMIFGSM
                g = grad(x)
                momentum = mu * momentum + _l1_normalise(g + variance)
                r = budget.vmi_radius * eps
                neighbours = sum(
                    grad(np.clip(x + rng.uniform(-r, r, size=x.shape), 0.0, 1.0), keep=False)
                    for _ in range(budget.vmi_samples))
                variance = neighbours / budget.vmi_samples - g
                direction = momentum
            x = project(x + alpha * np.sign(direction))
            if callback is not None:
                callback(step, x)
    with no_grad():
        losses.append(loss_fn(Tensor(x)).data.copy())
    trace = np.array(losses)
    return AttackResult(kind=kind, image=x, loss_trace=trace, objective_trace=trace,
                        wall_time=time.perf_counter() - t0)
