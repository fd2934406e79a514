"""Experiment configuration: a flat ``key = value`` text format with two presets.

Lines starting with ``#`` are comments. Tuple-valued keys take comma
separated integers (``sod_channels = 8, 16, 32, 32``). Unknown keys are an
error so that typos do not silently fall back to defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path

from advcloud.attacks import AttackBudget
from advcloud.defense import LR_SCHEDULES, AgmConfig

THREADS_ENV = "ADVCLOUD_THREADS"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 0
    size: int = 64
    n_train: int = 200
    n_test: int = 50
    # detector
    sod_channels: tuple = (8, 16, 32, 32)
    sod_epochs: int = 15
    sod_lr: float = 2e-3
    # discriminator
    disc_channels: tuple = (16, 32, 64, 64)
    disc_rounds: int = 5
    disc_images_per_round: int = 64
    disc_steps: int = 30
    disc_lr: float = 1e-3
    # attack budgets
    eps_m: float = 0.03
    eps_e: float = 0.06
    alpha_m: float = 0.003
    alpha_e: float = 0.015
    attack_steps: int = 10
    eps: float = 8 / 255
    alpha: float = 2 / 255
    # defense
    defense_width: int = 16
    defense_bottleneck: int = 64
    defense_epochs: int = 20
    defense_lr: float = 1e-3
    defense_lr_schedule: str = "constant"
    batch_size: int = 8
    reg_weight: float = 0.1
    omega_e: float = 0.1
    omega_m: float = 0.05
    agm_base: str = "clean"
    jpeg_quality: int = 75

    def __post_init__(self):
        if self.size < 32 or self.size % 4:
            raise ConfigError(f"size must be a multiple of 4 and >= 32, got {self.size}")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be positive")
        self.sod_channels = tuple(int(c) for c in self.sod_channels)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        self.agm  # validates omega and agm_base
        if self.defense_lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"defense_lr_schedule must be one of {LR_SCHEDULES}, got {self.defense_lr_schedule!r}")
        self.budget.check_reachable()

    @property
    def budget(self) -> AttackBudget:
        return AttackBudget(eps_m=self.eps_m, eps_e=self.eps_e, alpha_m=self.alpha_m, alpha_e=self.alpha_e,
                            steps=self.attack_steps, eps=self.eps, alpha=self.alpha)

    @property
    def agm(self) -> AgmConfig:
        return AgmConfig(omega_e=self.omega_e, omega_m=self.omega_m, base=self.agm_base)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            text = ", ".join(str(v) for v in value) if isinstance(value, tuple) else repr(value).strip("'")
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:10]


PRESETS = {
    "desk": ExperimentConfig(),
    # published setting: 256x256 inputs, 80 epochs, batch 8, lr 1e-4, 512-wide bottleneck
    "full-scale": ExperimentConfig(size=256, sod_channels=(16, 32, 64, 64), defense_width=64,
                              defense_bottleneck=512, defense_epochs=80, defense_lr=1e-4),
}


def _coerce(name: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or PRESETS["desk"]
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    changes = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigError(f"unknown preset {raw!r}; expected one of {sorted(PRESETS)}")
            base = PRESETS[raw]
            known = {f.name: getattr(base, f.name) for f in fields(base)}
            continue
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        changes[key] = _coerce(key, raw, known[key])
    try:
        return base.replace(**changes)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text())


def apply_thread_limit():
    """Honour ``ADVCLOUD_THREADS`` by capping the BLAS thread pools.

    Returns the threadpoolctl limiter (kept alive by the caller) or None.
    """
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)
