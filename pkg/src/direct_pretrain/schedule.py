"""Learning-rate policies and schedule presets.

Pre-training presets (``P1x`` .. ``P4x``) run at a constant learning rate;
fine-tuning presets (``1x``, ``2x``) decay it stepwise at epoch milestones.
"""
import math
from dataclasses import dataclass, field
from typing import Tuple

from .errors import ConfigError

EPOCHS_PER_X = 12

# name -> (epochs, phase, default decay milestones in epochs)
PRESETS = {
    "P1x": (12, "pretrain", ()),
    "P2x": (24, "pretrain", ()),
    "P3x": (36, "pretrain", ()),
    "P4x": (48, "pretrain", ()),
    "1x": (12, "finetune", (8, 11)),
    "2x": (24, "finetune", (16, 22)),
}


@dataclass(frozen=True)
class SchedulePreset:
    name: str
    epochs: int
    phase: str
    milestones: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.epochs <= 0:
            raise ConfigError(f"schedule {self.name}: epochs must be positive, got {self.epochs}")
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"schedule {self.name}: unknown phase {self.phase!r}")


def get_preset(name, epochs=None):
    """Look up a preset, optionally overriding its length.

    With an overridden length the default milestones are rescaled
    proportionally (floor) and kept only if they stay strictly inside the run.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown schedule preset {name!r}; allowed: {', '.join(PRESETS)}")
    base_epochs, phase, milestones = PRESETS[name]
    if epochs is None or epochs == base_epochs:
        return SchedulePreset(name, base_epochs, phase, tuple(milestones))
    scaled = sorted({int(m * epochs / base_epochs) for m in milestones})
    return SchedulePreset(name, int(epochs), phase, tuple(m for m in scaled if 0 < m < epochs))


@dataclass(frozen=True)
class LrPolicy:
    base_lr: float = 0.02
    base_batch: int = 2
    scale_k: float = 1.0
    warmup_iters: int = 500
    warmup_start_fraction: float = 1.0 / 3.0
    decay_milestones: Tuple[int, ...] = ()
    decay_factor: float = 0.1

    def __post_init__(self):
        if self.base_lr <= 0 or self.base_batch <= 0:
            raise ConfigError("base_lr and base_batch must be positive")
        if self.warmup_iters < 0 or not 0 < self.warmup_start_fraction <= 1:
            raise ConfigError("warmup_iters must be >= 0 and warmup_start_fraction in (0, 1]")
        if not 0 < self.decay_factor <= 1:
            raise ConfigError(f"decay_factor must be in (0, 1], got {self.decay_factor}")
        ms = tuple(int(m) for m in self.decay_milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])) or any(m <= 0 for m in ms):
            raise ConfigError(f"milestones must be positive and strictly increasing, got {ms}")
        object.__setattr__(self, "decay_milestones", ms)

    def for_batch(self, batch):
        """Copy with ``scale_k`` set for ``batch`` relative to ``base_batch``."""
        return LrPolicy(**{**self.__dict__, "scale_k": batch / self.base_batch})


def scaled_lr(policy: LrPolicy, batch):
    """Linear scaling rule: ``base_lr * batch / base_batch``."""
    if batch <= 0:
        raise ValueError(f"batch must be positive, got {batch}")
    return policy.base_lr * batch / policy.base_batch


def epochs_to_iters(dataset_size, total_batch, epochs):
    if dataset_size <= 0 or total_batch <= 0 or epochs < 0:
        raise ValueError("dataset_size and total_batch must be positive, epochs non-negative")
    return math.ceil(dataset_size / total_batch) * epochs


def lr_at(policy: LrPolicy, preset: SchedulePreset, iteration, iters_per_epoch, batch=None):
    """Learning rate at a 0-based ``iteration``.

    ``batch`` defaults to ``base_batch * scale_k``. Decay milestones count
    completed epochs: at milestone ``m`` the rate drops from epoch index ``m``
    on. Warmup multiplies the (possibly decayed) rate by a factor rising
    linearly from ``warmup_start_fraction`` to 1 over ``warmup_iters``.
    """
    if batch is None:
        batch = policy.base_batch * policy.scale_k
    lr = scaled_lr(policy, batch)
    if preset.phase == "finetune":
        epoch = iteration // iters_per_epoch
        milestones = policy.decay_milestones or preset.milestones
        lr *= policy.decay_factor ** sum(1 for m in milestones if epoch >= m)
    if iteration < policy.warmup_iters:
        f = policy.warmup_start_fraction
        lr *= f + (1.0 - f) * iteration / policy.warmup_iters
    return lr


def lr_curve(policy, preset, iters_per_epoch, batch=None):
    total = preset.epochs * iters_per_epoch
    return [lr_at(policy, preset, i, iters_per_epoch, batch) for i in range(total)]
