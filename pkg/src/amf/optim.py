"""SGD with momentum over named parameter groups.

Each group carries its own base learning rate and step-decay schedule; the
heavy-ball update is v <- mu*v + g, p <- p - lr*v (no weight decay). The
effective rate is recomputed once per epoch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError
from .models import AMFModel, Model, MultiTuneModel, SingleModel


@dataclass(frozen=True)
class ScheduleSpec:
    base_lr: float
    decay_rate: float = 1.0
    decay_epochs: int = 20

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be >= 0, got {self.base_lr}")
        if not (0 < self.decay_rate <= 1):
            raise ConfigError(f"decay_rate must be in (0, 1], got {self.decay_rate}")
        if self.decay_epochs < 1:
            raise ConfigError(f"decay_epochs must be >= 1, got {self.decay_epochs}")


def lr_at_epoch(spec: ScheduleSpec, epoch: int) -> float:
    """lr(e) = base_lr * decay_rate ** floor(e / decay_epochs)."""
    if epoch < 0:
        raise UsageError(f"epoch must be >= 0, got {epoch}")
    return spec.base_lr * spec.decay_rate ** math.floor(epoch / spec.decay_epochs)


@dataclass
class ParamGroup:
    name: str
    members: list[str]
    schedule: ScheduleSpec
    momentum: float = 0.9
    # (name prefix, factor) pairs: members matching a prefix use lr * factor
    layer_scale: list[tuple[str, float]] = field(default_factory=list)

    def __post_init__(self):
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        for prefix, factor in self.layer_scale:
            if not (0 < factor <= 1):
                raise ConfigError(f"layer_scale factor must be in (0, 1], got {factor}")

    def scale_for(self, param_name: str) -> float:
        for prefix, factor in self.layer_scale:
            if param_name.startswith(prefix):
                return factor
        return 1.0


def apply_layer_scale(group: ParamGroup, prefix: str, factor: float) -> ParamGroup:
    """Register a per-prefix learning-rate multiplier on a group."""
    if not (0 < factor <= 1):
        raise ConfigError(f"factor must be in (0, 1], got {factor}")
    if not any(m.startswith(prefix) for m in group.members):
        raise UsageError(f"prefix {prefix!r} matches no member of group {group.name!r}")
    group.layer_scale.append((prefix, factor))
    return group


class OptimizerState:
    """Velocity tensors (zero-initialized, float64) plus the current epoch."""

    def __init__(self, model: Model):
        self.velocity = {k: np.zeros(t.shape, dtype=np.float64) for k, t in model.params.items()}
        self.epoch = 0


def build_groups(model: Model, schedules: dict[str, ScheduleSpec], momentum: float = 0.9,
                 layer_scale_factor: float | None = None) -> list[ParamGroup]:
    """Partition the model's parameters into named learning-rate groups.

    Group names: branch1..branchN + classifier (+ policy for the gated arch);
    the single-backbone arch uses {backbone, classifier} with an optional
    layer-scale on the first conv block standing in for a third rate.
    """
    names = list(model.params)

    def members(prefix: str) -> list[str]:
        return [n for n in names if n.startswith(prefix)]

    if isinstance(model, AMFModel):
        wanted = [f"branch{i}" for i in range(1, model.n + 1)] + ["classifier", "policy"]
        prefixes = {g: g + "." for g in wanted}
    elif isinstance(model, MultiTuneModel):
        wanted = [f"branch{i}" for i in range(1, model.n + 1)] + ["classifier"]
        prefixes = {g: g + "." for g in wanted}
    elif isinstance(model, SingleModel):
        wanted = ["backbone", "classifier"]
        prefixes = {"backbone": "branch1.", "classifier": "classifier."}
    else:
        raise ConfigError(f"no group layout for arch {model.arch!r}")

    missing = [g for g in wanted if g not in schedules]
    if missing:
        raise ConfigError(f"missing schedules for groups: {missing}")

    groups = []
    for g in wanted:
        mem = members(prefixes[g])
        if not mem:
            raise ConfigError(f"group {g!r} matched no parameters")
        groups.append(ParamGroup(name=g, members=mem, schedule=schedules[g], momentum=momentum))

    covered: list[str] = sum((g.members for g in groups), [])
    if sorted(covered) != sorted(names) or len(covered) != len(set(covered)):
        raise ConfigError(f"group cover mismatch: {sorted(set(names) ^ set(covered))}")

    if layer_scale_factor is not None:
        # shallow-block reduction: each backbone's first conv block trains slower
        for g in groups:
            conv1 = sorted({m.rsplit(".", 2)[0] + ".conv1." for m in g.members if ".conv1." in m})
            for prefix in conv1:
                apply_layer_scale(g, prefix, layer_scale_factor)
    return groups


def sgd_step(model: Model, state: OptimizerState, groups: list[ParamGroup]) -> None:
    """One heavy-ball update over every group; requires grads on all members."""
    for g in groups:
        lr = lr_at_epoch(g.schedule, state.epoch)
        for name in g.members:
            p = model.params[name]
            if p.grad is None:
                raise UsageError(f"missing gradient for parameter {name!r}")
            v = state.velocity[name]
            v *= g.momentum
            v += p.grad
            p.data = (p.data - (lr * g.scale_for(name)) * v).astype(p.dtype)
