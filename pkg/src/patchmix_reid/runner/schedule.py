"""Learning-rate schedule: linear warm-up, then step decay."""
from __future__ import annotations

from dataclasses import dataclass

from ..errors import InputError


@dataclass(frozen=True)
class LRSchedule:
    base_lr: float = 0.1
    warmup_epochs: int = 10
    milestones: tuple[int, ...] = (30, 60, 90)
    gamma: float = 0.1
    total_epochs: int = 101


def lr_schedule(epoch: float, sched: LRSchedule = LRSchedule()) -> float:
    """Linear ``0 -> base_lr`` over ``[0, warmup]``, then ``base_lr`` times
    ``gamma`` for every milestone strictly passed (so epoch 31 is the first
    decayed epoch for milestone 30)."""
    if not 0 <= epoch <= sched.total_epochs:
        raise InputError(f"epoch {epoch} outside [0, {sched.total_epochs}]")
    if sched.warmup_epochs and epoch < sched.warmup_epochs:
        return sched.base_lr * epoch / sched.warmup_epochs
    passed = sum(1 for m in sched.milestones if epoch > m)
    inv = 1.0 / sched.gamma
    if abs(inv - round(inv)) < 1e-9:
        # divide by an integer power: 0.1 / 10 == 0.01 exactly, 0.1 * 0.1 is not
        return sched.base_lr / round(inv) ** passed
    return sched.base_lr * sched.gamma ** passed
