"""Hyperparameter schedules: learning rate, softmax temperature, routing threshold."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .substrate import ConfigurationError


@dataclass(frozen=True)
class ScheduleSet:
    base_lr: float = 0.025
    # periodic rule: multiply by lr_period_factor every lr_period iterations (0 disables)
    lr_period: int = 15000
    lr_period_factor: float = 0.5
    # explicit rule: (iteration, factor) pairs applied cumulatively once reached
    lr_milestones: tuple[tuple[int, float], ...] = ()
    momentum: float = 0.9
    tau0: float = 25.0
    tau_decay: float = 0.9999
    tau_period: int = 2
    tau_min: float = 1.0
    # (epoch, rho) steps; the last entry whose epoch <= current epoch wins
    rho_phases: tuple[tuple[int, float], ...] = ((0, 0.0), (25, 0.4))
    lambda_ig: float = 1.0
    lambda_balance: float = 2.0
    lambda_f: float = 5e-5
    lambda_h: float = 9e-4
    dropout_f: float | None = None
    dropout_h: float | None = None
    batch_size: int = 125
    epochs: int = 100

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "lr_milestones", tuple((int(i), float(f)) for i, f in self.lr_milestones)
        )
        object.__setattr__(self, "rho_phases", tuple((int(e), float(r)) for e, r in self.rho_phases))
        if self.base_lr <= 0:
            raise ConfigurationError("base_lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError("momentum must be in [0, 1)")
        if self.tau0 <= 0 or self.tau_min <= 0:
            raise ConfigurationError("temperatures must be positive")
        if not 0 < self.tau_decay <= 1 or self.tau_period < 1:
            raise ConfigurationError("tau_decay must be in (0, 1] and tau_period >= 1")
        if self.lr_period < 0:
            raise ConfigurationError("lr_period must be >= 0")
        if not self.rho_phases or self.rho_phases[0][0] != 0:
            raise ConfigurationError("rho_phases must start at epoch 0")
        if any(r < 0 for _, r in self.rho_phases):
            raise ConfigurationError("rho values must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")
        for name in ("lambda_f", "lambda_h", "lambda_ig"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")

    def replace(self, **changes) -> "ScheduleSet":
        return dataclasses.replace(self, **changes)

    def check_rho(self, k: int) -> None:
        for epoch, rho in self.rho_phases:
            if rho > 1.0 / k + 1e-12:
                raise ConfigurationError(f"rho={rho} at epoch {epoch} exceeds 1/K = {1.0 / k:.6g}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_milestones"] = [list(m) for m in self.lr_milestones]
        d["rho_phases"] = [list(p) for p in self.rho_phases]
        return d


MNIST_SCHEDULE = ScheduleSet()

FASHION_SCHEDULE = ScheduleSet(
    base_lr=0.01,
    lr_period=0,
    lr_milestones=((15000, 0.5), (30000, 0.5), (40000, 0.1)),
    lambda_balance=5.0,
    lambda_f=0.0,
    lambda_h=0.0,
)


def lr_at(schedule: ScheduleSet, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    lr = schedule.base_lr
    if schedule.lr_period:
        lr *= schedule.lr_period_factor ** (iteration // schedule.lr_period)
    for at, factor in schedule.lr_milestones:
        if iteration >= at:
            lr *= factor
    return lr


def tau_at(schedule: ScheduleSet, iteration: int) -> float:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    steps = iteration // schedule.tau_period
    # the floor is reached long before decay**steps underflows
    if steps * -math.log(schedule.tau_decay) > math.log(schedule.tau0 / schedule.tau_min) + 1:
        return schedule.tau_min
    return max(schedule.tau_min, schedule.tau0 * schedule.tau_decay**steps)


def rho_at(schedule: ScheduleSet, epoch: int, mode: str = "train") -> float:
    """Routing threshold for ``epoch``; evaluation never thresholds, so it gets 0."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if mode == "eval":
        return 0.0
    rho = schedule.rho_phases[0][1]
    for start, value in schedule.rho_phases:
        if epoch >= start:
            rho = value
    return rho
