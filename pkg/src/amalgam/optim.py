"""Stochastic gradient descent with momentum and polynomial rate decay."""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .tensor import Tensor


@dataclass
class OptimizerConfig:
    """Hyperparameters for :class:`SGD`.

    `poly_power` of zero disables the schedule (constant rate).  When the
    schedule is active, the rate at step t is lr * (1 - t/total)**power;
    `total_steps` of zero means the training loop has not planned its step
    count yet, and :class:`SGD` refuses to start until it is set.
    """

    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    poly_power: float = 0.0
    total_steps: int = 0

    def validate(self):
        if self.lr < 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be >= 0")
        if self.poly_power < 0:
            raise ConfigurationError("poly_power must be >= 0")
        if self.total_steps < 0:
            raise ConfigurationError("total_steps must be >= 0")
        return self


def reference_profile(total_steps: int = 0) -> OptimizerConfig:
    # settings used for the full-scale runs
    return OptimizerConfig(lr=0.005, momentum=0.9, weight_decay=4e-6,
                           poly_power=0.9, total_steps=total_steps)


def desk_profile() -> OptimizerConfig:
    # small-scale profile: constant rate, same decay/momentum elsewhere
    return OptimizerConfig(lr=0.01, momentum=0.9, weight_decay=4e-6)


class SGD:
    """Momentum SGD over an ordered list of (name, tensor) pairs.

    Update order follows the list, velocities are keyed by name, and
    nothing here draws randomness, so two optimizers fed identical
    gradients produce bit-identical parameters.  Weight decay is applied
    by adding wd * param to the gradient (the classic coupled form, i.e.
    the gradient of an L2 penalty folded into the step).
    """

    def __init__(self, params, config: OptimizerConfig):
        self.config = config.validate()
        if config.poly_power > 0 and config.total_steps <= 0:
            raise ConfigurationError(
                "poly decay needs total_steps > 0 so the schedule has an endpoint")
        self.params = list(params)
        seen = set()
        for name, t in self.params:
            if name in seen:
                raise ConfigurationError(f"duplicate parameter name {name!r}")
            seen.add(name)
            if not isinstance(t, Tensor):
                raise ConfigurationError(f"parameter {name!r} is not a tensor")
        self.velocity = {name: np.zeros_like(t.data) for name, t in self.params}
        self.steps_taken = 0

    def rate(self) -> float:
        cfg = self.config
        if cfg.poly_power == 0.0:
            return cfg.lr
        frac = min(self.steps_taken / cfg.total_steps, 1.0)
        return cfg.lr * (1.0 - frac) ** cfg.poly_power

    def step(self):
        lr = self.rate()
        mu = self.config.momentum
        wd = self.config.weight_decay
        for name, t in self.params:
            g = t.grad
            if g is None:
                continue
            if wd != 0.0:
                g = g + wd * t.data
            v = self.velocity[name]
            v *= mu
            v += g
            t.data -= lr * v
        self.steps_taken += 1

    def zero_grad(self):
        for _, t in self.params:
            t.grad = None
