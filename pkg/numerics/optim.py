# numerics/optim.py
"""AdamW with decoupled weight decay and the warmup + cosine schedule."""
import math
from dataclasses import dataclass, field

import numpy as np

from ticon_lab.exceptions import ConfigError, RangeError, ShapeError


@dataclass
class Schedule:
    base_lr: float
    warmup_iters: int
    total_iters: int
    floor_fraction: float = 0.1

    def __post_init__(self):
        if not 0 < self.warmup_iters <= self.total_iters:
            raise ConfigError(
                f'schedule needs 0 < warmup_iters <= total_iters, got {self.warmup_iters}/{self.total_iters}'
            )
        if not 0.0 <= self.floor_fraction < 1.0:
            raise ConfigError(f'floor_fraction must be in [0, 1), got {self.floor_fraction}')


def lr_at(iteration, sched):
    """Linear warmup from 0, then cosine decay to floor_fraction * base_lr."""
    if not 0 <= iteration <= sched.total_iters:
        raise RangeError(f'iteration {iteration} outside [0, {sched.total_iters}]')
    if iteration <= sched.warmup_iters:
        return sched.base_lr * iteration / sched.warmup_iters
    decay_span = sched.total_iters - sched.warmup_iters
    progress = (iteration - sched.warmup_iters) / decay_span
    floor = sched.floor_fraction * sched.base_lr
    return floor + (sched.base_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            first_moment={name: np.zeros(t.shape) for name, t in params.items()},
            second_moment={name: np.zeros(t.shape) for name, t in params.items()},
        )

    def add_params(self, params):
        """Start zero moments for newly added parameters."""
        for name, t in params.items():
            self.first_moment.setdefault(name, np.zeros(t.shape))
            self.second_moment.setdefault(name, np.zeros(t.shape))


def adamw_step(params, grads, state, lr, betas=(0.9, 0.95), weight_decay=0.0, eps=1e-8):
    """One AdamW update with bias-corrected moments.

    ``params`` maps names to Tensors, ``grads`` maps the names to update to
    gradient arrays; parameters without an entry in ``grads`` are left alone.
    Parameter arrays are replaced, never written into.
    """
    if lr < 0:
        raise RangeError(f'learning rate must be >= 0, got {lr}')
    beta1, beta2 = betas
    state.step_count += 1
    t = state.step_count
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape or state.first_moment[name].shape != p.shape:
            raise ShapeError(f'{name}: gradient {g.shape} / moment vs parameter {p.shape}')
        m = beta1 * state.first_moment[name] + (1.0 - beta1) * g
        v = beta2 * state.second_moment[name] + (1.0 - beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = (m / correction1) / (np.sqrt(v / correction2) + eps)
        p.data = p.data * (1.0 - lr * weight_decay) - lr * update
    return params, state
