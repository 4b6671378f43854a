"""AdamW with decoupled weight decay, and the warmup + cosine learning-rate
schedule (linear 0 -> base over the warmup, cosine base -> floor after)."""

import math
from typing import Iterable, List, Optional

import numpy as np

from .tensor import Parameter

BASE_LR = 2e-4
MIN_LR = 1e-9
WEIGHT_DECAY = 1e-5
BETAS = (0.9, 0.999)


class AdamW:
    """Decoupled weight decay: the decay multiplies weights directly and never
    enters the moment estimates."""

    def __init__(self, params: Iterable[Parameter], lr: float = BASE_LR,
                 betas=BETAS, eps: float = 1e-8, weight_decay: float = WEIGHT_DECAY):
        self.params: List[Parameter] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def lr_schedule(step: int, warmup_steps: int, total_steps: int,
                base_lr: float = BASE_LR, min_lr: float = MIN_LR) -> float:
    """Learning rate at an optimizer step.

    Linear warmup from 0 at step 0 to base_lr at step == warmup_steps, then
    cosine annealing that reaches min_lr exactly at step == total_steps.
    Monotone non-increasing after the warmup.
    """
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0 or step >= total_steps:
        return min_lr
    progress = (step - warmup_steps) / span
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))
