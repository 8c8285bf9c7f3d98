"""AdamW with a step-wise per-epoch learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


def rate_at(schedule: list[tuple[int, float]], epoch: int) -> float:
    """Rate of the last schedule entry whose start epoch is <= ``epoch``."""
    rate = None
    for start, value in sorted(schedule):
        if start <= epoch:
            rate = value
    if rate is None:
        raise ValueError(f"schedule {schedule} has no entry at or before epoch {epoch}")
    return rate


@dataclass
class OptimizerState:
    schedule: list[tuple[int, float]]
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    first: list[np.ndarray] = field(default_factory=list)
    second: list[np.ndarray] = field(default_factory=list)


class AdamW:
    def __init__(self, params: list[Tensor], schedule, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(
            schedule=[(int(e), float(r)) for e, r in schedule],
            weight_decay=weight_decay,
            betas=tuple(betas),
            eps=eps,
            first=[np.zeros_like(p.data) for p in self.params],
            second=[np.zeros_like(p.data) for p in self.params],
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, epoch: int):
        st = self.state
        lr = rate_at(st.schedule, epoch)
        b1, b2 = st.betas
        st.step += 1
        c1 = 1.0 - b1**st.step
        c2 = 1.0 - b2**st.step
        for p, m, v in zip(self.params, st.first, st.second):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif g.shape != p.data.shape:
                raise ValueError(f"grad shape {g.shape} does not match parameter shape {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if st.weight_decay:
                p.data = p.data * (1.0 - lr * st.weight_decay)
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        return lr
