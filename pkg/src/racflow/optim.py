"""AdamW with decoupled weight decay and bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .tensor import DTYPE, Parameter


@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    def __init__(self, params: Sequence[Parameter], lr: float = 3e-4,
                 betas: tuple[float, float] = (0.9, 0.99), eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        b1, b2 = betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.params = [p for p in params if p.trainable]
        self.lr = lr
        self.betas = (b1, b2)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamWState(
            m={p.name: np.zeros_like(p.value.data) for p in self.params},
            v={p.name: np.zeros_like(p.value.data) for p in self.params},
        )

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        adamw_step(self.params, grads, self.state, self.lr, self.betas, self.eps,
                   self.weight_decay)


def adamw_step(params: Sequence[Parameter], grads: Mapping[str, np.ndarray],
               state: AdamWState, lr: float, betas: tuple[float, float] = (0.9, 0.99),
               eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Update ``params`` in place. Frozen parameters are skipped."""
    live = [p for p in params if p.trainable]
    for p in live:
        if p.name not in grads:
            raise KeyError(f"missing gradient for trainable parameter {p.name!r}")
    state.step += 1
    b1, b2 = betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p in live:
        g = np.asarray(grads[p.name], dtype=DTYPE)
        m = state.m.setdefault(p.name, np.zeros_like(p.value.data))
        v = state.v.setdefault(p.name, np.zeros_like(p.value.data))
        m *= DTYPE(b1)
        m += DTYPE(1.0 - b1) * g
        v *= DTYPE(b2)
        v += DTYPE(1.0 - b2) * (g * g)
        data = p.value.data
        if weight_decay:
            data -= DTYPE(lr * weight_decay) * data
        m_hat = m / DTYPE(bc1)
        v_hat = v / DTYPE(bc2)
        data -= DTYPE(lr) * m_hat / (np.sqrt(v_hat) + DTYPE(eps))
