"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .errors import ArgumentError
from .tensor import Tensor


@dataclass
class AdamWState:
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)

    def hyperparameters(self) -> Dict[str, float]:
        return {"learning_rate": self.learning_rate, "weight_decay": self.weight_decay,
                "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamWState) -> None:
    """One in-place AdamW update of ``params``.

    Decay is applied multiplicatively before the Adam step, so a zero
    gradient shrinks each parameter by exactly ``1 - lr * weight_decay``.
    """
    if len(params) != len(grads):
        raise ArgumentError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise ArgumentError("optimizer state was built for a different parameter list")
    for p, g, m in zip(params, grads, state.first_moment):
        if g is None or g.shape != p.shape or m.shape != p.shape:
            raise ArgumentError(f"gradient shape {None if g is None else g.shape} "
                                f"does not match parameter {p.name or ''} shape {p.shape}")

    state.step_count += 1
    t = state.step_count
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    decay = 1.0 - lr * state.weight_decay
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data *= decay
        p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.epsilon)


class AdamW:
    """Thin stateful wrapper that reads ``.grad`` off each parameter."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamWState(learning_rate=lr, weight_decay=weight_decay,
                                beta1=betas[0], beta2=betas[1], epsilon=eps)

    def step(self, scale: float = 1.0) -> None:
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads.append(g * scale if scale != 1.0 else g)
        adamw_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
