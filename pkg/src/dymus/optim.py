"""Adam with bias correction over a named parameter set."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.state = AdamState(learning_rate=lr, beta1=beta1, beta2=beta2, epsilon=eps)
        for name, p in params.items():
            self.state.first_moment[name] = np.zeros_like(p.data)
            self.state.second_moment[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        s = self.state
        missing = [name for name, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"adam_step: parameter {missing[0]!r} has no gradient")
        s.step_count += 1
        bc1 = 1.0 - s.beta1 ** s.step_count
        bc2 = 1.0 - s.beta2 ** s.step_count
        for name, p in self.params.items():
            g = p.grad
            m = s.first_moment[name]
            v = s.second_moment[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            p.data -= s.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + s.epsilon)
            p.grad = np.zeros_like(p.data)


def adam_step(params: dict[str, Tensor], state: AdamState) -> AdamState:
    """Functional form: apply one update using (and mutating) ``state``."""
    opt = Adam.__new__(Adam)
    opt.params = params
    opt.state = state
    for name, p in params.items():
        state.first_moment.setdefault(name, np.zeros_like(p.data))
        state.second_moment.setdefault(name, np.zeros_like(p.data))
    opt.step()
    return state
