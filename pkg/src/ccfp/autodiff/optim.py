"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    first_moment: List[np.ndarray] = field(default_factory=list)
    second_moment: List[np.ndarray] = field(default_factory=list)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kwargs) -> "AdamState":
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            **kwargs,
        )

    def to_arrays(self, prefix: str) -> dict:
        out = {f"{prefix}.m{i}": m for i, m in enumerate(self.first_moment)}
        out.update({f"{prefix}.v{i}": v for i, v in enumerate(self.second_moment)})
        return out


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]],
              state: AdamState, lr: float) -> Sequence[Tensor]:
    """Apply one Adam update in place and return ``params``.

    A ``None`` gradient counts as zero, so the moments still decay.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    if len(state.first_moment) != len(params):
        raise DimensionError("Adam state tracks a different number of parameters")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise DimensionError(f"Adam moment shape {m.shape} != parameter shape {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / c1
        v_hat = v / c2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + state.eps_opt)).astype(p.dtype, copy=False)
    return params


class Adam:
    """Optimizer object over a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, **kwargs):
        self.params = list(params)
        self.lr = lr
        self.state = AdamState.for_params(self.params, **kwargs)

    def step(self, grads: Optional[Sequence[Optional[np.ndarray]]] = None, sign: float = 1.0) -> None:
        """Update with the parameters' own ``grad`` buffers (or ``grads``).

        ``sign=-1`` turns the step into gradient ascent.
        """
        if grads is None:
            grads = [p.grad for p in self.params]
        if sign != 1.0:
            grads = [None if g is None else sign * g for g in grads]
        adam_step(self.params, grads, self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
