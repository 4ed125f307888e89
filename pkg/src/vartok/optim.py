"""AdamW with decoupled weight decay and linear-warmup scheduling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingError
from .tensor import Tensor


@dataclass
class OptimizerState:
    """Moment accumulators plus schedule bookkeeping for one parameter set.

    `peak_lr` is reached after `warmup_steps` linear-ramp steps and held
    constant afterwards.
    """

    peak_lr: float = 2e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self, step: int | None = None) -> float:
        """LR used by the step numbered `step` (1-based; default: next step)."""
        s = self.step + 1 if step is None else step
        if self.warmup_steps > 0 and s < self.warmup_steps:
            return self.peak_lr * s / self.warmup_steps
        return self.peak_lr

    def state_arrays(self) -> dict:
        out = {}
        for name, arr in self.m.items():
            out[f"m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"v.{name}"] = arr
        return out


def adamw_step(params: dict[str, Tensor], state: OptimizerState) -> float:
    """Apply one decoupled-weight-decay adaptive update in place.

    Gradients are read from each parameter's `.grad`; parameters with no
    gradient this step are left untouched (their moments do not advance
    either, matching sparse-use layers like the null embedding).

    Returns the learning rate that was applied.
    Raises TrainingError naming the parameter on any non-finite gradient.
    """
    state.step += 1
    lr = state.learning_rate(state.step)
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p.data
        p.data -= lr * update
    return lr


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
