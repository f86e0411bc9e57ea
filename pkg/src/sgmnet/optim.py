"""Parameter optimizers: SGD with momentum and Adam (L2 penalty folded into the gradient)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DTYPE, Tensor


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning rate must be non-negative, got {self.learning_rate}")


def _grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for name, p in params.items():
        if p.grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
        out[name] = p.grad
    return out


def sgd_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """v <- mu*v + g + wd*theta ; theta <- theta - lr*v."""
    grads = _grads(params)
    for name, p in params.items():
        g = grads[name] + state.weight_decay * p.data
        buf = state.buffers.setdefault(name, {})
        v = buf.get("v")
        v = g.copy() if v is None else state.momentum * v + g
        buf["v"] = v.astype(DTYPE)
        p.data = (p.data - state.learning_rate * v).astype(DTYPE)
    state.step_count += 1


def adam_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    grads = _grads(params)
    b1, b2 = state.betas
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name] + state.weight_decay * p.data
        buf = state.buffers.setdefault(name, {})
        m = buf.get("m", np.zeros_like(p.data))
        v = buf.get("v", np.zeros_like(p.data))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        buf["m"], buf["v"] = m.astype(DTYPE), v.astype(DTYPE)
        update = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(DTYPE)


def step(params: dict[str, Tensor], state: OptimizerState) -> None:
    if state.kind == "sgd":
        sgd_step(params, state)
    else:
        adam_step(params, state)


def zero_grad(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def step_decay_lr(base_lr: float, epoch: int, total_epochs: int,
                  milestones=(0.6, 0.8, 0.9), gamma: float = 0.1) -> float:
    """Step schedule with milestones given as fractions of the run (60/80/90 of 100 epochs by default)."""
    passed = sum(1 for m in milestones if epoch >= int(round(m * total_epochs)))
    return base_lr * gamma ** passed
