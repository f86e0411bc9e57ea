"""Small layer library on top of :mod:`sgmnet.tensor`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import DTYPE, RunningStats, Tensor


class Module:
    """Attribute-scanning container: Tensor attributes are parameters,
    ``RunningStats`` are buffers, nested Modules (and lists of them) are walked."""

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    yield f"{key}.{i}", item
            else:
                yield key, val

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in self._children():
            if isinstance(val, Tensor):
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + key + "."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, RunningStats]:
        out: dict[str, RunningStats] = {}
        for key, val in self._children():
            if isinstance(val, RunningStats):
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_buffers(prefix + key + "."))
        return out

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, val in self._children():
            if isinstance(val, Module):
                val.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: p.data.copy() for k, p in self.named_parameters().items()}
        for k, s in self.named_buffers().items():
            out[k + ".running_mean"] = s.mean.copy()
            out[k + ".running_var"] = s.var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for k, p in self.named_parameters().items():
            key = prefix + k
            if key not in state:
                raise KeyError(f"missing tensor {key!r} in state")
            if state[key].shape != p.shape:
                raise ValueError(f"tensor {key!r}: stored shape {state[key].shape} != expected {p.shape}")
            p.data = np.array(state[key], dtype=DTYPE)
        for k, s in self.named_buffers().items():
            s.mean = np.array(state[prefix + k + ".running_mean"], dtype=DTYPE)
            s.var = np.array(state[prefix + k + ".running_var"], dtype=DTYPE)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _fan_in_normal(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w.astype(DTYPE), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = _fan_in_normal(rng, (d_in, d_out), d_in)
        self.bias = Tensor(np.zeros(d_out, dtype=DTYPE), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise T.DimensionError(f"Linear expects last dim {self.weight.shape[0]}, got {x.shape}")
        return T.linear(x, self.weight, self.bias)


class MLP2(Module):
    """Linear -> ReLU -> Linear. The output layer is linear."""

    def __init__(self, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.fc1 = Linear(d_in, hidden, rng)
        self.fc2 = Linear(hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class ConvBlock(Module):
    """3×3 conv (pad 1) + batchnorm + ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.kernel = _fan_in_normal(rng, (c_out, c_in, 3, 3), c_in * 9)
        self.bias = Tensor(np.zeros(c_out, dtype=DTYPE), requires_grad=True)
        self.gamma = Tensor(np.ones(c_out, dtype=DTYPE), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out, dtype=DTYPE), requires_grad=True)
        self.bn = RunningStats(c_out)

    def forward(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.kernel, self.bias)
        return T.batchnorm2d(y, self.gamma, self.beta, self.bn, train=self.training, relu_after=True)


def set_trainable(module: Module, flag: bool) -> None:
    for p in module.named_parameters().values():
        p.requires_grad = flag
        p.grad = None
