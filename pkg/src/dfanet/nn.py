"""Parameter containers: linear maps, batch norm and the shared-MLP block."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import (
    BatchNormState,
    ParamSet,
    Tensor,
    batch_norm,
    leaky_relu,
    linear,
)


class Module:
    """Base class that discovers parameters and batch-norm states by attribute."""

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module, BatchNormState)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, (Tensor, Module, BatchNormState)):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def named_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, BatchNormState):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_states(full + ".")

    def param_set(self) -> ParamSet:
        return ParamSet(self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for _, p in self.named_parameters() if p.requires_grad))


class Linear(Module):
    """``y = x @ weight + bias`` with fan-in uniform initialisation."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32,
                 bias: bool = True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (d_in, d_out)).astype(dtype), requires_grad=True)
        self.bias = (Tensor(rng.uniform(-bound, bound, d_out).astype(dtype), requires_grad=True)
                     if bias else None)

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.state = BatchNormState.create(channels, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.state, training)


class LinearBNAct(Module):
    """Shared MLP block: linear -> batch norm -> LeakyReLU over the last axis."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32):
        self.linear = Linear(d_in, d_out, rng, dtype)
        self.bn = BatchNorm(d_out, dtype)

    @property
    def d_in(self) -> int:
        return self.linear.d_in

    @property
    def d_out(self) -> int:
        return self.linear.d_out

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return leaky_relu(self.bn(self.linear(x), training))
