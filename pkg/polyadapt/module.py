"""Parameter containers with stable dotted names."""
from __future__ import annotations

from typing import Any, Iterator

import numpy as np

from .errors import CheckpointError
from .tensor import Parameter


class Module:
    """Base class walking attributes to find parameters and submodules.

    Attributes are visited in assignment order, so parameter names (and the
    order of random initialization) are stable for a given configuration.
    Lists and string-keyed dicts of modules or parameters are traversed too.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            for child in _children(value):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for module in self.modules():
            module.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def astype(self, dtype: Any) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], *, strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            if missing or extra:
                raise CheckpointError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            if name not in params:
                continue
            assign(params[name], value, name)

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.data.size for p in self.parameters() if p.requires_grad or not trainable_only)


def assign(param: Parameter, value: np.ndarray, name: str) -> None:
    if param.data.shape != tuple(value.shape):
        raise CheckpointError(f"tensor {name}: checkpoint shape {tuple(value.shape)} != model shape {param.data.shape}")
    param.data = np.array(value, dtype=param.data.dtype)


def _walk(value: Any, name: str) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=f"{name}.")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{name}.{key}")


def _children(value: Any) -> Iterator[Module]:
    if isinstance(value, Module):
        yield value
    elif isinstance(value, (list, tuple)):
        for item in value:
            yield from _children(item)
    elif isinstance(value, dict):
        for item in value.values():
            yield from _children(item)


def init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, dtype: Any = np.float32) -> Parameter:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return Parameter(rng.normal(0.0, std, size=(fan_in, fan_out)), dtype=dtype)


def zeros(shape: tuple[int, ...] | int, dtype: Any = np.float32) -> Parameter:
    return Parameter(np.zeros(shape), dtype=dtype)


def ones(shape: tuple[int, ...] | int, dtype: Any = np.float32) -> Parameter:
    return Parameter(np.ones(shape), dtype=dtype)
