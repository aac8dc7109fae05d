"""Module container and the two generic layers (linear, layer norm)."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    """Holds parameters and sub-modules as attributes.

    Parameter names are dotted attribute paths in definition order, with list
    members addressed by index (``blocks.3.read.w_q``).
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def name_parameters(self) -> None:
        """Stamp each parameter with its full dotted path."""
        for name, p in self.named_parameters():
            p.name = name

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    """``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, *, bias: bool = True,
                 std: float = 0.02, dtype="f64"):
        dtype = T.resolve_dtype(dtype)
        self.weight = Parameter(normal(rng, (d_in, d_out), std, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, dtype="f64", eps: float = 1e-6):
        dtype = T.resolve_dtype(dtype)
        self.weight = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)
