"""Parameter containers: a tiny Module tree with stable dotted parameter names."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from ..rng import stream
from . import functional as F
from .tensor import ShapeError, Tensor, gelu, relu


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Attributes holding grad-tracking tensors are parameters; attributes holding
    Modules (or lists of them) are children.  Names follow attribute paths."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grads(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state does not match the parameter set: missing {missing[:5]}, "
                               f"unexpected {unexpected[:5]}")
        for name, p in params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, seed: int, name: str, bias: bool = True, zero: bool = False):
        w = np.zeros((d_in, d_out)) if zero else xavier(stream(seed, name), d_in, d_out, (d_in, d_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, seed: int, name: str,
                 stride: int = 1, pad: int = 0, zero: bool = False):
        shape = (c_out, c_in, k, k)
        if zero:
            w = np.zeros(shape)
        else:
            # He-uniform: the convs here are followed by ReLU
            bound = np.sqrt(6.0 / (c_in * k * k))
            w = stream(seed, name).uniform(-bound, bound, size=shape)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(c_out))
        self.stride, self.pad = stride, pad

    def __call__(self, x) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class MLP(Module):
    """Stack of Linear layers with ReLU between them; ``zero_last`` zero-initialises
    the output layer."""

    def __init__(self, dims: list[int], seed: int, name: str, zero_last: bool = False, act: str = "relu"):
        n = len(dims) - 1
        self.layers = [Linear(dims[i], dims[i + 1], seed, f"{name}.{i}", zero=zero_last and i == n - 1)
                       for i in range(n)]
        self.act = act

    def __call__(self, x) -> Tensor:
        act = relu if self.act == "relu" else gelu
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, seed: int, name: str):
        if dim % heads:
            raise F.ParameterError(f"model dimension {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.wq = Linear(dim, dim, seed, name + ".wq")
        # a key bias only shifts every score of a query by the same amount, which
        # softmax ignores, so keys are projected without one
        self.wk = Linear(dim, dim, seed, name + ".wk", bias=False)
        self.wv = Linear(dim, dim, seed, name + ".wv")
        self.wo = Linear(dim, dim, seed, name + ".wo")

    def __call__(self, q, k, v, mask: np.ndarray | None = None) -> Tensor:
        return F.multi_head_attention(
            q, k, v, self.heads,
            self.wq.weight, self.wk.weight, self.wv.weight, self.wo.weight,
            self.wq.bias, None, self.wv.bias, self.wo.bias, mask=mask)
