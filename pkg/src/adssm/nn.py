"""Module container, layers and the Adam optimizer built on :mod:`adssm.tensor`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, ShapeError


class Module:
    """Named-parameter container.

    Parameters are :class:`Tensor` attributes with ``requires_grad``; child
    modules are attributes that are Modules or lists of Modules.  Names are
    dotted attribute paths, stable across runs, and define checkpoint layout.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(np.float32, copy=True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def param(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init_scale: float = 1.0):
        bound = init_scale / math.sqrt(d_in)
        self.weight = param(rng.uniform(-bound, bound, (d_in, d_out)))
        self.bias = param(np.zeros(d_out)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"Linear expects last dim {self.d_in}, got {x.shape}")
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.weight.data
        return y + self.bias.data if self.bias is not None else y


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = param(np.ones(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        ms = T.mean(x * x, axis=-1, keepdims=True)
        return x * T.power(ms + self.eps, -0.5) * self.weight

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        ms = np.mean(x * x, axis=-1, keepdims=True)
        return x / np.sqrt(ms + self.eps) * self.weight.data


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = T.mean(xc * xc, axis=-1, keepdims=True)
        return xc * T.power(var + self.eps, -0.5) * self.weight + self.bias

    def apply_np(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        return xc / np.sqrt(var + self.eps) * self.weight.data + self.bias.data


class Adam:
    """Adam with decoupled weight decay.

    Decay shrinks each parameter by ``1 - lr * weight_decay`` before the
    moment update is applied.
    """

    def __init__(self, params: list[Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.shape:
                raise ShapeError(f"adam: grad shape {g.shape} != param shape {p.shape}")
            if self.weight_decay:
                p.data *= 1 - lr * self.weight_decay
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)

    def state(self) -> dict:
        return {"t": self.t, "lr": self.lr, "betas": self.betas, "eps": self.eps,
                "weight_decay": self.weight_decay}


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: Adam) -> list[Tensor]:
    """Functional form: install ``grads`` on ``params`` and take one step."""
    if len(params) != len(grads):
        raise ShapeError("adam_step: params and grads differ in length")
    for p, g in zip(params, grads):
        p.grad = np.asarray(g, dtype=p.dtype)
    state.step()
    return params


def cosine_lr(step: int, total: int, peak: float, warmup_frac: float, floor: float = 0.0) -> float:
    """Linear warmup to ``peak`` then cosine decay to ``floor``."""
    warm = max(1, int(round(total * warmup_frac)))
    if step < warm:
        return peak * (step + 1) / warm
    progress = min(1.0, (step - warm) / max(1, total - warm))
    return floor + 0.5 * (peak - floor) * (1 + math.cos(math.pi * progress))
