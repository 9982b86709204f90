"""Parameter containers and small layers built on the tape ops."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ParamStore:
    """Named, insertion-ordered collection of trainable tensors."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        bound = 1.0 / np.sqrt(fan_in)
        p = Tensor(self.rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = [k for k in self.params if k not in state]
        if missing:
            raise KeyError(f"checkpoint lacks tensor {missing[0]!r}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"tensor {k!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(T.DTYPE, copy=True)


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        self.w = store.uniform(f"{name}.w", (n_in, n_out), n_in)
        self.b = store.uniform(f"{name}.b", (n_out,), n_in)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise T.ShapeError(f"linear {self.w.name}: expected last dim {self.n_in}, got {x.shape}")
        return T.add(T.matmul(x, self.w), self.b)


class MLP:
    """Linear layers with leaky ReLU between them (none after the last)."""

    def __init__(self, store: ParamStore, name: str, sizes: list[int]):
        self.layers = [Linear(store, f"{name}.{i}", a, b) for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.leaky_relu(x)
        return x


class GRU:
    """Single-layer GRU run over the time axis with a per-step validity mask.

    Steps whose mask is 0 leave the hidden state untouched.
    """

    def __init__(self, store: ParamStore, name: str, n_in: int, hidden: int):
        self.hidden = hidden
        self.w_ih = store.uniform(f"{name}.w_ih", (n_in, 3 * hidden), hidden)
        self.w_hh = store.uniform(f"{name}.w_hh", (hidden, 3 * hidden), hidden)
        self.b_ih = store.uniform(f"{name}.b_ih", (3 * hidden,), hidden)
        self.b_hh = store.uniform(f"{name}.b_hh", (3 * hidden,), hidden)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        """``x``: (..., T, F); ``mask``: (..., T). Returns the final hidden state (..., H)."""
        lead = x.shape[:-2]
        h = Tensor(np.zeros(lead + (self.hidden,)))
        for t in range(x.shape[-2]):
            step = T.gru_cell(x[..., t, :], h, self.w_ih, self.w_hh, self.b_ih, self.b_hh)
            m = mask[..., t]
            if m.all():
                h = step
            elif m.any():
                h = T.where(m[..., None], step, h)
        return h
