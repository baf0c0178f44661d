"""Minimal module system on top of :mod:`hiendmae.autodiff`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from hiendmae import autodiff as ad
from hiendmae.autodiff import Parameter, Tensor
from hiendmae.errors import ShapeMismatch

INIT_STD = 0.02


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Parameter container; children and parameters are discovered from attributes.

    Attribute insertion order defines parameter order, which in turn fixes
    the checkpoint manifest layout.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([p.size for p in self.parameters()]))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_out, d_in)))
        self.bias = Parameter(np.zeros(d_out), no_decay=True) if bias else None
        self.d_in = d_in
        self.d_out = d_out

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim), no_decay=True)
        self.bias = Parameter(np.zeros(dim), no_decay=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias)


class FeedForward(Module):
    def __init__(self, dim: int, ratio: float, rng: np.random.Generator):
        hidden = int(round(dim * ratio))
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Attention(Module):
    """Multi-head scaled dot-product attention with output projection.

    Keys and values may come from a different sequence (and width) than the
    queries, which is how the decoder's cross stages read encoder taps.
    When ``record`` is a dict, the attention probabilities (heads, Nq, Nk)
    and the concatenated value projection (Nk, dim) are stored in it.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: int | None = None):
        if dim % heads:
            raise ShapeMismatch(f"dim {dim} not divisible by heads {heads}")
        kv_dim = dim if kv_dim is None else kv_dim
        self.q = Linear(dim, dim, rng)
        # no key bias: softmax over keys is invariant to it, so its gradient is identically zero
        self.k = Linear(kv_dim, dim, rng, bias=False)
        self.v = Linear(kv_dim, dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.heads = heads
        self.dim = dim
        self.kv_dim = kv_dim

    def _split(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        return ad.permute(ad.reshape(x, (n, self.heads, self.dim // self.heads)), (1, 0, 2))

    def __call__(self, x: Tensor, context: Tensor | None = None, record: dict | None = None) -> Tensor:
        context = x if context is None else context
        if context.shape[-1] != self.kv_dim:
            raise ShapeMismatch(f"attention context width {context.shape[-1]} != {self.kv_dim}")
        n = x.shape[0]
        dk = self.dim // self.heads
        q = self._split(self.q(x))
        k = self._split(self.k(context))
        v_flat = self.v(context)
        v = self._split(v_flat)
        logits = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dk))
        probs = ad.softmax(logits)
        out = ad.matmul(probs, v)
        out = ad.reshape(ad.permute(out, (1, 0, 2)), (n, self.dim))
        if record is not None:
            record["attn"] = probs.data
            record["values"] = v_flat.data
        return self.proj(out)
