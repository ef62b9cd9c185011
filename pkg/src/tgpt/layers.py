"""Transformer building blocks shared by the encoders and the prompt
generator: linear maps (with an optional low-rank adapter slot), layer
norm, multi-head attention, and the pre-LN residual encoder block."""

import numpy as np

from tgpt.numerics import ops
from tgpt.numerics.tensor import Tensor


class Linear:
    """y = x @ w.T + b with w shaped (d_out, d_in).

    When a low-rank adapter is attached, the forward adds
    scale * (x @ a.T) @ b.T without touching the base weight.
    """

    def __init__(self, d_in: int, d_out: int, init_rng, bias: bool = True,
                 init_std: float = 0.02):
        self.d_in = d_in
        self.d_out = d_out
        self.w = Tensor(init_rng.normal(0.0, init_std, (d_out, d_in)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True) if bias else None
        self.adapter = None

    def __call__(self, x) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ops.ShapeError(
                f"linear expects last dim {self.d_in}, got input shape {x.shape}"
            )
        y = ops.matmul(x, ops.transpose_last2(self.w))
        if self.adapter is not None:
            low = ops.matmul(x, ops.transpose_last2(self.adapter.a))
            delta = ops.matmul(low, ops.transpose_last2(self.adapter.b))
            y = ops.add(y, ops.scale(delta, self.adapter.scale))
        if self.b is not None:
            y = ops.add(y, self.b)
        return y

    def params(self) -> dict:
        out = {"w": self.w}
        if self.b is not None:
            out["b"] = self.b
        return out


class LayerNorm:
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta, self.eps)

    def params(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}


class MultiHeadAttention:
    def __init__(self, d: int, heads: int, init_rng):
        self.heads = heads
        self.wq = Linear(d, d, init_rng)
        self.wk = Linear(d, d, init_rng)
        self.wv = Linear(d, d, init_rng)
        self.wo = Linear(d, d, init_rng)

    def __call__(self, queries, keys_values, key_mask=None) -> Tensor:
        ctx = ops.attention(
            self.wq(queries),
            self.wk(keys_values),
            self.wv(keys_values),
            self.heads,
            key_mask=key_mask,
        )
        return self.wo(ctx)

    def params(self) -> dict:
        out = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            for k, p in lin.params().items():
                out[f"{name}.{k}"] = p
        return out


class FeedForward:
    def __init__(self, d: int, init_rng, mult: int = 4):
        self.fc1 = Linear(d, mult * d, init_rng)
        self.fc2 = Linear(mult * d, d, init_rng)

    def __call__(self, x) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))

    def params(self) -> dict:
        out = {}
        for name, lin in (("fc1", self.fc1), ("fc2", self.fc2)):
            for k, p in lin.params().items():
                out[f"{name}.{k}"] = p
        return out


class EncoderBlock:
    """Pre-LN residual block: x + Attn(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, d: int, heads: int, init_rng):
        self.ln1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads, init_rng)
        self.ln2 = LayerNorm(d)
        self.ffn = FeedForward(d, init_rng)

    def __call__(self, x, key_mask=None) -> Tensor:
        normed = self.ln1(x)
        x = ops.add(x, self.attn(normed, normed, key_mask=key_mask))
        return ops.add(x, self.ffn(self.ln2(x)))

    def params(self) -> dict:
        out = {}
        for name, child in (("ln1", self.ln1), ("attn", self.attn),
                            ("ln2", self.ln2), ("ffn", self.ffn)):
            for k, p in child.params().items():
                out[f"{name}.{k}"] = p
        return out


def prefix_params(prefix: str, params: dict) -> dict:
    return {f"{prefix}.{k}": p for k, p in params.items()}


def set_requires_grad(params: dict, flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag
        if not flag:
            p.grad = None
