"""Visual-conditioned prompt generator.

Learnable queries pass through self-attention, cross-attention over the
visual tokens [v; X], and a feed-forward layer, all as pre-LN residual
sublayers:

    Q_s = Q + SelfAttn(LN(Q))
    Q_c = Q_s + CrossAttn(LN(Q_s), LN([v; X]))
    P   = Q_c + FFN(LN(Q_c))

repeated `depth` times.  Because every sublayer ends in an output
projection, zeroing those projections makes each sublayer exactly zero and
P == Q bitwise (the residual-identity contract).

Two ablation structures are kept alongside the full one: self-attention
only (the visual input is ignored), and a meta-net that broadcast-adds a
small MLP of the global feature v onto the queries.
"""

from dataclasses import dataclass

import numpy as np

from tgpt.encoders import VisualFeatures, _broadcast_rows
from tgpt.layers import FeedForward, LayerNorm, Linear, MultiHeadAttention, prefix_params
from tgpt.numerics import ops
from tgpt.numerics.tensor import Tensor

STRUCTURES = ("cross_attention", "self_attention", "meta_net")


@dataclass
class BonderConfig:
    d: int
    k: int
    heads: int = 4
    depth: int = 1
    structure: str = "cross_attention"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"query count must be >= 1, got {self.k}")
        if self.depth < 1 or self.depth > 8:
            raise ValueError(f"depth must be in 1..8, got {self.depth}")
        if self.structure not in STRUCTURES:
            raise ValueError(f"unknown bonder structure {self.structure!r}")
        if self.d % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide width {self.d}")


class _Block:
    def __init__(self, d: int, heads: int, structure: str, init_rng):
        self.structure = structure
        self.ln_q = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads, init_rng)
        if structure == "cross_attention":
            self.ln_c = LayerNorm(d)
            self.ln_kv = LayerNorm(d)
            self.cross_attn = MultiHeadAttention(d, heads, init_rng)
        self.ln_f = LayerNorm(d)
        self.ffn = FeedForward(d, init_rng)

    def __call__(self, q, kv):
        normed = self.ln_q(q)
        q = ops.add(q, self.self_attn(normed, normed))
        if self.structure == "cross_attention":
            q = ops.add(q, self.cross_attn(self.ln_c(q), self.ln_kv(kv)))
        return ops.add(q, self.ffn(self.ln_f(q)))

    def params(self) -> dict:
        children = [("ln_q", self.ln_q), ("self_attn", self.self_attn)]
        if self.structure == "cross_attention":
            children += [("ln_c", self.ln_c), ("ln_kv", self.ln_kv),
                         ("cross_attn", self.cross_attn)]
        children += [("ln_f", self.ln_f), ("ffn", self.ffn)]
        out = {}
        for name, child in children:
            out.update(prefix_params(name, child.params()))
        return out


class BonderWeights:
    """The trainable transformation, separate from the queries so two
    branches can optionally share it."""

    def __init__(self, config: BonderConfig, init_rng):
        self.config = config
        if config.structure == "meta_net":
            hidden = max(config.d // 4, 1)
            self.meta_fc1 = Linear(config.d, hidden, init_rng)
            self.meta_fc2 = Linear(hidden, config.d, init_rng)
            self.blocks = []
        else:
            self.blocks = [
                _Block(config.d, config.heads, config.structure, init_rng)
                for _ in range(config.depth)
            ]

    def params(self) -> dict:
        if self.config.structure == "meta_net":
            out = prefix_params("meta_fc1", self.meta_fc1.params())
            out.update(prefix_params("meta_fc2", self.meta_fc2.params()))
            return out
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(prefix_params(f"block{i}", block.params()))
        return out


class Bonder:
    def __init__(self, config: BonderConfig, query_rng, weight_rng=None,
                 weights: BonderWeights = None):
        self.config = config
        self.q = Tensor(query_rng.normal(0.0, 0.02, (1, config.k, config.d)),
                        requires_grad=True)
        if weights is None:
            weights = BonderWeights(config, weight_rng)
        elif weights.config.structure != config.structure or weights.config.d != config.d:
            raise ValueError("shared bonder weights built for a different config")
        self.weights = weights

    def forward(self, visual: VisualFeatures) -> Tensor:
        batch = visual.v.shape[0]
        if visual.v.shape[-1] != self.config.d:
            raise ops.ShapeError(
                f"visual width {visual.v.shape[-1]} does not match bonder width {self.config.d}"
            )
        q = _broadcast_rows(self.q, batch)
        if self.config.structure == "meta_net":
            w = self.weights
            pi = w.meta_fc2(ops.relu(w.meta_fc1(visual.v)))
            return ops.add(q, ops.reshape(pi, (batch, 1, self.config.d)))
        kv = None
        if self.config.structure == "cross_attention":
            v_row = ops.reshape(visual.v, (batch, 1, self.config.d))
            kv = ops.concat([v_row, visual.x], axis=1)
        for block in self.weights.blocks:
            q = block(q, kv)
        return q

    def params(self) -> dict:
        out = {"q": self.q}
        out.update(prefix_params("w", self.weights.params()))
        return out


def make_branch_pair(d: int, heads: int, k_ctg: int, k_con: int, depth: int,
                     structure: str, init_streams: dict,
                     share_weights: bool = False):
    """Build the (category, content) bonder pair.

    init_streams carries independent generators under the keys
    'q_ctg', 'q_con', 'w_ctg', 'w_con'.  With share_weights the content
    branch reuses the category branch's BonderWeights (queries stay
    separate).
    """
    ctg = Bonder(BonderConfig(d=d, k=k_ctg, heads=heads, depth=depth, structure=structure),
                 init_streams["q_ctg"], init_streams["w_ctg"])
    con_cfg = BonderConfig(d=d, k=k_con, heads=heads, depth=depth, structure=structure)
    if share_weights:
        con = Bonder(con_cfg, init_streams["q_con"], weights=ctg.weights)
    else:
        con = Bonder(con_cfg, init_streams["q_con"], init_streams["w_con"])
    return ctg, con
