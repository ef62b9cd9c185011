"""Miniature dual encoder.

The image side is a patch transformer producing a normalized global
feature v (CLS position) and the raw patch token sequence X.  The text
side is a transformer that either embeds token ids (pretraining, pooled at
the EOS position) or consumes pre-built prompt sequences that bypass the
embedding lookup (pooled at the last position by default).  Both sides are
frozen after pretraining; prompts are the only trainable inputs.
"""

from dataclasses import dataclass

import numpy as np

from tgpt.layers import EncoderBlock, LayerNorm, Linear, prefix_params, set_requires_grad
from tgpt.numerics import ops
from tgpt.numerics.tensor import Tensor


@dataclass
class ImageEncoderConfig:
    image_size: int = 32
    patch_size: int = 8
    d: int = 64
    depth: int = 2
    heads: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError(
                f"patch size {self.patch_size} must divide image size {self.image_size}"
            )
        if self.d % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide width {self.d}")

    @property
    def n_patch(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass
class TextEncoderConfig:
    d: int = 64
    depth: int = 2
    heads: int = 4
    max_len: int = 64
    # Pooling for prompt-mode inputs; token-id inputs always pool at EOS.
    pooling: str = "last_position"

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"heads {self.heads} must divide width {self.d}")
        if self.pooling not in ("last_position", "mean"):
            raise ValueError(f"unknown prompt pooling {self.pooling!r}")


@dataclass
class VisualFeatures:
    v: Tensor  # (B, d), L2-normalized global feature
    x: Tensor  # (B, n_patch, d), raw patch tokens (not L2-normalized)


def _broadcast_rows(row: Tensor, batch: int) -> Tensor:
    """Tile a (1, L, d) parameter to (B, L, d) differentiably."""
    ones = Tensor(np.ones((batch, 1, 1), dtype=row.data.dtype))
    return ops.mul(row, ones)


class ImageEncoder:
    def __init__(self, config: ImageEncoderConfig, init_rng):
        c = config
        self.config = c
        self.patch_proj = Linear(c.patch_size * c.patch_size * 3, c.d, init_rng)
        self.cls = Tensor(init_rng.normal(0.0, 0.02, (1, 1, c.d)), requires_grad=True)
        self.pos = Tensor(
            init_rng.normal(0.0, 0.02, (1, 1 + c.n_patch, c.d)), requires_grad=True
        )
        self.blocks = [EncoderBlock(c.d, c.heads, init_rng) for _ in range(c.depth)]
        self.ln_final = LayerNorm(c.d)

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        c = self.config
        n = c.image_size // c.patch_size
        b = images.shape[0]
        patches = images.reshape(b, n, c.patch_size, n, c.patch_size, 3)
        patches = patches.transpose(0, 1, 3, 2, 4, 5)
        return np.ascontiguousarray(
            patches.reshape(b, c.n_patch, c.patch_size * c.patch_size * 3)
        )

    def encode(self, images: np.ndarray) -> VisualFeatures:
        c = self.config
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.shape[1:] != (c.image_size, c.image_size, 3):
            raise ops.ShapeError(
                f"expected images (B, {c.image_size}, {c.image_size}, 3), "
                f"got {images.shape}"
            )
        x = self.patch_proj(Tensor(self._patchify(images)))
        cls = _broadcast_rows(self.cls, images.shape[0])
        x = ops.add(ops.concat([cls, x], axis=1), self.pos)
        for block in self.blocks:
            x = block(x)
        h = self.ln_final(x)
        v = ops.l2_normalize(ops.select_positions(h, np.zeros(images.shape[0], dtype=np.int64)))
        patch_tokens = ops.narrow(h, 1, 1, c.n_patch)
        return VisualFeatures(v=v, x=patch_tokens)

    def params(self) -> dict:
        out = {"patch_proj.w": self.patch_proj.w, "patch_proj.b": self.patch_proj.b,
               "cls": self.cls, "pos": self.pos}
        for i, block in enumerate(self.blocks):
            out.update(prefix_params(f"block{i}", block.params()))
        out.update(prefix_params("ln_final", self.ln_final.params()))
        return out

    def linears(self) -> dict:
        """Named linear maps, for adapter placement."""
        out = {}
        for i, block in enumerate(self.blocks):
            out[f"block{i}.ffn.fc1"] = block.ffn.fc1
            out[f"block{i}.ffn.fc2"] = block.ffn.fc2
            out[f"block{i}.attn.wq"] = block.attn.wq
            out[f"block{i}.attn.wk"] = block.attn.wk
            out[f"block{i}.attn.wv"] = block.attn.wv
            out[f"block{i}.attn.wo"] = block.attn.wo
        return out

    def freeze(self) -> None:
        set_requires_grad(self.params(), False)


class TextEncoder:
    """Shared transformer trunk for token ids and prompt sequences.

    The embedding table lives outside (tokenizer module) because the
    vocabulary-space loss reuses it; both input modes share every
    transformer weight here.
    """

    def __init__(self, config: TextEncoderConfig, init_rng):
        c = config
        self.config = c
        self.pos = Tensor(init_rng.normal(0.0, 0.02, (1, c.max_len, c.d)), requires_grad=True)
        self.blocks = [EncoderBlock(c.d, c.heads, init_rng) for _ in range(c.depth)]
        self.ln_final = LayerNorm(c.d)

    def _trunk(self, x, key_mask=None) -> Tensor:
        length = x.shape[1]
        x = ops.add(x, ops.narrow(self.pos, 1, 0, length))
        for block in self.blocks:
            x = block(x, key_mask=key_mask)
        return self.ln_final(x)

    def encode_ids(self, table, ids, mask) -> Tensor:
        """Embed ids, run the trunk with PAD positions masked out of
        attention, pool at the EOS position, L2-normalize."""
        ids = np.asarray(ids)
        mask = np.asarray(mask)
        if ids.ndim == 1:
            ids, mask = ids[None], mask[None]
        if ids.shape[1] > self.config.max_len:
            raise ops.ShapeError(
                f"sequence length {ids.shape[1]} exceeds max_len {self.config.max_len}"
            )
        h = self._trunk(table.lookup(ids), key_mask=mask)
        eos_idx = mask.sum(axis=1) - 1
        return ops.l2_normalize(ops.select_positions(h, eos_idx))

    def encode_prompts(self, prompts) -> Tensor:
        """Run pre-embedded prompt sequences (B, K, d) through the same
        trunk; no PAD masking (every prompt position is real)."""
        if prompts.ndim == 2:
            prompts = ops.reshape(prompts, (1,) + tuple(prompts.shape))
        k = prompts.shape[1]
        if k > self.config.max_len:
            raise ops.ShapeError(
                f"prompt length {k} exceeds max_len {self.config.max_len}"
            )
        h = self._trunk(prompts)
        if self.config.pooling == "mean":
            pooled = ops.tmean(h, axis=1)
        else:
            last = np.full(h.shape[0], k - 1, dtype=np.int64)
            pooled = ops.select_positions(h, last)
        return ops.l2_normalize(pooled)

    def params(self) -> dict:
        out = {"pos": self.pos}
        for i, block in enumerate(self.blocks):
            out.update(prefix_params(f"block{i}", block.params()))
        out.update(prefix_params("ln_final", self.ln_final.params()))
        return out

    def linears(self) -> dict:
        out = {}
        for i, block in enumerate(self.blocks):
            out[f"block{i}.ffn.fc1"] = block.ffn.fc1
            out[f"block{i}.ffn.fc2"] = block.ffn.fc2
            out[f"block{i}.attn.wq"] = block.attn.wq
            out[f"block{i}.attn.wk"] = block.attn.wk
            out[f"block{i}.attn.wv"] = block.attn.wv
            out[f"block{i}.attn.wo"] = block.attn.wo
        return out

    def freeze(self) -> None:
        set_requires_grad(self.params(), False)
