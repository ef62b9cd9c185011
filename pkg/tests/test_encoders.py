"""Dual-encoder behavior: shapes, pooling, masking, and the frozen contract."""

import numpy as np
import pytest

from tgpt import rng as rngmod
from tgpt.encoders import (ImageEncoder, ImageEncoderConfig, TextEncoder,
                           TextEncoderConfig)
from tgpt.numerics import ops
from tgpt.numerics.tensor import Tensor, no_grad
from tgpt.tokenizer import EmbeddingTable, Vocabulary


def small_image_encoder(seed=0, depth=2):
    cfg = ImageEncoderConfig(image_size=16, patch_size=8, d=32, depth=depth, heads=4)
    return ImageEncoder(cfg, rngmod.stream(seed, "test/imgenc"))


def small_text_encoder(seed=0, pooling="last_position"):
    cfg = TextEncoderConfig(d=32, depth=2, heads=4, max_len=12, pooling=pooling)
    return TextEncoder(cfg, rngmod.stream(seed, "test/txtenc"))


def small_table(seed=0, d=32):
    vocab = Vocabulary.build(["a red circle near the top left with one blue square"])
    return vocab, EmbeddingTable(vocab.d_v, d, rngmod.stream(seed, "test/table"))


class TestImageEncoder:
    def test_output_shapes_and_normalization(self):
        enc = small_image_encoder()
        images = rngmod.stream(1, "t/img").uniform(0, 1, (3, 16, 16, 3))
        with no_grad():
            feats = enc.encode(images.astype(np.float32))
        assert feats.v.shape == (3, 32)
        assert feats.x.shape == (3, 4, 32)
        np.testing.assert_allclose(
            np.linalg.norm(feats.v.data, axis=1), 1.0, atol=1e-5)

    def test_single_image_is_batched(self):
        enc = small_image_encoder()
        img = rngmod.stream(2, "t/img1").uniform(0, 1, (16, 16, 3)).astype(np.float32)
        with no_grad():
            feats = enc.encode(img)
        assert feats.v.shape == (1, 32)

    def test_wrong_size_rejected(self):
        enc = small_image_encoder()
        with pytest.raises(ops.ShapeError):
            enc.encode(np.zeros((2, 8, 8, 3), dtype=np.float32))

    def test_patchify_extracts_blocks(self):
        enc = small_image_encoder()
        img = np.arange(16 * 16 * 3, dtype=np.float32).reshape(1, 16, 16, 3)
        patches = enc._patchify(img)
        assert patches.shape == (1, 4, 8 * 8 * 3)
        np.testing.assert_array_equal(
            patches[0, 1], img[0, 0:8, 8:16].reshape(-1))
        np.testing.assert_array_equal(
            patches[0, 2], img[0, 8:16, 0:8].reshape(-1))

    def test_batch_independence(self):
        enc = small_image_encoder()
        images = rngmod.stream(3, "t/imgb").uniform(0, 1, (4, 16, 16, 3)).astype(np.float32)
        with no_grad():
            batched = enc.encode(images).v.data
            singles = np.stack([enc.encode(images[i]).v.data[0] for i in range(4)])
        np.testing.assert_allclose(batched, singles, atol=1e-5)

    def test_patch_order_matters(self):
        enc = small_image_encoder()
        img = rngmod.stream(4, "t/imgp").uniform(0, 1, (1, 16, 16, 3)).astype(np.float32)
        flipped = img[:, :, ::-1].copy()
        with no_grad():
            a = enc.encode(img).v.data
            b = enc.encode(flipped).v.data
        assert np.abs(a - b).max() > 1e-4

    def test_depth_zero_rejected(self):
        cfg = ImageEncoderConfig(image_size=16, patch_size=8, d=32, depth=0, heads=4)
        enc = ImageEncoder(cfg, rngmod.stream(0, "t/d0"))
        assert enc.blocks == []

    def test_bad_geometry_rejected(self):
        with pytest.raises(ValueError):
            ImageEncoderConfig(image_size=30, patch_size=8)
        with pytest.raises(ValueError):
            ImageEncoderConfig(d=30, heads=4)


class TestTextEncoderIds:
    def test_eos_pooled_and_normalized(self):
        enc = small_text_encoder()
        vocab, table = small_table()
        ids, mask = vocab.tokenize_batch(["a red circle", "one blue square"], 10)
        with no_grad():
            t = enc.encode_ids(table, ids, mask)
        assert t.shape == (2, 32)
        np.testing.assert_allclose(np.linalg.norm(t.data, axis=1), 1.0, atol=1e-5)

    def test_padding_invariance(self):
        enc = small_text_encoder()
        vocab, table = small_table()
        short_ids, short_mask = vocab.tokenize_batch(["a red circle"], 6)
        long_ids, long_mask = vocab.tokenize_batch(["a red circle"], 12)
        with no_grad():
            a = enc.encode_ids(table, short_ids, short_mask).data
            b = enc.encode_ids(table, long_ids, long_mask).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_masked_positions_cannot_leak(self):
        enc = small_text_encoder()
        vocab, table = small_table()
        ids, mask = vocab.tokenize_batch(["a red circle"], 8)
        junk = ids.copy()
        junk[mask == 0] = vocab.d_v - 1
        with no_grad():
            a = enc.encode_ids(table, ids, mask).data
            b = enc.encode_ids(table, junk, mask).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_over_length_rejected(self):
        enc = small_text_encoder()
        vocab, table = small_table()
        ids, mask = vocab.tokenize_batch(["a red circle"], 13)
        with pytest.raises(ops.ShapeError):
            enc.encode_ids(table, ids, mask)


class TestTextEncoderPrompts:
    def test_prompt_shapes(self):
        enc = small_text_encoder()
        prompts = Tensor(rngmod.stream(5, "t/p").normal(0, 1, (3, 6, 32)).astype(np.float32))
        with no_grad():
            t = enc.encode_prompts(prompts)
        assert t.shape == (3, 32)
        np.testing.assert_allclose(np.linalg.norm(t.data, axis=1), 1.0, atol=1e-5)

    def test_two_dim_prompt_batched(self):
        enc = small_text_encoder()
        prompts = Tensor(rngmod.stream(6, "t/p2").normal(0, 1, (6, 32)).astype(np.float32))
        with no_grad():
            t = enc.encode_prompts(prompts)
        assert t.shape == (1, 32)

    def test_pooling_modes_differ(self):
        a = small_text_encoder(pooling="last_position")
        b = small_text_encoder(pooling="mean")
        prompts = Tensor(rngmod.stream(7, "t/p3").normal(0, 1, (2, 5, 32)).astype(np.float32))
        with no_grad():
            pa = a.encode_prompts(prompts).data
            pb = b.encode_prompts(prompts).data
        assert np.abs(pa - pb).max() > 1e-4

    def test_positional_embedding_applies(self):
        enc = small_text_encoder()
        prompts = rngmod.stream(8, "t/p4").normal(0, 1, (1, 4, 32)).astype(np.float32)
        swapped = prompts[:, ::-1].copy()
        with no_grad():
            a = enc.encode_prompts(Tensor(prompts)).data
            b = enc.encode_prompts(Tensor(swapped)).data
        assert np.abs(a - b).max() > 1e-4

    def test_over_length_prompt_rejected(self):
        enc = small_text_encoder()
        prompts = Tensor(np.zeros((1, 13, 32), dtype=np.float32))
        with pytest.raises(ops.ShapeError):
            enc.encode_prompts(prompts)


class TestFreezing:
    def test_freeze_stops_gradients(self):
        enc = small_image_encoder()
        enc.freeze()
        assert all(not p.requires_grad for p in enc.params().values())
        images = rngmod.stream(9, "t/fz").uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)
        feats = enc.encode(images)
        ops.tsum(feats.v).backward()
        assert all(p.grad is None for p in enc.params().values())

    def test_param_names_are_stable(self):
        a = small_image_encoder(seed=0).params()
        b = small_image_encoder(seed=1).params()
        assert set(a) == set(b)
        t = small_text_encoder().params()
        assert "pos" in t and "block0.attn.wq.w" in t and "ln_final.gamma" in t

    def test_linears_cover_ffn_and_attention(self):
        enc = small_text_encoder()
        names = set(enc.linears())
        assert {"block0.ffn.fc1", "block0.ffn.fc2", "block1.attn.wo"} <= names
