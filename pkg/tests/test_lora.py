"""Low-rank adapters: neutrality at init, merging, placement policies."""

import numpy as np
import pytest

from tgpt import rng as rngmod
from tgpt.encoders import (ImageEncoder, ImageEncoderConfig, TextEncoder,
                           TextEncoderConfig)
from tgpt.layers import Linear
from tgpt.lora import LoraAdapter, apply_placement, attach, merge
from tgpt.numerics.tensor import Tensor, no_grad

D_IN, D_OUT, R = 64, 48, 4


def linear(seed=0):
    return Linear(D_IN, D_OUT, rngmod.stream(seed, "test/lora/lin"))


def encoders(seed=0, depth=2):
    img = ImageEncoder(ImageEncoderConfig(image_size=16, patch_size=8, d=32,
                                          depth=depth, heads=4),
                       rngmod.stream(seed, "test/lora/img"))
    txt = TextEncoder(TextEncoderConfig(d=32, depth=depth, heads=4, max_len=8),
                      rngmod.stream(seed, "test/lora/txt"))
    return img, txt


class TestAdapter:
    def test_zero_init_is_bitwise_neutral(self):
        lin = linear()
        x = Tensor(rngmod.stream(1, "t/x").normal(0, 1, (5, D_IN)).astype(np.float32))
        with no_grad():
            base = lin(x).data.copy()
        attach(lin, R, rngmod.stream(2, "t/a"), target="t")
        with no_grad():
            adapted = lin(x).data
        assert (base == adapted).all(), "B=0 at init must not change outputs"

    def test_parameter_count(self):
        adapter = LoraAdapter(64, 64, 4, rngmod.stream(0, "t/cnt"))
        assert adapter.a.size + adapter.b.size == 512

    def test_rank_bounds(self):
        g = rngmod.stream(0, "t/rb")
        with pytest.raises(ValueError):
            LoraAdapter(D_IN, D_OUT, 0, g)
        with pytest.raises(ValueError):
            LoraAdapter(8, 64, 8, g)

    def test_double_attach_rejected(self):
        lin = linear()
        attach(lin, R, rngmod.stream(0, "t/da"))
        with pytest.raises(ValueError, match="already has"):
            attach(lin, R, rngmod.stream(1, "t/da2"))

    def test_gradients_flow_to_both_factors(self):
        lin = linear()
        lin.w.requires_grad = False
        lin.b.requires_grad = False
        adapter = attach(lin, R, rngmod.stream(3, "t/g"))
        adapter.b.data[:] = 0.01
        x = Tensor(rngmod.stream(4, "t/gx").normal(0, 1, (3, D_IN)).astype(np.float32))
        from tgpt.numerics import ops

        ops.tsum(lin(x)).backward()
        assert adapter.a.grad is not None and np.abs(adapter.a.grad).sum() > 0
        assert adapter.b.grad is not None and np.abs(adapter.b.grad).sum() > 0
        assert lin.w.grad is None


class TestMerge:
    def test_merge_preserves_outputs(self):
        lin = linear()
        adapter = attach(lin, R, rngmod.stream(5, "t/m"))
        g = rngmod.stream(6, "t/mb")
        adapter.b.data[:] = g.normal(0, 0.1, adapter.b.shape)
        xs = rngmod.stream(7, "t/mx").normal(0, 1, (100, D_IN)).astype(np.float32)
        with no_grad():
            before = lin(Tensor(xs)).data.copy()
        merge(lin)
        with no_grad():
            after = lin(Tensor(xs)).data
        assert np.abs(before - after).max() <= 1e-6
        assert lin.adapter is None

    def test_double_merge_rejected(self):
        lin = linear()
        adapter = attach(lin, R, rngmod.stream(8, "t/dm"))
        merge(lin)
        lin.adapter = adapter
        with pytest.raises(ValueError, match="already merged"):
            merge(lin)

    def test_merge_without_adapter_rejected(self):
        with pytest.raises(ValueError, match="no adapter"):
            merge(linear())


class TestPlacement:
    def test_mlp_both_counts(self):
        img, txt = encoders()
        adapters, report = apply_placement(img, txt, "mlp_both", R,
                                           rngmod.stream(0, "t/pl"))
        # 2 FFN maps per block, 2 blocks, 2 encoders
        assert report.adapter_count == 8
        assert all(".ffn." in name for name in adapters)

    def test_single_side_policies(self):
        img, txt = encoders()
        adapters, _ = apply_placement(img, txt, "mlp_visual", R,
                                      rngmod.stream(0, "t/pv"))
        assert all(name.startswith("image.") for name in adapters)
        img2, txt2 = encoders()
        adapters2, _ = apply_placement(img2, txt2, "mlp_text", R,
                                       rngmod.stream(0, "t/pt"))
        assert all(name.startswith("text.") for name in adapters2)

    def test_attention_policy_covers_more(self):
        img, txt = encoders()
        adapters, _ = apply_placement(img, txt, "mlp_and_attention_both", R,
                                      rngmod.stream(0, "t/pa"))
        # adds wq/wk/wv/wo to the 8 FFN maps: (2 ffn + 4 attn) * 2 blocks * 2
        assert len(adapters) == 24
        assert any(".attn." in name for name in adapters)

    def test_param_report_arithmetic(self):
        from tgpt.encoders import ImageEncoderConfig, TextEncoderConfig

        img = ImageEncoder(ImageEncoderConfig(), rngmod.stream(0, "t/pr/i"))
        txt = TextEncoder(TextEncoderConfig(), rngmod.stream(0, "t/pr/t"))
        _, report = apply_placement(img, txt, "mlp_both", 4,
                                    rngmod.stream(0, "t/pr"))
        # r*(d_in+d_out) per map: (4*320 + 4*320) per block, 2 blocks, 2 encoders
        assert report.trainable == 10240
        assert report.ratio == report.trainable / report.total
        assert 0 < report.ratio < 0.05

    def test_none_policy_rejected(self):
        img, txt = encoders()
        with pytest.raises(ValueError):
            apply_placement(img, txt, "none", R, rngmod.stream(0, "t/pn"))
        with pytest.raises(ValueError):
            apply_placement(img, txt, "everything", R, rngmod.stream(0, "t/pe"))

    def test_adapted_encoder_unchanged_at_init(self):
        img, txt = encoders()
        images = rngmod.stream(9, "t/pi").uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)
        with no_grad():
            base = img.encode(images).v.data.copy()
        apply_placement(img, txt, "mlp_both", R, rngmod.stream(1, "t/pz"))
        with no_grad():
            adapted = img.encode(images).v.data
        assert (base == adapted).all()
