"""Fusion head, classification loss, and both baselines."""

import math

import numpy as np
import pytest

from tgpt import rng as rngmod
from tgpt.head import (Projector, class_text_features, classification_loss,
                       fuse_and_classify, fuse_logits, linear_probe_fit,
                       zero_shot_predict)
from tgpt.numerics import ops
from tgpt.numerics.tensor import Tensor, no_grad

D, N = 16, 4


def projector(seed=0):
    return Projector(D, N, rngmod.stream(seed, "test/head/proj"))


def features(batch=3, seed=0):
    g = rngmod.stream(seed, "test/head/feats")
    def unit(shape):
        z = g.normal(0, 1, shape)
        return Tensor((z / np.linalg.norm(z, axis=-1, keepdims=True)).astype(np.float32))
    return unit((batch, D)), unit((batch, D)), unit((batch, D))


class TestFusion:
    def test_logit_shape(self):
        v, t_con, t_ctg = features()
        with no_grad():
            logits = fuse_logits(v, t_con, t_ctg, projector())
        assert logits.shape == (3, N)

    def test_fusion_averages_text_features(self):
        v, t_con, t_ctg = features()
        proj = projector()
        with no_grad():
            a = fuse_logits(v, t_con, t_ctg, proj).data
            b = fuse_logits(v, t_ctg, t_con, proj).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_identical_branches_pass_through(self):
        v, t, _ = features()
        proj = projector()
        with no_grad():
            fused = fuse_logits(v, t, t, proj).data
            direct = proj(ops.concat([v, t], axis=-1)).data
        np.testing.assert_allclose(fused, direct, atol=1e-6)

    def test_width_mismatch_rejected(self):
        v, t_con, t_ctg = features()
        bad = Tensor(np.zeros((3, D + 2), dtype=np.float32))
        with pytest.raises(ops.ShapeError):
            fuse_logits(v, bad, t_ctg, projector())

    def test_probabilities_sum_to_one(self):
        v, t_con, t_ctg = features()
        with no_grad():
            probs = fuse_and_classify(v, t_con, t_ctg, projector()).data
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
        assert (probs >= 0).all()


class TestClassificationLoss:
    def test_uniform_logits_give_log_n(self):
        logits = Tensor(np.zeros((5, N), dtype=np.float32))
        loss = classification_loss(logits, np.arange(5) % N)
        assert abs(loss.item() - math.log(N)) < 1e-6

    def test_label_range_checked(self):
        logits = Tensor(np.zeros((2, N), dtype=np.float32))
        with pytest.raises(ValueError):
            classification_loss(logits, np.array([0, N]))
        with pytest.raises(ValueError):
            classification_loss(logits, np.array([-1, 0]))

    def test_confident_correct_is_near_zero(self):
        logits = np.full((2, N), -30.0, dtype=np.float32)
        logits[0, 1] = 30.0
        logits[1, 2] = 30.0
        loss = classification_loss(Tensor(logits), np.array([1, 2]))
        assert loss.item() < 1e-6


class TestZeroShot:
    def test_prefers_aligned_class(self):
        e = np.eye(D)
        class_feats = e[:N]
        v = np.stack([e[2], e[0]])
        probs = zero_shot_predict(v, class_feats)
        assert probs.shape == (2, N)
        assert probs.argmax(axis=1).tolist() == [2, 0]
        assert probs[0, 2] > 0.99

    def test_temperature_sharpens(self):
        g = rngmod.stream(0, "t/head/zs")
        class_feats = g.normal(0, 1, (N, D))
        class_feats /= np.linalg.norm(class_feats, axis=1, keepdims=True)
        v = class_feats[1] * 0.9 + class_feats[2] * 0.1
        v /= np.linalg.norm(v)
        sharp = zero_shot_predict(v, class_feats, tau=0.01)
        soft = zero_shot_predict(v, class_feats, tau=1.0)
        assert sharp[0].max() > soft[0].max()

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError):
            zero_shot_predict(np.zeros((1, D)), np.eye(D)[:N])

    def test_rows_are_distributions(self):
        g = rngmod.stream(1, "t/head/zs2")
        v = g.normal(0, 1, (6, D))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        cf = g.normal(0, 1, (N, D))
        cf /= np.linalg.norm(cf, axis=1, keepdims=True)
        probs = zero_shot_predict(v, cf)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


class TestLinearProbe:
    def make_blobs(self, per_class=30, spread=0.15, seed=0):
        g = rngmod.stream(seed, "t/head/blobs")
        centers = np.eye(N, D)
        feats, labels = [], []
        for c in range(N):
            pts = centers[c] + g.normal(0, spread, (per_class, D))
            feats.append(pts)
            labels.extend([c] * per_class)
        return np.concatenate(feats), np.array(labels)

    def test_separable_blobs_are_learned(self):
        feats, labels = self.make_blobs()
        predict = linear_probe_fit(feats, labels, N,
                                   init_rng=rngmod.stream(0, "t/probe"))
        assert (predict(feats) == labels).mean() > 0.99

    def test_deterministic_given_rng(self):
        feats, labels = self.make_blobs()
        a = linear_probe_fit(feats, labels, N, init_rng=rngmod.stream(5, "t/p"))
        b = linear_probe_fit(feats, labels, N, init_rng=rngmod.stream(5, "t/p"))
        np.testing.assert_array_equal(a(feats), b(feats))

    def test_missing_class_rejected(self):
        feats, labels = self.make_blobs()
        with pytest.raises(ValueError, match="classes \\[3\\]"):
            linear_probe_fit(feats[labels != 3], labels[labels != 3], N)


class TestClassTextFeatures:
    def test_one_unit_row_per_class(self):
        from tgpt.encoders import TextEncoder, TextEncoderConfig
        from tgpt.supervision import TemplateRegistry
        from tgpt.tokenizer import EmbeddingTable, Vocabulary

        names = ["red circle", "blue square"]
        vocab = Vocabulary.build(["a photo of a red circle, a type of glyph.",
                                  "a photo of a blue square, a type of glyph."])
        table = EmbeddingTable(vocab.d_v, D, rngmod.stream(0, "t/cf/table"))
        enc = TextEncoder(TextEncoderConfig(d=D, depth=1, heads=2, max_len=16),
                          rngmod.stream(0, "t/cf/enc"))
        feats = class_text_features(enc, table, TemplateRegistry(names), vocab, 16)
        assert feats.shape == (2, D)
        np.testing.assert_allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-5)
        assert np.abs(feats[0] - feats[1]).max() > 1e-4
