import numpy as np
import pytest

import festa.tensor as T
from festa import kernels as K
from festa.nets import (BODY_PRESETS, BodyConfig, ClassificationHead,
                        TransformerBody, build_head, build_tail)

TOY = BODY_PRESETS["toy"]


def rand_block(rng, cfg=TOY):
    return rng.standard_normal((cfg.tokens + 1, cfg.dim)).astype(np.float32)


class TestBodyConfig:
    def test_dim_must_divide_heads(self):
        with pytest.raises(T.DimensionError):
            BodyConfig(layers=2, heads=5, dim=32, tokens=16)

    def test_presets_exist(self):
        full = BODY_PRESETS["full"]
        assert (full.heads, full.layers, full.dim, full.tokens) == (12, 12, 768, 256)
        small = BODY_PRESETS["small"]
        assert (small.heads, small.layers, small.dim) == (4, 4, 256)
        medium = BODY_PRESETS["medium"]
        assert (medium.heads, medium.layers, medium.dim) == (8, 8, 512)


class TestHeads:
    def test_classification_block_shape(self, rng):
        head = build_head("classification", TOY, 8, rng)
        g = T.Graph()
        block = head.forward(g, rng.standard_normal(8).astype(np.float32))
        assert block.shape == (17, 32)

    def test_full_scale_block_matches_contract(self, rng):
        head = build_head("classification", BODY_PRESETS["full"], 8, rng)
        g = T.Graph()
        block = head.forward(g, rng.standard_normal(8).astype(np.float32))
        assert block.shape == (257, 768)

    def test_zero_input_zero_projection_gives_zero_tokens(self, rng):
        head = ClassificationHead(TOY, 8, rng)
        head.params.set_values({
            "fc2.w": np.zeros_like(head.params.value("fc2.w")),
            "fc2.b": np.zeros_like(head.params.value("fc2.b"))})
        g = T.Graph()
        block = head.forward(g, np.zeros(8, dtype=np.float32))
        assert np.array_equal(block.value[1:], np.zeros((16, 32)))
        assert not np.array_equal(block.value[0], np.zeros(32))  # CLS stays learned

    def test_patch_head_shape_and_dim_check(self, rng):
        head = build_head("segmentation", TOY, 8, rng)
        g = T.Graph()
        block = head.forward(g, rng.standard_normal((16, 8)).astype(np.float32))
        assert block.shape == (17, 32)
        with pytest.raises(T.DimensionError):
            head.forward(T.Graph(), rng.standard_normal((8, 8)).astype(np.float32))

    def test_unknown_task(self, rng):
        with pytest.raises(ValueError):
            build_head("ranking", TOY, 8, rng)
        with pytest.raises(ValueError):
            build_tail("ranking", TOY, rng)


class TestBody:
    def test_shape_preserved(self, rng):
        body = TransformerBody(TOY, rng)
        g = T.Graph()
        out = body.forward(g, g.leaf(rand_block(rng)))
        assert out.shape == (17, 32)

    def test_wrong_block_shape_rejected(self, rng):
        body = TransformerBody(TOY, rng)
        g = T.Graph()
        with pytest.raises(T.DimensionError):
            body.forward(g, g.leaf(np.zeros((16, 32), np.float32)))

    def test_zero_weights_residual_passthrough(self, rng):
        """With projection weights zeroed the blocks contribute nothing and
        the output is just the final layernorm of the input."""
        body = TransformerBody(TOY, rng)
        zeros = {name: np.zeros_like(v) for name, v in body.params.items()
                 if name == "pos" or name.split(".")[-1] in
                 ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo", "w1", "b1",
                  "w2", "b2")}
        body.params.set_values(zeros)
        x = rand_block(rng)
        g = T.Graph()
        out = body.forward(g, g.leaf(x))
        expected, _, _ = K.layernorm2d(x, np.ones(32, np.float32),
                                       np.zeros(32, np.float32), 1e-5)
        np.testing.assert_allclose(out.value, expected, atol=1e-6)

    def test_attention_rows_sum_to_one(self, rng):
        body = TransformerBody(TOY, rng)
        g = T.Graph()
        trace = []
        body.forward(g, g.leaf(rand_block(rng)), trace=trace)
        assert len(trace) == TOY.layers * TOY.heads
        for probs in trace:
            np.testing.assert_allclose(probs.value.sum(axis=1),
                                       np.ones(17), atol=1e-6)

    def _permute_non_cls(self, x, perm):
        out = x.copy()
        out[1:] = x[1:][perm]
        return out

    def test_permutation_equivariant_without_positions(self, rng):
        cfg = BodyConfig(layers=2, heads=4, dim=32, tokens=16, pos_embed=False)
        body = TransformerBody(cfg, rng)
        x = rand_block(rng, cfg)
        perm = rng.permutation(16)
        g1, g2 = T.Graph(), T.Graph()
        out = body.forward(g1, g1.leaf(x)).value
        out_p = body.forward(g2, g2.leaf(self._permute_non_cls(x, perm))).value
        np.testing.assert_allclose(out_p[1:], out[1:][perm], atol=2e-5)
        np.testing.assert_allclose(out_p[0], out[0], atol=2e-5)

    def test_positions_break_permutation_equivariance(self, rng):
        body = TransformerBody(TOY, rng)  # pos_embed on by default
        x = rand_block(rng)
        perm = rng.permutation(16)
        while np.all(perm == np.arange(16)):
            perm = rng.permutation(16)
        g1, g2 = T.Graph(), T.Graph()
        out = body.forward(g1, g1.leaf(x)).value
        out_p = body.forward(g2, g2.leaf(self._permute_non_cls(x, perm))).value
        assert np.abs(out_p[1:] - out[1:][perm]).max() > 1e-3


class TestTails:
    def test_classification_reads_cls_row_only(self, rng):
        tail = build_tail("classification", TOY, rng)
        x = rand_block(rng)
        g1 = T.Graph()
        logits = tail.forward(g1, g1.leaf(x)).value
        y = x.copy()
        y[1:] += rng.standard_normal((16, 32)).astype(np.float32)
        g2 = T.Graph()
        assert np.array_equal(tail.forward(g2, g2.leaf(y)).value, logits)

    def test_segmentation_ignores_cls_row(self, rng):
        tail = build_tail("segmentation", TOY, rng)
        x = rand_block(rng)
        g1 = T.Graph()
        mask = tail.forward(g1, g1.leaf(x)).value
        assert mask.shape == (16,)
        y = x.copy()
        y[0] += rng.standard_normal(32).astype(np.float32)
        g2 = T.Graph()
        assert np.array_equal(tail.forward(g2, g2.leaf(y)).value, mask)

    def test_detection_output_is_box_plus_objectness(self, rng):
        tail = build_tail("detection", TOY, rng)
        g = T.Graph()
        out = tail.forward(g, g.leaf(rand_block(rng)))
        assert out.shape == (5,)

    def test_detection_ignores_cls_row(self, rng):
        tail = build_tail("detection", TOY, rng)
        x = rand_block(rng)
        g1 = T.Graph()
        out = tail.forward(g1, g1.leaf(x)).value
        y = x.copy()
        y[0] = 0.0
        g2 = T.Graph()
        assert np.array_equal(tail.forward(g2, g2.leaf(y)).value, out)


def test_param_init_deterministic_per_seed():
    a = TransformerBody(TOY, np.random.default_rng(42))
    b = TransformerBody(TOY, np.random.default_rng(42))
    assert a.params.value_hash() == b.params.value_hash()
    c = TransformerBody(TOY, np.random.default_rng(43))
    assert a.params.value_hash() != c.params.value_hash()
