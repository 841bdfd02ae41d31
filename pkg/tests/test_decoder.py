import numpy as np
import pytest

from hybridla.boxes import clamp_boxes
from hybridla.datasets import GroundTruthPage
from hybridla.decoder import BOX_POINTS, DENOISING, EXPANDED, INITIAL, HybridDecoder, box_point_features
from hybridla.encoder import PageFeatures
from hybridla.matching import make_denoising_queries
from hybridla.model import HybriDLA, ModelConfig
from hybridla.nn import ContractError, Tensor, bilinear_sample


def ctx(seed=0, dim=8):
    return PageFeatures(Tensor(np.random.default_rng(seed).normal(size=(12, dim))), np.zeros((12, dim)), [0],
                        [(3, 4)])


def decoder(**kw):
    args = dict(dim=8, heads=2, depth=3, num_classes=3, n_init=4, n_aqe=4, group_size=2, seed=0, ffn_dim=8)
    args.update(kw)
    return HybridDecoder(**args)


def set_eos_bias(dec, value):
    dec.eos_head.bias.data[:] = value
    dec.eos_head.weight.data[:] = 0


class TestDecoderLayer:
    def test_zero_box_head_is_identity(self):
        dec = decoder()
        q = dec.initial_queries()
        out, delta = dec.decoder_layer(q, ctx(), 0)
        assert not delta.data.any()
        np.testing.assert_array_equal(out.boxes.data, q.boxes.data)

    def test_clamped(self):
        dec = decoder()
        dec.layers[0].box_head.layers[-1].bias.data[:] = [5.0, -5.0, 5.0, -5.0]
        out, _ = dec.decoder_layer(dec.initial_queries(), ctx(), 0)
        b = out.boxes.data
        assert (b[:, 0] == 1.0).all() and (b[:, 1] == 0.0).all()
        assert (b[:, 2] == 1.0).all() and (b[:, 3] == 1e-3).all()

    def test_replay(self):
        dec = decoder()
        rng = np.random.default_rng(1)
        for layer in dec.layers:
            layer.box_head.layers[-1].weight.data[:] = rng.normal(0, 0.3, layer.box_head.layers[-1].weight.shape)
        q = dec.initial_queries()
        q1, d1 = dec.decoder_layer(q, ctx(), 0)
        q2, d2 = dec.decoder_layer(q1, ctx(), 1)
        replay = clamp_boxes(Tensor(np.stack([h[1] for h in q2.history])) + d2.data).data
        np.testing.assert_array_equal(np.stack([h[2] for h in q2.history]), replay)
        np.testing.assert_array_equal(q2.boxes.data, replay)
        assert all(len(r) == len(h) - 1 == 2 for r, h in zip(q2.residuals, q2.history))

    def test_point_features(self):
        fmap = ctx().finest_map()
        assert fmap.shape == (3, 4, 8)
        boxes = np.array([[0.5, 0.5, 0.5, 0.4], [0.2, 0.7, 0.2, 0.2]])
        got = box_point_features(fmap, Tensor(boxes)).data.reshape(2, len(BOX_POINTS), 8)
        for i, (cx, cy, w, h) in enumerate(boxes):
            pts = [[cx, cy], [cx - w / 2, cy], [cx + w / 2, cy], [cx, cy - h / 2], [cx, cy + h / 2]]
            np.testing.assert_allclose(got[i], bilinear_sample(fmap, pts).data, atol=1e-15)

    def test_errors(self):
        dec = decoder()
        q = dec.initial_queries()
        with pytest.raises(ContractError):
            dec.decoder_layer(q, ctx(), 3)
        empty = type(q)(q.embeddings[np.array([], dtype=int)], q.boxes[np.array([], dtype=int)], [], [])
        with pytest.raises(ContractError):
            dec.decoder_layer(empty, ctx(), 0)


class TestExpansion:
    def test_forced_halt(self):
        dec = decoder()
        set_eos_bias(dec, np.inf)
        q = dec.initial_queries()
        out, new, p = dec.aqe_step(ctx(), q)
        assert p.item() == 1.0 and new == [] and len(out) == len(q) and out.eos_emitted

    def test_budget_clamp(self):
        dec = decoder(n_init=4, n_aqe=2, group_size=4)
        set_eos_bias(dec, -np.inf)
        out, new, p = dec.aqe_step(ctx(), dec.initial_queries())
        assert len(new) == 2 and p.item() == 0.0
        assert out.origins[-2:] == [EXPANDED, EXPANDED] and out.eos_emitted

    def test_called_after_eos(self):
        dec = decoder()
        set_eos_bias(dec, np.inf)
        out, _, _ = dec.aqe_step(ctx(), dec.initial_queries())
        with pytest.raises(ContractError):
            dec.aqe_step(ctx(), out)

    def test_deterministic(self):
        a, b = decoder(seed=4), decoder(seed=4)
        for d in (a, b):
            set_eos_bias(d, -10.0)
        ea = a.aqe_step(ctx(2), a.initial_queries())[0].embeddings.data
        eb = b.aqe_step(ctx(2), b.initial_queries())[0].embeddings.data
        assert ea.tobytes() == eb.tobytes()

    def test_halt_target_overrides_threshold(self):
        dec = decoder()
        set_eos_bias(dec, np.inf)
        out, new, _ = dec.aqe_step(ctx(), dec.initial_queries(), force_halt=False)
        assert len(new) == 2 and not out.eos_emitted


class TestGenerate:
    def test_aqe_disabled(self):
        out = decoder(aqe_enabled=False).generate(ctx())
        assert out.num_predictions == 4 and out.eos_probs == []
        assert all(p.origin == INITIAL for p in out.predictions)

    def test_single_layer_forced_halt(self):
        dec = decoder(depth=1)
        set_eos_bias(dec, np.inf)
        out = dec.generate(ctx())
        assert len(out.stages) == 1 and out.num_predictions == 4

    def test_never_halting_fills_budget(self):
        dec = decoder(n_init=4, n_aqe=5, group_size=2)
        set_eos_bias(dec, -np.inf)
        out = dec.generate(ctx())
        assert out.num_predictions == 9       # steps of 2, 2, then 1 at the budget
        assert out.counts_before_step == [4, 6, 8]
        assert [len(s.query_index) for s in out.stages] == [6, 8, 9]

    def test_count_fuzz(self):
        rng = np.random.default_rng(7)
        for k in range(500):
            n_init, n_aqe, group = (int(v) for v in rng.integers(1, 6, size=3))
            dec = decoder(depth=int(rng.integers(1, 4)), n_init=n_init, n_aqe=n_aqe, group_size=group,
                          seed=k, eos_threshold=float(rng.uniform(0, 1)))
            for p in dec.parameters().values():
                p.data += rng.normal(0, 1.0, p.shape)
            out = dec.generate(ctx(k))
            assert n_init <= out.num_predictions <= n_init + n_aqe
            q = out.queries
            assert (q.boxes.data[:, :2] >= 0).all() and (q.boxes.data <= 1).all()
            assert (q.boxes.data[:, 2:] > 0).all()
            for h, r in zip(q.history, q.residuals):
                assert len(r) == len(h) - 1
                for t in range(len(r)):
                    np.testing.assert_array_equal(h[t + 1], clamp_boxes(Tensor((h[t] + r[t])[None])).data[0])

    def test_eos_freezes_length(self):
        dec = decoder(depth=3)
        out = dec.generate(ctx(), halt_targets=lambda n: n >= 6)
        lengths = [len(s.query_index) for s in out.stages]
        assert lengths == [6, 6, 6]
        assert out.counts_before_step == [4, 6]

    def test_denoising_queries_are_isolated(self):
        dec = decoder()
        gt = GroundTruthPage([[0.3, 0.3, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2]], [0, 2])
        dn = make_denoising_queries(gt, 0.05, 0.0, np.random.default_rng(0), 3, dec.label_embed)
        set_eos_bias(dec, np.inf)
        plain = dec.generate(ctx())
        mixed = dec.generate(ctx(), denoising=dn)
        np.testing.assert_allclose(mixed.stages[-1].logits.data, plain.stages[-1].logits.data, atol=1e-12)
        assert len(mixed.dn_stages) == 3 and mixed.dn_stages[0][0].shape == (2, 4)
        mask = mixed.queries.attention_mask()
        dn = np.array([o == DENOISING for o in mixed.queries.origins])
        assert not mask[np.ix_(dn, ~dn)].any() and not mask[np.ix_(~dn, dn)].any()

    def test_dr_off_zero_residuals(self):
        dec = decoder(dr_enabled=False)
        for layer in dec.layers:
            layer.box_head.layers[-1].bias.data[:] = 0.3
        out = dec.generate(ctx())
        assert all(not np.any(r) for p in out.predictions for r in p.residuals)


class TestHeads:
    def test_box_range(self):
        dec = decoder()
        _, boxes = dec.predict_heads(Tensor(np.random.default_rng(0).normal(0, 10, (20, 8))))
        assert (boxes.data > 0).all() and (boxes.data < 1).all()

    def test_zero_final_layer(self):
        dec = decoder()
        dec.box_mlp.layers[-1].weight.data[:] = 0
        dec.box_mlp.layers[-1].bias.data[:] = 0
        _, boxes = dec.predict_heads(Tensor(np.ones((1, 8))))
        np.testing.assert_array_equal(boxes.data, [[0.5, 0.5, 0.5, 0.5]])

    def test_eleven_classes(self):
        logits, _ = decoder(num_classes=11).predict_heads(Tensor(np.ones((2, 8))))
        assert logits.shape == (2, 12)


class TestModel:
    def test_detect(self):
        model = HybriDLA(ModelConfig(dim=16, heads=2, levels=2, depth=2, n_init=4, n_aqe=4, ffn_dim=16))
        dets = model.detect(np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32)), image_ids=["a", "b"])
        assert [d.image_id for d in dets] == ["a", "b"]
        for d in dets:
            assert 4 <= len(d) <= 8 and (d.labels < 4).all() and (d.scores <= 1).all()

    @pytest.mark.parametrize("bad", [dict(encoder="fpn"), dict(levels=1), dict(dim=30), dict(eos_threshold=2.0)])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            HybriDLA(ModelConfig(**bad))
