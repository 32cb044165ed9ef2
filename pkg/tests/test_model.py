import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from doodlenet import tensor as T
from doodlenet.gradcheck import MODEL_TOLERANCE, model_gradcheck, tiny_config
from doodlenet.model import (ASPP, DooDLeNet, ModelConfig, VARIANTS, confidence_map,
                             confidence_weighted_fusion, correlation_reweight,
                             correlation_volume, segmentation_loss)
from doodlenet.tensor import Tensor


def small(**kw):
    base = dict(num_classes=3, height=32, width=32, widths=(4, 8, 8, 16), decoder_width=8,
                skip_width=4, compression_width=4)
    base.update(kw)
    return ModelConfig(**base)


def batch(cfg, b=2, seed=0):
    rng = np.random.default_rng(seed)
    color = rng.random((b, 3, cfg.height, cfg.width)).astype(cfg.np_dtype)
    thermal = rng.random((b, 1, cfg.height, cfg.width)).astype(cfg.np_dtype)
    labels = rng.integers(0, cfg.num_classes, (b, cfg.height, cfg.width))
    return color, thermal, labels


def one_hot_map(classes, k):
    """k x h x w logits that are one-hot for the given h x w class grid."""
    classes = np.asarray(classes)
    return np.eye(k)[classes].transpose(2, 0, 1)[None].astype(np.float64)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(height=60), dict(num_classes=1), dict(aux_weight=-1.0),
                                    dict(variant="late"), dict(aspp_rates=())])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_text_round_trip(self):
        cfg = ModelConfig(widths=(8, 16, 16, 32), variant="conf_only", aux_weight=0.25,
                          softmax_correlation=True)
        assert ModelConfig.from_text(cfg.to_text()) == cfg


class TestEncoder:
    def test_tap_sizes(self):
        model = DooDLeNet(ModelConfig())
        x = Tensor(np.zeros((1, 3, 64, 64), np.float32))
        a, b = model.encode(x, "color")
        assert a.shape[2:] == (16, 16) and b.shape[2:] == (4, 4)
        assert a.shape[1] == 32 and b.shape[1] == 128

    def test_wrong_channels(self):
        model = DooDLeNet(small())
        with pytest.raises(ValueError):
            model.encode(Tensor(np.zeros((1, 2, 32, 32), np.float32)), "color")

    def test_specialized_paths(self):
        cfg = small()
        color, thermal, _ = batch(cfg)
        model = DooDLeNet(cfg)
        before = [t.data.copy() for t in model.encode(Tensor(thermal), "thermal")]
        for p in model.enc_color.parameters():
            p.data += 1.0
        after = [t.data for t in model.encode(Tensor(thermal), "thermal")]
        assert all(np.array_equal(x, y) for x, y in zip(before, after))
        names = {n for n, _ in model.named_parameters()}
        assert not any(n.startswith("enc_color") and n.replace("color", "thermal", 1) in names
                       and model.state_dict()[n] is model.state_dict()[n.replace("color", "thermal", 1)]
                       for n in names)

    def test_zero_input_deterministic(self):
        cfg = small()
        x = Tensor(np.zeros((1, 3, 32, 32), np.float32))
        runs = [DooDLeNet(cfg).encode(x, "color")[1].data for _ in range(2)]
        assert np.array_equal(runs[0], runs[1])


class TestASPP:
    def test_channel_audit(self):
        rng = np.random.default_rng(0)
        aspp = ASPP(6, 5, (1, 2, 4), rng, small())
        assert aspp.project.conv.weight.shape[1] == (3 + 2) * 5
        out = aspp(Tensor(rng.random((1, 6, 7, 9)).astype(np.float32)))
        assert out.shape == (1, 5, 7, 9)

    def test_reduces_to_single_atrous_branch(self):
        cfg = small(dtype="float64")
        rng = np.random.default_rng(1)
        aspp = ASPP(4, 3, (1,), rng, cfg)
        aspp.point.conv.weight.data[:] = 0
        aspp.pool.weight.data[:] = 0
        x = Tensor(rng.standard_normal((1, 4, 6, 6)))
        proj = aspp.project.conv.weight.data
        proj[:] = 0
        proj[np.arange(3), 3 + np.arange(3)] = 1.0  # route the atrous block through
        expected = aspp.project(T.concat([Tensor(np.zeros((1, 3, 6, 6))), aspp.atrous[0](x),
                                          Tensor(np.zeros((1, 3, 6, 6)))], axis=1))
        np.testing.assert_array_equal(aspp(x).data, expected.data)


class TestConfidence:
    def test_examples(self):
        logits = np.zeros((1, 3, 1, 3))
        logits[0, :, 0, 1] = [np.log(2), 0, 0]
        logits[0, :, 0, 2] = [100, 0, 0]
        c = confidence_map(Tensor(logits)).data[0, 0, 0]
        assert c[0] == pytest.approx(1 / 3, abs=1e-15)
        assert c[1] == pytest.approx(0.5, abs=1e-12)
        assert abs(c[2] - 1) < 1e-10  # mathematically < 1, rounds to 1.0 in float64

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 2 ** 31))
    def test_bounds(self, k, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((1, k, 4, 4)) * 4
        c = confidence_map(Tensor(logits)).data
        assert np.all(c >= 1 / k - 1e-12) and np.all(c < 1)

    def test_fusion_limits(self):
        rng = np.random.default_rng(0)
        fc, ft = Tensor(rng.random((1, 3, 4, 4))), Tensor(rng.random((1, 3, 4, 4)))
        ones, zeros = Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 2)))
        plain = confidence_weighted_fusion(fc, ft, ones, ones).data
        np.testing.assert_array_equal(plain, np.concatenate([fc.data, ft.data], axis=1))
        gated = confidence_weighted_fusion(fc, ft, ones, zeros).data
        assert gated.shape[1] == 6 and not gated[:, 3:].any()

    def test_reweight_linear(self):
        f = Tensor(np.random.default_rng(0).random((1, 4, 4, 4)))
        np.testing.assert_array_equal(correlation_reweight(f, Tensor(np.ones((1, 1, 2, 2)))).data, f.data)
        assert not correlation_reweight(f, Tensor(np.zeros((1, 1, 2, 2)))).data.any()
        np.testing.assert_array_equal(correlation_reweight(f, Tensor(np.full((1, 1, 2, 2), 0.5))).data,
                                      f.data * 0.5)


class TestCorrelation:
    def test_single_position(self):
        y = Tensor(np.array([1.0, 0.0]).reshape(1, 2, 1, 1))
        assert correlation_volume(y, y).data.reshape(-1).tolist() == [1.0]

    def test_identity_and_swap(self):
        yc = one_hot_map([[0, 1]], 2)
        vol = correlation_volume(Tensor(yc), Tensor(yc)).data.reshape(2, 2)
        assert vol.tolist() == [[1.0, 0.0], [0.0, 1.0]]
        yt = one_hot_map([[1, 0]], 2)
        vol = correlation_volume(Tensor(yc), Tensor(yt)).data.reshape(2, 2)
        assert vol.tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_shift_permutes_channels(self):
        k, h, w = 9, 3, 3
        classes = np.arange(9).reshape(h, w)
        yc = one_hot_map(classes, k)
        shifted = np.roll(classes, 1, axis=1)
        vol = correlation_volume(Tensor(yc), Tensor(one_hot_map(shifted, k))).data[0]
        ref = correlation_volume(Tensor(yc), Tensor(yc)).data[0]
        # thermal position i now carries the class colour position perm[i] has
        perm = np.roll(np.arange(9).reshape(h, w), 1, axis=1).reshape(-1)
        np.testing.assert_array_equal(vol, ref[perm])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_unit_norm_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        yc, yt = rng.standard_normal((2, 2, 3, 4, 4))
        vol = correlation_volume(Tensor(yc), Tensor(yt)).data
        assert np.all(vol >= 0)
        norms = np.sqrt((vol ** 2).sum(axis=1))
        nonzero = np.abs(np.maximum(np.einsum("bki,bkj->bij", yt.reshape(2, 3, 16),
                                              yc.reshape(2, 3, 16)), 0)).sum(axis=1) > 1e-6
        assert np.all(np.abs(norms.reshape(2, 16)[nonzero] - 1) < 1e-5)

    def test_resolution_guard(self):
        model = DooDLeNet(small())
        y = Tensor(np.zeros((1, 3, 4, 4), np.float32))
        with pytest.raises(ValueError):
            model.correlation_map(y, y)

    def test_gate_range_and_initial_value(self):
        cfg = small()
        model = DooDLeNet(cfg)
        color, thermal, _ = batch(cfg)
        m = model(color, thermal).corr.data
        assert m.shape == (2, 1, 8, 8)
        assert np.all((m > 0) & (m < 1))


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_output_shapes(self, variant):
        cfg = small(variant=variant)
        color, thermal, _ = batch(cfg)
        out = DooDLeNet(cfg)(color, thermal)
        assert out.y_final.shape == (2, 3, 32, 32)
        fusion = variant in ("unweighted", "conf_only", "full")
        assert (out.y_color is not None and out.y_thermal is not None) == fusion or not fusion
        assert (out.conf_color is not None) == (variant in ("conf_only", "full"))
        assert (out.corr is not None) == (variant == "full")

    def test_full_contract(self):
        cfg = small()
        color, thermal, _ = batch(cfg)
        out = DooDLeNet(cfg)(color, thermal)
        for t in (out.y_color, out.y_thermal, out.conf_color, out.conf_thermal, out.corr):
            assert t.shape[2:] == cfg.corr_size
        assert out.y_color.shape[1] == cfg.num_classes

    def test_rgb_ignores_thermal(self):
        cfg = small(variant="rgb")
        color, thermal, _ = batch(cfg)
        model = DooDLeNet(cfg)
        a = model(color, thermal).y_final.data
        b = model(color, thermal * 0 + 7).y_final.data
        assert np.array_equal(a, b)

    def test_gating_limit(self):
        cfg = small()
        color, thermal, _ = batch(cfg)
        full = DooDLeNet(cfg)
        plain = DooDLeNet(cfg.replace(variant="unweighted"))
        plain.load_state_dict(full.state_dict(), strict=False)
        a = full(color, thermal, unit_gates=True).y_final.data
        b = plain(color, thermal).y_final.data
        assert np.array_equal(a, b)

    def test_seeded_construction(self):
        cfg = small()
        color, thermal, _ = batch(cfg)
        a = DooDLeNet(cfg)(color, thermal).y_final.data
        b = DooDLeNet(cfg)(color, thermal).y_final.data
        assert np.array_equal(a, b)

    def test_every_parameter_gets_gradient(self):
        cfg = small()
        color, thermal, labels = batch(cfg)
        model = DooDLeNet(cfg)
        loss, _ = segmentation_loss(model(color, thermal), labels, cfg.aux_weight, cfg.variant)
        loss.backward()
        dead = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
        assert dead == []

    def test_final_loss_reaches_both_encoders(self):
        cfg = small()
        color, thermal, labels = batch(cfg)
        model = DooDLeNet(cfg)
        loss, _ = segmentation_loss(model(color, thermal), labels, 0.0, cfg.variant)
        loss.backward()
        assert np.any(model.enc_color.stages[0].down.conv.weight.grad)
        assert np.any(model.enc_thermal.stages[0].down.conv.weight.grad)
        assert np.any(model.compression.reduce.weight.grad)

    def test_decoder_loss_reaches_both_taps(self):
        cfg = small(variant="rgb")
        color, _, labels = batch(cfg)
        model = DooDLeNet(cfg)
        a, b = (Tensor(t.data, requires_grad=True) for t in model.encode(Tensor(color), "color"))
        y = model.decode(a, b, "color")
        T.cross_entropy(y, labels[:, ::4, ::4]).backward()
        assert np.any(a.grad) and np.any(b.grad)


class TestLoss:
    def test_aux_zero_is_final_only(self):
        cfg = small()
        color, thermal, labels = batch(cfg)
        out = DooDLeNet(cfg)(color, thermal)
        total, terms = segmentation_loss(out, labels, 0.0, cfg.variant)
        assert total.item() == terms["final"].item()

    def test_aux_terms(self):
        cfg = small()
        color, thermal, labels = batch(cfg)
        out = DooDLeNet(cfg)(color, thermal)
        total, terms = segmentation_loss(out, labels, 0.5, cfg.variant)
        expected = terms["final"].item() + 0.5 * (terms["aux_color"].item() + terms["aux_thermal"].item())
        assert total.item() == pytest.approx(expected, rel=1e-6)

    def test_single_path_has_one_term(self):
        cfg = small(variant="thermal")
        color, thermal, labels = batch(cfg)
        _, terms = segmentation_loss(DooDLeNet(cfg)(color, thermal), labels, 0.5, cfg.variant)
        assert list(terms) == ["final"]


def test_full_model_gradient_check():
    report = model_gradcheck(n_params=10, seed=0, config=tiny_config())
    assert report["max_rel_error"] < MODEL_TOLERANCE
    assert any(c["analytic"] != 0 for c in report["checks"])


def test_gradient_check_many_entries():
    report = model_gradcheck(n_params=40, seed=1, config=tiny_config())
    assert report["max_rel_error"] < MODEL_TOLERANCE
    assert sum(c["analytic"] != 0 for c in report["checks"]) >= 10
