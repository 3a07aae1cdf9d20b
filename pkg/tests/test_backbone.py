"""Modal mixup and the encoder stack."""

import numpy as np
import pytest

from vltrack import backbone as bb
from vltrack import numcore as nc
from vltrack.backbone import BackboneConfig, LinearParams
from vltrack.errors import ConfigurationError
from vltrack.numcore import Tape, Tensor


def zero_linear(d_in, d_out):
    return LinearParams(
        weight=Tensor(np.zeros((d_in, d_out), dtype=np.float32), requires_grad=True),
        bias=Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True),
    )


@pytest.fixture
def cfg():
    return BackboneConfig(layers=2, heads=2, dim=8)


@pytest.fixture
def streams():
    rng = np.random.default_rng(10)
    hx = Tensor(rng.uniform(-1, 1, (6, 8)).astype(np.float32))
    hz = Tensor(rng.uniform(-1, 1, (3, 8)).astype(np.float32))
    t = Tensor(rng.uniform(-1, 1, 8).astype(np.float32))
    return hx, hz, t


class TestModalMixup:
    def test_zero_gate_is_identity(self, streams):
        hx, hz, t = streams
        fx, fz = bb.modal_mixup(hx, hz, t, zero_linear(8, 8))
        assert fx.data.tobytes() == hx.data.tobytes()
        assert fz.data.tobytes() == hz.data.tobytes()

    def test_all_ones_gate_doubles(self, streams):
        hx, hz, t = streams
        gate = zero_linear(8, 8)
        gate.bias = Tensor(np.ones(8, dtype=np.float32))
        fx, fz = bb.modal_mixup(hx, hz, Tensor(np.zeros(8, dtype=np.float32)), gate)
        np.testing.assert_allclose(fx.data, 2.0 * hx.data, atol=1e-7)
        np.testing.assert_allclose(fz.data, 2.0 * hz.data, atol=1e-7)

    def test_matches_elementwise_loop_oracle(self, streams):
        hx, hz, t = streams
        rng = np.random.default_rng(11)
        gate = LinearParams(
            weight=Tensor(rng.normal(size=(8, 8)).astype(np.float32)),
            bias=Tensor(rng.normal(size=8).astype(np.float32)),
        )
        fx, _ = bb.modal_mixup(hx, hz, t, gate)
        g = t.data.astype(np.float64) @ gate.weight.data.astype(np.float64) + gate.bias.data
        for i in range(hx.shape[0]):
            for j in range(8):
                expect = float(hx.data[i, j]) * g[j] + float(hx.data[i, j])
                assert abs(fx.data[i, j] - expect) < 1e-5

    def test_unshared_gate_variant(self, streams):
        hx, hz, t = streams
        cfg = BackboneConfig(layers=0, heads=2, dim=8, mixup_shared_linear=False)
        params = bb.init_backbone(cfg, seed=9)
        assert params.mixup_template is not None
        fx, fz = bb.forward(hx, hz, t, params, cfg)
        gx = t.data @ params.mixup.weight.data + params.mixup.bias.data
        gz = t.data @ params.mixup_template.weight.data + params.mixup_template.bias.data
        np.testing.assert_allclose(fx.data, hx.data * gx + hx.data, atol=1e-6)
        np.testing.assert_allclose(fz.data, hz.data * gz + hz.data, atol=1e-6)

    def test_shared_gate_applies_to_both_streams(self, streams):
        hx, hz, t = streams
        rng = np.random.default_rng(12)
        gate = LinearParams(
            weight=Tensor(rng.normal(size=(8, 8)).astype(np.float32)),
            bias=Tensor(np.zeros(8, dtype=np.float32)),
        )
        fx, fz = bb.modal_mixup(hx, hz, t, gate)
        g = t.data @ gate.weight.data
        np.testing.assert_allclose(fx.data, hx.data * g + hx.data, atol=1e-6)
        np.testing.assert_allclose(fz.data, hz.data * g + hz.data, atol=1e-6)


class TestEncoderLayer:
    def test_zero_sublayer_outputs_reduce_to_double_layernorm(self, cfg, streams):
        hx, hz, _ = streams
        rng = np.random.default_rng(13)
        p = bb.init_encoder_layer(rng, 8)
        p.o = zero_linear(8, 8)
        p.ffn2 = zero_linear(32, 8)
        out_x, out_z = bb.encoder_layer(hx, hz, p, heads=cfg.heads)

        def ln(m):
            mu = m.mean(axis=-1, keepdims=True)
            var = ((m - mu) ** 2).mean(axis=-1, keepdims=True)
            return (m - mu) / np.sqrt(var + 1e-5)

        expect = ln(ln(np.concatenate([hx.data, hz.data], axis=0)))
        np.testing.assert_allclose(np.concatenate([out_x.data, out_z.data], axis=0), expect, atol=1e-5)

    def test_single_token_single_head_closed_form(self):
        rng = np.random.default_rng(14)
        p = bb.init_encoder_layer(rng, 8)
        x = rng.uniform(-1, 1, (1, 8)).astype(np.float32)
        out_x, out_z = bb.encoder_layer(Tensor(x), Tensor(np.zeros((0, 8), dtype=np.float32)), p, heads=1)
        assert out_z.shape == (0, 8)

        def ln(m, gain, bias):
            mu = m.mean(axis=-1, keepdims=True)
            var = ((m - mu) ** 2).mean(axis=-1, keepdims=True)
            return (m - mu) / np.sqrt(var + 1e-5) * gain + bias

        def gelu(v):
            return 0.5 * v * (1 + np.tanh(np.sqrt(2 / np.pi) * (v + 0.044715 * v**3)))

        # one token, one head: the attention weight is 1, so MHSA(x) = O(V(x))
        v = x @ p.v.weight.data + p.v.bias.data
        att = v @ p.o.weight.data + p.o.bias.data
        y1 = ln(x + att, p.ln1_gain.data, p.ln1_bias.data)
        ffn = gelu(y1 @ p.ffn1.weight.data + p.ffn1.bias.data) @ p.ffn2.weight.data + p.ffn2.bias.data
        y2 = ln(y1 + ffn, p.ln2_gain.data, p.ln2_bias.data)
        np.testing.assert_allclose(out_x.data, y2, atol=1e-5)

    def test_permutation_equivariance_within_search_block(self, cfg, streams):
        hx, hz, _ = streams
        rng = np.random.default_rng(15)
        p = bb.init_encoder_layer(rng, 8)
        perm = np.array([3, 0, 5, 1, 4, 2])
        out_x, out_z = bb.encoder_layer(hx, hz, p, heads=cfg.heads)
        px, pz = bb.encoder_layer(Tensor(hx.data[perm]), hz, p, heads=cfg.heads)
        np.testing.assert_allclose(px.data, out_x.data[perm], atol=1e-5)
        np.testing.assert_allclose(pz.data, out_z.data, atol=1e-5)

    def test_pre_norm_variant_differs(self, cfg, streams):
        hx, hz, _ = streams
        rng = np.random.default_rng(16)
        p = bb.init_encoder_layer(rng, 8)
        post_x, _ = bb.encoder_layer(hx, hz, p, heads=2, norm_placement="post")
        pre_x, _ = bb.encoder_layer(hx, hz, p, heads=2, norm_placement="pre")
        assert not np.allclose(post_x.data, pre_x.data)


class TestForward:
    def test_empty_stack_returns_mixup_outputs(self, streams):
        hx, hz, t = streams
        cfg = BackboneConfig(layers=0, heads=2, dim=8)
        params = bb.init_backbone(cfg, seed=0)
        sx, sz = bb.forward(hx, hz, t, params, cfg)
        ex, ez = bb.modal_mixup(hx, hz, t, params.mixup)
        np.testing.assert_array_equal(sx.data, ex.data)
        np.testing.assert_array_equal(sz.data, ez.data)

    def test_zero_language_path_is_bit_exact(self, cfg, streams):
        hx, hz, t = streams
        params = bb.init_backbone(cfg, seed=1)
        params.mixup = zero_linear(8, 8)
        with_lang = bb.forward(hx, hz, t, params, cfg)
        without = bb.forward(hx, hz, None, params, cfg)
        assert with_lang[0].data.tobytes() == without[0].data.tobytes()
        assert with_lang[1].data.tobytes() == without[1].data.tobytes()

    def test_desk_shapes(self):
        cfg = BackboneConfig(layers=4, heads=4, dim=96)
        params = bb.init_backbone(cfg, seed=2)
        rng = np.random.default_rng(17)
        hx = Tensor(rng.uniform(-1, 1, (64, 96)).astype(np.float32))
        hz = Tensor(rng.uniform(-1, 1, (16, 96)).astype(np.float32))
        t = Tensor(rng.uniform(-1, 1, 96).astype(np.float32))
        sx, sz = bb.forward(hx, hz, t, params, cfg)
        assert sx.shape == (64, 96) and sz.shape == (16, 96)

    def test_batched_matches_single(self, cfg):
        params = bb.init_backbone(cfg, seed=3)
        rng = np.random.default_rng(18)
        hx = rng.uniform(-1, 1, (2, 6, 8)).astype(np.float32)
        hz = rng.uniform(-1, 1, (2, 3, 8)).astype(np.float32)
        t = rng.uniform(-1, 1, (2, 8)).astype(np.float32)
        bx, _ = bb.forward(Tensor(hx), Tensor(hz), Tensor(t), params, cfg)
        for b in range(2):
            sx, _ = bb.forward(Tensor(hx[b]), Tensor(hz[b]), Tensor(t[b]), params, cfg)
            np.testing.assert_allclose(bx.data[b], sx.data, atol=1e-6)

    def test_gradient_reaches_template_stream(self, cfg, streams):
        # a generic linear functional of the search tokens; sum(Sx^2) would be
        # nearly constant because layernorm fixes each row's norm
        hx, hz, t = streams
        hz = Tensor(hz.data, requires_grad=True)
        probe = Tensor(np.random.default_rng(40).uniform(-1, 1, (6, 8)).astype(np.float32))
        params = bb.init_backbone(cfg, seed=4)
        with Tape() as tape:
            sx, _ = bb.forward(hx, hz, t, params, cfg)
            tape.backward(nc.tensor_sum(sx * probe))
        assert hz.grad is not None
        assert np.max(np.abs(hz.grad)) > 1e-6

    def test_final_rows_have_layernorm_statistics(self, cfg, streams):
        hx, hz, t = streams
        params = bb.init_backbone(cfg, seed=5)  # default init: gain 1, bias 0
        sx, sz = bb.forward(hx, hz, t, params, cfg)
        assert np.max(np.abs(sx.data.mean(axis=-1))) <= 1e-5
        assert np.max(np.abs(sz.data.mean(axis=-1))) <= 1e-5

    def test_language_enters_only_through_mixup(self, cfg, streams):
        # encoder consumes exactly N_x + N_z tokens: swapping the language
        # vector changes nothing once the gate output is fixed
        hx, hz, t = streams
        params = bb.init_backbone(cfg, seed=6)
        params.mixup = zero_linear(8, 8)
        other_t = Tensor(np.ones(8, dtype=np.float32))
        a = bb.forward(hx, hz, t, params, cfg)
        b = bb.forward(hx, hz, other_t, params, cfg)
        assert a[0].data.tobytes() == b[0].data.tobytes()


class TestConfig:
    def test_dim_head_divisibility(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(layers=1, heads=5, dim=8)

    def test_norm_placement_validated(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(norm_placement="sandwich")
