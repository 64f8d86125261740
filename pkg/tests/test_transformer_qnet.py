"""
Tests for the Transformer Q-network: gradients of every encoder layer kind,
shape invariants across model sizes, gating behaviour, parameter copies and
checkpoints.
"""

import numpy as np
import pytest

from tbqn_errors import CheckpointError, ConfigError
from tensor_core import Parameter, RngState, Tensor, backward, numerical_gradient, reduce_mean, sub, zero_grad
from transformer_qnet import (
    AttentionParams,
    GruGateParams,
    LayerKind,
    OutputGateParams,
    QNetwork,
    QNetworkSpec,
    build_encoder_layer,
    encoder_layer_forward,
    gru_gate,
    multi_head_attention,
    output_gate,
    positional_encoding,
)
from variants_experiment import MODEL_VARIANTS

ALL_KINDS = list(LayerKind)


def mse_to(out: Tensor, target: np.ndarray) -> Tensor:
    diff = sub(out, Tensor(target))
    return reduce_mean(diff * diff)


def assert_close_gradient(analytic: np.ndarray, numeric: np.ndarray, name: str):
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-7, err_msg=name)


# =============================================================================
# Gradient oracle
# =============================================================================


class TestEncoderGradients:
    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_every_parameter_matches_finite_differences(self, kind):
        rng = RngState(11)
        spec = QNetworkSpec(model_dim=8, num_heads=2, ff_dim=16, layer_kind=kind, gate_bias_init=0.5)
        params = build_encoder_layer(spec, rng, depth=1, dtype=np.float64)
        data_rng = np.random.default_rng(int(kind))
        x = Tensor(data_rng.normal(size=(2, 5, 8)))
        target = data_rng.normal(size=(2, 5, 8))

        def objective():
            return mse_to(encoder_layer_forward(x, kind, params, training=False, heads=2), target)

        named = params.named_parameters()
        zero_grad(p for _, p in named)
        backward(objective())
        for name, p in named:
            assert_close_gradient(p.grad, numerical_gradient(objective, p), name)

    @pytest.mark.parametrize("kind", [LayerKind.BASELINE, LayerKind.IMR, LayerKind.GRU_GATE])
    def test_full_network_gradients(self, kind):
        spec = QNetworkSpec(
            history_horizon=3, state_dim=4, model_dim=8, num_heads=2, num_layers=2, ff_dim=8,
            num_actions=3, layer_kind=kind, depth_scaled_init=True, depth_scaled_last_layer=True,
        )
        network = QNetwork(spec, RngState(5), dtype=np.float64)
        data_rng = np.random.default_rng(3)
        history = data_rng.normal(size=(2, 3, 4))
        target = data_rng.normal(size=(2, 3))

        def objective():
            return mse_to(network.forward(history, training=False), target)

        zero_grad(network.parameters())
        backward(objective())
        for name in ("input.w", "layer1.attn.wq", "layer2.ff.w2", "head.w", "head.b"):
            p = dict(network.named_parameters())[name]
            assert_close_gradient(p.grad, numerical_gradient(objective, p), name)

    @pytest.mark.parametrize("kind", [LayerKind.IMR, LayerKind.PRE_NORM, LayerKind.OUTPUT_GATE, LayerKind.GRU_GATE])
    def test_gradient_reaches_layer_input(self, kind):
        spec = QNetworkSpec(model_dim=8, num_heads=2, ff_dim=16, layer_kind=kind)
        params = build_encoder_layer(spec, RngState(6), dtype=np.float64)
        data_rng = np.random.default_rng(6)
        x = Tensor(data_rng.normal(size=(2, 5, 8)), requires_grad=True)
        out = encoder_layer_forward(x, kind, params, training=False, heads=2)
        backward(mse_to(out, data_rng.normal(size=(2, 5, 8))))
        assert x.grad is not None
        assert np.abs(x.grad).max() > 1e-6


# =============================================================================
# Shapes
# =============================================================================


class TestShapes:
    @pytest.mark.parametrize("variant", sorted(MODEL_VARIANTS))
    def test_model_variants_preserve_shapes(self, variant):
        horizon, model_dim, ff_dim, layers = MODEL_VARIANTS[variant]
        spec = QNetworkSpec(
            history_horizon=horizon, state_dim=4, model_dim=model_dim, num_heads=4,
            num_layers=layers, ff_dim=ff_dim, num_actions=2, layer_kind=LayerKind.IMR,
        )
        network = QNetwork(spec, RngState(0))
        x = Tensor(np.random.default_rng(0).normal(size=(2, horizon, model_dim)).astype(np.float32))
        for layer in network.params.layers:
            assert encoder_layer_forward(x, spec.layer_kind, layer, training=False, heads=4).shape == x.shape
        q = network.q_values(np.zeros((2, horizon, 4), dtype=np.float32))
        assert q.shape == (2, 2)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_every_kind_outputs_q_vector(self, kind, tiny_spec):
        spec = QNetworkSpec(**{**tiny_spec.to_dict(), "layer_kind": int(kind)})
        q = QNetwork(spec, RngState(1)).q_values(np.ones((5, 3, 4), dtype=np.float32))
        assert q.shape == (5, 2)
        assert np.isfinite(q).all()

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_earlier_observations_change_q_values(self, kind, tiny_spec):
        spec = QNetworkSpec(**{**tiny_spec.to_dict(), "layer_kind": int(kind)})
        network = QNetwork(spec, RngState(2))
        history = np.random.default_rng(2).normal(size=(1, 3, 4)).astype(np.float32)
        altered = history.copy()
        altered[0, 0] += 3.0
        np.testing.assert_array_equal(altered[0, -1], history[0, -1])
        assert np.abs(network.q_values(altered) - network.q_values(history)).max() > 1e-6

    def test_wrong_history_shape(self, tiny_spec):
        network = QNetwork(tiny_spec, RngState(0))
        with pytest.raises(ConfigError):
            network.q_values(np.zeros((1, 4, 4), dtype=np.float32))


class TestAttention:
    @staticmethod
    def identity_params(width):
        return AttentionParams(*(Parameter(np.eye(width)) for _ in range(4)))

    def test_identity_projections(self):
        x = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        out = multi_head_attention(x, self.identity_params(2), heads=1)
        np.testing.assert_allclose(out.data[0], [[0.6698, 0.3302], [0.3302, 0.6698]], atol=1e-4)

    def test_single_position_is_linear(self):
        rng = np.random.default_rng(0)
        params = AttentionParams(*(Parameter(rng.normal(size=(4, 4))) for _ in range(4)))
        x = rng.normal(size=(3, 1, 4))
        out = multi_head_attention(Tensor(x), params, heads=2)
        np.testing.assert_allclose(out.data, x @ params.wv.data @ params.wo.data, rtol=1e-10)

    def test_heads_split_the_width(self):
        x = np.random.default_rng(1).normal(size=(2, 3, 4))
        both = multi_head_attention(Tensor(x), self.identity_params(4), heads=2).data
        halves = [
            multi_head_attention(Tensor(x[..., :2].copy()), self.identity_params(2), heads=1).data,
            multi_head_attention(Tensor(x[..., 2:].copy()), self.identity_params(2), heads=1).data,
        ]
        np.testing.assert_allclose(both, np.concatenate(halves, axis=-1), rtol=1e-10)


class TestPositionalEncoding:
    def test_known_values(self):
        pe = positional_encoding(3, 4).data
        np.testing.assert_allclose(pe[0], [0.0, 1.0, 0.0, 1.0], atol=1e-7)
        np.testing.assert_allclose(pe[1, 0], np.sin(1.0), rtol=1e-6)
        np.testing.assert_allclose(pe[1, 3], np.cos(1.0 / 100.0), rtol=1e-6)

    def test_odd_width_rejected(self):
        with pytest.raises(ConfigError):
            positional_encoding(3, 5)


# =============================================================================
# Layer semantics
# =============================================================================


class TestLayerKinds:
    def test_parse_accepts_names_and_numbers(self):
        assert LayerKind.parse(3) is LayerKind.IMR
        assert LayerKind.parse("3") is LayerKind.IMR
        assert LayerKind.parse("gru_gate") is LayerKind.GRU_GATE

    def test_parse_rejects_unknown(self):
        with pytest.raises(ConfigError):
            LayerKind.parse(7)

    @pytest.mark.parametrize("kind", [LayerKind.OUTPUT_GATE, LayerKind.GRU_GATE])
    def test_closed_gates_pass_input_through(self, kind):
        spec = QNetworkSpec(model_dim=8, num_heads=2, ff_dim=16, layer_kind=kind, gate_bias_init=40.0)
        params = build_encoder_layer(spec, RngState(2), dtype=np.float64)
        x = Tensor(np.random.default_rng(4).normal(size=(2, 5, 8)))
        out = encoder_layer_forward(x, kind, params, training=False, heads=2)
        np.testing.assert_allclose(out.data, x.data, atol=1e-8)

    def test_zero_output_gate_halves_the_update(self):
        data_rng = np.random.default_rng(8)
        x, y = Tensor(data_rng.normal(size=(3, 4))), Tensor(data_rng.normal(size=(3, 4)))
        gate = OutputGateParams(w=Parameter(np.zeros((4, 4))), b=Parameter(np.zeros(4)))
        np.testing.assert_allclose(output_gate(x, y, gate).data, x.data + 0.5 * y.data)

    def test_zero_gru_gate_halves_the_input(self):
        data_rng = np.random.default_rng(8)
        x, y = Tensor(data_rng.normal(size=(3, 4))), Tensor(data_rng.normal(size=(3, 4)))
        weights = {key: Parameter(np.zeros((4, 4))) for key in ("w_r", "u_r", "w_z", "u_z", "w_h", "u_h")}
        gate = GruGateParams(b_g=Parameter(np.zeros(4)), **weights)
        np.testing.assert_allclose(gru_gate(x, y, gate).data, 0.5 * x.data)

    def test_no_dropout_kind_matches_baseline_at_rate_zero(self):
        spec = QNetworkSpec(model_dim=8, num_heads=2, ff_dim=16)
        params = build_encoder_layer(spec, RngState(3), dtype=np.float64, kind=LayerKind.BASELINE)
        x = Tensor(np.random.default_rng(3).normal(size=(2, 5, 8)))
        outputs = [
            encoder_layer_forward(x, kind, params, training=True, heads=2, dropout_rate=0.0, rng=RngState(0)).data
            for kind in (LayerKind.BASELINE, LayerKind.NO_DROPOUT)
        ]
        np.testing.assert_array_equal(outputs[0], outputs[1])

    @staticmethod
    def _positive_sublayers(sign=1.0):
        """IMR parameters whose attention and feed-forward outputs are all positive (sign=1)."""
        spec = QNetworkSpec(model_dim=8, num_heads=2, ff_dim=16)
        params = build_encoder_layer(spec, RngState(4), dtype=np.float64, kind=LayerKind.IMR)
        for norm in (params.norm1, params.norm2):
            norm.gain.data[:] = 0.0
            norm.bias.data[:] = 1.0
        for p in (params.attn.wv, params.ff.w1, params.ff.w2):
            p.data[:] = np.abs(p.data)
        params.attn.wo.data[:] = sign * np.abs(params.attn.wo.data)
        return params

    def test_imr_matches_pre_norm_for_positive_sublayers(self):
        params = self._positive_sublayers()
        x = Tensor(np.random.default_rng(5).normal(size=(2, 5, 8)))
        imr = encoder_layer_forward(x, LayerKind.IMR, params, training=False, heads=2)
        pre_norm = encoder_layer_forward(x, LayerKind.PRE_NORM, params, training=False, heads=2)
        np.testing.assert_allclose(imr.data, pre_norm.data, rtol=1e-12, atol=1e-12)

    def test_imr_clips_negative_attention(self):
        params = self._positive_sublayers(sign=-1.0)
        x = Tensor(np.random.default_rng(5).normal(size=(2, 5, 8)))
        imr = encoder_layer_forward(x, LayerKind.IMR, params, training=False, heads=2)
        pre_norm = encoder_layer_forward(x, LayerKind.PRE_NORM, params, training=False, heads=2)
        assert not np.allclose(imr.data, pre_norm.data)

    def test_gated_kinds_have_gate_parameters(self):
        spec = QNetworkSpec(model_dim=8, num_heads=2, ff_dim=16)
        plain = build_encoder_layer(spec, RngState(0), kind=LayerKind.IMR)
        gru = build_encoder_layer(spec, RngState(0), kind=LayerKind.GRU_GATE)
        assert plain.gate1 is None
        assert len(gru.named_parameters()) == len(plain.named_parameters()) + 14

    def test_dropout_only_in_training(self, tiny_spec):
        spec = QNetworkSpec(**{**tiny_spec.to_dict(), "layer_kind": 1, "dropout_rate": 0.5})
        network = QNetwork(spec, RngState(0))
        history = np.random.default_rng(0).normal(size=(4, 3, 4)).astype(np.float32)
        np.testing.assert_array_equal(network.q_values(history), network.q_values(history))
        assert not np.allclose(network.forward(history, training=True).data, network.q_values(history))

    def test_pre_norm_output_is_not_normalized(self):
        spec = QNetworkSpec(model_dim=8, num_heads=2, ff_dim=16, layer_kind=LayerKind.PRE_NORM)
        params = build_encoder_layer(spec, RngState(2), dtype=np.float64)
        x = Tensor(np.random.default_rng(4).normal(5.0, 3.0, size=(2, 5, 8)))
        out = encoder_layer_forward(x, LayerKind.PRE_NORM, params, training=False, heads=2)
        assert abs(out.data.mean()) > 1.0


# =============================================================================
# Spec validation
# =============================================================================


class TestSpec:
    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError, match="net.num_heads"):
            QNetworkSpec(model_dim=10, num_heads=4).validate()

    def test_unknown_field(self):
        with pytest.raises(ConfigError, match="net.depth"):
            QNetworkSpec.from_dict({"depth": 3})

    def test_dict_roundtrip(self, tiny_spec):
        data = tiny_spec.to_dict()
        assert data["layer_kind"] == 2
        assert QNetworkSpec.from_dict(data) == tiny_spec

    def test_depth_scaled_head_is_smaller(self):
        base = dict(model_dim=64, num_heads=4, ff_dim=64, num_layers=3)
        plain = QNetwork(QNetworkSpec(**base), RngState(0))
        scaled = QNetwork(QNetworkSpec(**base, depth_scaled_last_layer=True), RngState(0))
        head_plain = dict(plain.named_parameters())["head.w"].data
        head_scaled = dict(scaled.named_parameters())["head.w"].data
        np.testing.assert_allclose(head_scaled, head_plain / 2.0, rtol=1e-6)


# =============================================================================
# Copies, target updates and checkpoints
# =============================================================================


class TestParameterCopies:
    def test_clone_is_independent(self, tiny_spec):
        network = QNetwork(tiny_spec, RngState(0))
        twin = network.clone()
        history = np.ones((1, 3, 4), dtype=np.float32)
        np.testing.assert_array_equal(network.q_values(history), twin.q_values(history))
        twin.parameters()[0].data += 1.0
        assert not np.array_equal(network.q_values(history), twin.q_values(history))

    def test_copy_from_is_bit_identical(self, tiny_spec):
        a = QNetwork(tiny_spec, RngState(0))
        b = QNetwork(tiny_spec, RngState(1))
        b.copy_from(a)
        for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)

    def test_soft_update_fixed_point(self, tiny_spec):
        a = QNetwork(tiny_spec, RngState(0))
        b = a.clone()
        before = b.state_dict()
        b.soft_update_from(a, 0.01)
        for name, value in b.state_dict().items():
            np.testing.assert_array_equal(value, before[name])

    def test_soft_update_moves_by_tau(self, tiny_spec):
        a = QNetwork(tiny_spec, RngState(0))
        b = QNetwork(tiny_spec, RngState(1))
        expected = {n: b.state_dict()[n] + 0.25 * (v - b.state_dict()[n]) for n, v in a.state_dict().items()}
        b.soft_update_from(a, 0.25)
        for name, value in b.state_dict().items():
            np.testing.assert_allclose(value, expected[name], rtol=1e-5, atol=1e-7)

    def test_save_load_roundtrip(self, tiny_spec, tmp_path):
        network = QNetwork(tiny_spec, RngState(3))
        network.save(tmp_path / "net", {"env": "cartpole"})
        loaded, metadata = QNetwork.load(tmp_path / "net.json")
        assert metadata["env"] == "cartpole"
        assert loaded.spec == tiny_spec
        history = np.random.default_rng(0).normal(size=(3, 3, 4)).astype(np.float32)
        np.testing.assert_array_equal(network.q_values(history), loaded.q_values(history))

    def test_load_rejects_missing_parameters(self, tiny_spec):
        network = QNetwork(tiny_spec, RngState(0))
        state = network.state_dict()
        state.pop("head.w")
        with pytest.raises(CheckpointError):
            network.load_state_dict(state)
