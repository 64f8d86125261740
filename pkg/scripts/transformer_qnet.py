# scripts/transformer_qnet.py
"""
Transformer-based Q-network: input projection, sinusoidal positional encoding,
a stack of encoder layers of one variant, and a Q-value head on the final
position's token.

Encoder layer variants (LayerKind):
    1 BASELINE     post-norm layer with dropout after each sub-layer
    2 NO_DROPOUT   BASELINE without intra-layer dropout
    3 IMR          identity map reordering: pre-norm + ReLU on each sub-layer
    4 PRE_NORM     pre-norm, no extra ReLU
    5 OUTPUT_GATE  IMR with the residual replaced by a sigmoid output gate
    6 GRU_GATE     IMR with the residual replaced by a GRU-style gate
"""

import copy
import logging
from dataclasses import asdict, dataclass, fields
from enum import IntEnum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from tbqn_errors import CheckpointError, ConfigError
from tensor_core import (
    DEFAULT_DTYPE,
    Parameter,
    RngState,
    Tensor,
    add,
    dropout,
    init,
    layer_norm,
    load_checkpoint,
    matmul,
    mul,
    no_grad,
    relu,
    reshape,
    save_checkpoint,
    scale,
    sigmoid,
    softmax_last,
    sub,
    take,
    tanh,
    transpose,
)

logger = logging.getLogger(__name__)


class LayerKind(IntEnum):
    BASELINE = 1
    NO_DROPOUT = 2
    IMR = 3
    PRE_NORM = 4
    OUTPUT_GATE = 5
    GRU_GATE = 6

    @classmethod
    def parse(cls, value: Union[int, str, "LayerKind"]) -> "LayerKind":
        """Accept 3, "3", "imr" or "IMR"."""
        if isinstance(value, LayerKind):
            return value
        try:
            return cls(int(value))
        except (TypeError, ValueError):
            pass
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            raise ConfigError("net.layer_kind", f"unknown layer kind '{value}' (use 1-6)") from None

    @property
    def is_gated(self) -> bool:
        return self in (LayerKind.OUTPUT_GATE, LayerKind.GRU_GATE)

    @property
    def is_pre_norm(self) -> bool:
        return self >= LayerKind.IMR


@dataclass
class QNetworkSpec:
    """Model dimensions and variant selection for one TBQN."""

    history_horizon: int = 5
    state_dim: int = 4
    model_dim: int = 64
    num_heads: int = 4
    num_layers: int = 3
    ff_dim: int = 256
    num_actions: int = 2
    layer_kind: LayerKind = LayerKind.BASELINE
    dropout_rate: float = 0.1
    outer_dropout: bool = False
    depth_scaled_init: bool = False
    depth_scaled_last_layer: bool = False
    gate_bias_init: float = 2.0
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        self.layer_kind = LayerKind.parse(self.layer_kind)

    def validate(self) -> "QNetworkSpec":
        positive = ("history_horizon", "state_dim", "model_dim", "num_heads", "num_layers",
                    "ff_dim", "num_actions")
        for name in positive:
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"net.{name}", f"must be a positive integer, got {value!r}")
        if self.model_dim % self.num_heads != 0:
            raise ConfigError(
                "net.num_heads",
                f"model_dim {self.model_dim} is not divisible by num_heads {self.num_heads}",
            )
        if self.model_dim % 2 != 0:
            raise ConfigError("net.model_dim", f"must be even for positional encoding, got {self.model_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("net.dropout_rate", f"must be in [0, 1), got {self.dropout_rate}")
        return self

    def to_dict(self) -> dict:
        data = asdict(self)
        data["layer_kind"] = int(self.layer_kind)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "QNetworkSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"net.{sorted(unknown)[0]}", "unknown network field")
        return cls(**data)


# =============================================================================
# Parameter groups
# =============================================================================


class ParamGroup:
    """Mixin for dataclasses whose fields are Parameters or nested groups."""

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        named = []
        for f in fields(self):
            value = getattr(self, f.name)
            path = f"{prefix}.{f.name}" if prefix else f.name
            if isinstance(value, Parameter):
                named.append((path, value))
            elif isinstance(value, ParamGroup):
                named.extend(value.named_parameters(path))
        return named


@dataclass
class AttentionParams(ParamGroup):
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter


@dataclass
class FeedForwardParams(ParamGroup):
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter


@dataclass
class NormParams(ParamGroup):
    gain: Parameter
    bias: Parameter


@dataclass
class OutputGateParams(ParamGroup):
    w: Parameter
    b: Parameter


@dataclass
class GruGateParams(ParamGroup):
    w_r: Parameter
    u_r: Parameter
    w_z: Parameter
    u_z: Parameter
    w_h: Parameter
    u_h: Parameter
    b_g: Parameter


Gate = Union[OutputGateParams, GruGateParams]


@dataclass
class EncoderLayerParams(ParamGroup):
    attn: AttentionParams
    ff: FeedForwardParams
    norm1: NormParams
    norm2: NormParams
    gate1: Optional[Gate] = None
    gate2: Optional[Gate] = None


@dataclass
class QNetworkParams(ParamGroup):
    input_w: Parameter
    input_b: Parameter
    layers: List[EncoderLayerParams]
    head_w: Parameter
    head_b: Parameter

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        named = [("input.w", self.input_w), ("input.b", self.input_b)]
        for i, layer in enumerate(self.layers, 1):
            named.extend(layer.named_parameters(f"layer{i}"))
        named.extend([("head.w", self.head_w), ("head.b", self.head_b)])
        return named


# =============================================================================
# Building blocks
# =============================================================================


@lru_cache(maxsize=32)
def _sinusoid_table(history_horizon: int, model_dim: int) -> np.ndarray:
    positions = np.arange(history_horizon, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -np.arange(0, model_dim, 2, dtype=np.float64) / model_dim)
    table = np.zeros((history_horizon, model_dim), dtype=np.float64)
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates)
    table.setflags(write=False)
    return table


def positional_encoding(history_horizon: int, model_dim: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Sinusoidal table: PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(...)."""
    if model_dim % 2 != 0:
        raise ConfigError("net.model_dim", f"positional encoding needs an even width, got {model_dim}")
    return Tensor(_sinusoid_table(history_horizon, model_dim).astype(dtype))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def multi_head_attention(x: Tensor, params: AttentionParams, heads: int) -> Tensor:
    """Unmasked self-attention: softmax(QK^T / sqrt(d/heads)) V per head, concat, project."""
    batch, length, width = x.shape
    if width % heads != 0:
        raise ConfigError("net.num_heads", f"model_dim {width} is not divisible by {heads} heads")
    head_dim = width // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, length, heads, head_dim)), (0, 2, 1, 3))

    q = split(matmul(x, params.wq))
    k = split(matmul(x, params.wk))
    v = split(matmul(x, params.wv))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(head_dim))
    context = matmul(softmax_last(scores), v)
    merged = reshape(transpose(context, (0, 2, 1, 3)), (batch, length, width))
    return matmul(merged, params.wo)


def feed_forward(x: Tensor, params: FeedForwardParams) -> Tensor:
    return linear(relu(linear(x, params.w1, params.b1)), params.w2, params.b2)


def output_gate(x: Tensor, y: Tensor, params: OutputGateParams) -> Tensor:
    """g(x, y) = x + sigmoid(W x - b) * y."""
    return add(x, mul(sigmoid(sub(matmul(x, params.w), params.b)), y))


def gru_gate(x: Tensor, y: Tensor, params: GruGateParams) -> Tensor:
    """GRU-style gate; a large b_g keeps Z near 0 and the output near x."""
    r = sigmoid(add(matmul(y, params.w_r), matmul(x, params.u_r)))
    z = sigmoid(sub(add(matmul(y, params.w_z), matmul(x, params.u_z)), params.b_g))
    h = tanh(add(matmul(y, params.w_h), matmul(mul(r, x), params.u_h)))
    # (1 - Z) * x + Z * H
    return add(sub(x, mul(z, x)), mul(z, h))


def _connect(kind: LayerKind, x: Tensor, y: Tensor, gate: Optional[Gate]) -> Tensor:
    if kind == LayerKind.OUTPUT_GATE:
        return output_gate(x, y, gate)
    if kind == LayerKind.GRU_GATE:
        return gru_gate(x, y, gate)
    return add(x, y)


def encoder_layer_forward(
    x: Tensor,
    kind: LayerKind,
    params: EncoderLayerParams,
    training: bool,
    heads: int = 1,
    dropout_rate: float = 0.0,
    rng: Optional[RngState] = None,
    eps: float = 1e-5,
) -> Tensor:
    """One encoder layer of the requested variant; output shape equals input shape."""
    kind = LayerKind.parse(kind)

    if not kind.is_pre_norm:
        rate = dropout_rate if kind == LayerKind.BASELINE else 0.0
        attended = dropout(multi_head_attention(x, params.attn, heads), rate, training, rng)
        out1 = layer_norm(add(attended, x), params.norm1.gain, params.norm1.bias, eps)
        fed = dropout(feed_forward(out1, params.ff), rate, training, rng)
        return layer_norm(add(fed, out1), params.norm2.gain, params.norm2.bias, eps)

    # Pre-norm family: the identity path stays unnormalized.
    attended = multi_head_attention(layer_norm(x, params.norm1.gain, params.norm1.bias, eps), params.attn, heads)
    if kind != LayerKind.PRE_NORM:
        attended = relu(attended)
    out1 = _connect(kind, x, attended, params.gate1)

    fed = feed_forward(layer_norm(out1, params.norm2.gain, params.norm2.bias, eps), params.ff)
    if kind != LayerKind.PRE_NORM:
        fed = relu(fed)
    return _connect(kind, out1, fed, params.gate2)


def qnet_forward(
    history: Tensor,
    spec: QNetworkSpec,
    params: QNetworkParams,
    training: bool = False,
    rng: Optional[RngState] = None,
) -> Tensor:
    """(B, H, state_dim) observation windows -> (B, num_actions) Q-values."""
    if history.ndim != 3 or history.shape[1:] != (spec.history_horizon, spec.state_dim):
        raise ConfigError(
            "net.state_dim",
            f"expected history shaped (B, {spec.history_horizon}, {spec.state_dim}), got {history.shape}",
        )
    x = linear(history, params.input_w, params.input_b)
    x = add(x, positional_encoding(spec.history_horizon, spec.model_dim, dtype=x.dtype))
    if spec.outer_dropout:
        x = dropout(x, spec.dropout_rate, training, rng)

    for layer in params.layers:
        x = encoder_layer_forward(
            x,
            spec.layer_kind,
            layer,
            training,
            heads=spec.num_heads,
            dropout_rate=spec.dropout_rate,
            rng=rng,
            eps=spec.layer_norm_eps,
        )

    # The final position attends over the whole window and holds the current state.
    last_token = take(x, (slice(None), -1))
    return linear(last_token, params.head_w, params.head_b)


# =============================================================================
# Parameter construction
# =============================================================================


def _weight(shape, spec: QNetworkSpec, rng: RngState, depth: int, dtype, name: str) -> Parameter:
    scheme = "depth_scaled" if spec.depth_scaled_init else "xavier_uniform"
    return Parameter(init(shape, scheme, rng, depth=depth, dtype=dtype), name=name)


def _zeros(shape, dtype, name: str) -> Parameter:
    return Parameter(init(shape, "zeros", dtype=dtype), name=name)


def _build_gate(kind: LayerKind, spec: QNetworkSpec, rng: RngState, depth: int, dtype, prefix: str) -> Optional[Gate]:
    d = spec.model_dim
    bias = Parameter(np.full((d,), spec.gate_bias_init, dtype=dtype), name=f"{prefix}.b")
    if kind == LayerKind.OUTPUT_GATE:
        return OutputGateParams(w=_weight((d, d), spec, rng, depth, dtype, f"{prefix}.w"), b=bias)
    if kind == LayerKind.GRU_GATE:
        bias.name = f"{prefix}.b_g"
        weights = {
            key: _weight((d, d), spec, rng, depth, dtype, f"{prefix}.{key}")
            for key in ("w_r", "u_r", "w_z", "u_z", "w_h", "u_h")
        }
        return GruGateParams(b_g=bias, **weights)
    return None


def build_encoder_layer(
    spec: QNetworkSpec, rng: RngState, depth: int = 1, dtype=DEFAULT_DTYPE, kind: Optional[LayerKind] = None
) -> EncoderLayerParams:
    """Fresh parameters for the encoder layer at 1-based `depth`."""
    kind = LayerKind.parse(kind if kind is not None else spec.layer_kind)
    d, ff = spec.model_dim, spec.ff_dim
    prefix = f"layer{depth}"
    return EncoderLayerParams(
        attn=AttentionParams(
            **{key: _weight((d, d), spec, rng, depth, dtype, f"{prefix}.attn.{key}") for key in ("wq", "wk", "wv", "wo")}
        ),
        ff=FeedForwardParams(
            w1=_weight((d, ff), spec, rng, depth, dtype, f"{prefix}.ff.w1"),
            b1=_zeros((ff,), dtype, f"{prefix}.ff.b1"),
            w2=_weight((ff, d), spec, rng, depth, dtype, f"{prefix}.ff.w2"),
            b2=_zeros((d,), dtype, f"{prefix}.ff.b2"),
        ),
        norm1=NormParams(
            gain=Parameter(init((d,), "ones", dtype=dtype), name=f"{prefix}.norm1.gain"),
            bias=_zeros((d,), dtype, f"{prefix}.norm1.bias"),
        ),
        norm2=NormParams(
            gain=Parameter(init((d,), "ones", dtype=dtype), name=f"{prefix}.norm2.gain"),
            bias=_zeros((d,), dtype, f"{prefix}.norm2.bias"),
        ),
        gate1=_build_gate(kind, spec, rng, depth, dtype, f"{prefix}.gate1"),
        gate2=_build_gate(kind, spec, rng, depth, dtype, f"{prefix}.gate2"),
    )


def build_qnetwork_params(spec: QNetworkSpec, rng: RngState, dtype=DEFAULT_DTYPE) -> QNetworkParams:
    spec.validate()
    d = spec.model_dim
    input_w = Parameter(init((spec.state_dim, d), "xavier_uniform", rng, dtype=dtype), name="input.w")
    layers = [build_encoder_layer(spec, rng, depth=i, dtype=dtype) for i in range(1, spec.num_layers + 1)]
    head_scheme = "depth_scaled" if spec.depth_scaled_last_layer else "xavier_uniform"
    head_w = Parameter(
        init((d, spec.num_actions), head_scheme, rng, depth=spec.num_layers + 1, dtype=dtype), name="head.w"
    )
    return QNetworkParams(
        input_w=input_w,
        input_b=_zeros((d,), dtype, "input.b"),
        layers=layers,
        head_w=head_w,
        head_b=_zeros((spec.num_actions,), dtype, "head.b"),
    )


# =============================================================================
# Network wrapper
# =============================================================================


class QNetwork:
    """A TBQN instance: spec + parameters + its own dropout stream."""

    def __init__(self, spec: QNetworkSpec, rng: RngState, dtype=DEFAULT_DTYPE):
        self.spec = spec.validate()
        self.dtype = np.dtype(dtype)
        self.params = build_qnetwork_params(spec, rng.spawn("init"), dtype=self.dtype)
        self.dropout_rng = rng.spawn("dropout")
        self._named = self.params.named_parameters()

    def forward(self, history: Union[np.ndarray, Tensor], training: bool = False) -> Tensor:
        if not isinstance(history, Tensor):
            history = Tensor(np.asarray(history, dtype=self.dtype))
        return qnet_forward(history, self.spec, self.params, training=training, rng=self.dropout_rng)

    __call__ = forward

    def q_values(self, history: np.ndarray) -> np.ndarray:
        """Eval-mode Q-values as a plain array (no graph)."""
        with no_grad():
            return self.forward(history, training=False).data

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        return list(self._named)

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self._named]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._named}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        missing = [name for name, _ in self._named if name not in state]
        if missing:
            raise CheckpointError(f"checkpoint is missing parameters: {missing[:5]}")
        for name, p in self._named:
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(self.dtype, copy=True)

    def clone(self) -> "QNetwork":
        """Independent copy with identical weights (target network)."""
        twin = copy.copy(self)
        twin.params = copy.deepcopy(self.params)
        twin._named = twin.params.named_parameters()
        twin.dropout_rng = self.dropout_rng.spawn("clone")
        for _, p in twin._named:
            p.grad = None
            p.adam_state.m = np.zeros_like(p.data)
            p.adam_state.v = np.zeros_like(p.data)
            p.adam_state.step = 0
        return twin

    def copy_from(self, other: "QNetwork"):
        """Hard update: weights become bit-identical to `other`."""
        for (_, mine), (_, theirs) in zip(self._named, other._named):
            mine.data = theirs.data.copy()

    def soft_update_from(self, other: "QNetwork", tau: float):
        """Polyak step theta <- theta + tau * (theta_other - theta); tau = 1 is a hard copy."""
        if tau >= 1.0:
            self.copy_from(other)
            return
        for (_, mine), (_, theirs) in zip(self._named, other._named):
            mine.data = (mine.data + self.dtype.type(tau) * (theirs.data - mine.data)).astype(self.dtype)

    def save(self, path: Union[str, Path], metadata: Optional[dict] = None) -> Path:
        meta = {"spec": self.spec.to_dict(), "parameter_count": self.parameter_count()}
        meta.update(metadata or {})
        return save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path: Union[str, Path], seed: int = 0) -> Tuple["QNetwork", dict]:
        tensors, metadata = load_checkpoint(path)
        if "spec" not in metadata:
            raise CheckpointError(f"{path}: manifest has no network spec")
        spec = QNetworkSpec.from_dict(metadata["spec"])
        network = cls(spec, RngState(seed))
        network.load_state_dict(tensors)
        logger.info(f"Loaded {network.parameter_count():,}-parameter TBQN from {path}")
        return network, metadata
