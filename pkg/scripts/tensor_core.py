# scripts/tensor_core.py
"""
Minimal reverse-mode autodiff engine for the Transformer Q-network.

Tensors wrap numpy arrays. Every differentiable op records its parents and a
backward closure that maps the output gradient to one gradient per parent;
`backward` walks the graph in reverse topological order and accumulates.

Usage:
    from tensor_core import Tensor, Parameter, RngState, matmul, backward

    rng = RngState(7)
    w = Parameter(init((3, 2), "xavier_uniform", rng), name="w")
    loss = matmul(Tensor(np.ones((1, 3))), w).sum()
    backward(loss)
    adam_step([w], lr=1e-3)
"""

import json
import logging
import threading
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from tbqn_errors import CheckpointError, ConfigError, ContractError, ShapeError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

# Optimizer defaults (Transformer practice)
ADAM_BETAS = (0.9, 0.98)
ADAM_EPS = 1e-9
DEFAULT_MAX_NORM = 1.0

CHECKPOINT_FORMAT = "tbqn-checkpoint"
CHECKPOINT_VERSION = 1

ArrayLike = Union[np.ndarray, Sequence, float, int]

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad():
    """Build no graph inside the block (target-network evaluation, acting)."""
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


# =============================================================================
# Random streams
# =============================================================================


def _key_to_int(key: Union[str, int]) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode("utf-8"))


class RngState:
    """Seeded random stream. Same seed and call sequence give bit-identical draws."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.position = 0
        self._generator = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, *keys: Union[str, int]) -> "RngState":
        """Child stream keyed by (seed, keys); independent of this stream's position."""
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32] + [_key_to_int(k) for k in keys]
        child_seed = np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0]
        return RngState(int(child_seed))

    def random(self, size=None):
        self.position += 1
        return self._generator.random(size)

    def uniform(self, low: float, high: float, size=None):
        self.position += 1
        return self._generator.uniform(low, high, size)

    def integers(self, low: int, high: Optional[int] = None, size=None):
        self.position += 1
        return self._generator.integers(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        self.position += 1
        return self._generator.normal(loc, scale, size)

    def seed_int(self) -> int:
        """A fresh 31-bit seed for libraries that take integer seeds."""
        return int(self.integers(0, 2**31 - 1))

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, position={self.position})"


# =============================================================================
# Tensor
# =============================================================================


class Tensor:
    """n-dimensional array node in a reverse-mode differentiation graph."""

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        dtype=None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None,
        op: str = "",
    ):
        if dtype is not None:
            array = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype.kind == "f":
            array = data
        else:
            array = np.asarray(data, dtype=DEFAULT_DTYPE)
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    # Operator sugar; broadcasting follows numpy.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class AdamState:
    """First/second moment buffers and the step counter of one parameter."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


class Parameter(Tensor):
    """A trainable leaf tensor with a hierarchical name and Adam state."""

    def __init__(self, data: ArrayLike, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.adam_state = AdamState(m=np.zeros_like(self.data), v=np.zeros_like(self.data))

    @property
    def tensor(self) -> "Parameter":
        return self

    def __repr__(self) -> str:
        return f"Parameter(name='{self.name}', shape={self.shape}, step={self.adam_state.step})"


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn, op=op)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# =============================================================================
# Elementwise ops
# =============================================================================


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_shape("add", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), _backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_shape("sub", a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), _backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _broadcast_shape("mul", a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), _backward, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.dtype.type(factor)

    def _backward(g):
        return (g * factor,)

    return _make(x.data * factor, (x,), _backward, "scale")


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    mask = (x.data > 0).astype(x.dtype)

    def _backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), _backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    half = x.dtype.type(0.5)
    out = half * (1 + np.tanh(half * x.data))

    def _backward(g):
        return (g * out * (1 - out),)

    return _make(out, (x,), _backward, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def _backward(g):
        return (g * (1 - out * out),)

    return _make(out, (x,), _backward, "tanh")


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: 0.5x^2 inside [-delta, delta], linear outside."""
    delta = x.dtype.type(delta)
    abs_x = np.abs(x.data)
    inside = abs_x <= delta
    out = np.where(inside, 0.5 * x.data * x.data, delta * (abs_x - 0.5 * delta))

    def _backward(g):
        return (g * np.where(inside, x.data, delta * np.sign(x.data)),)

    return _make(out.astype(x.dtype), (x,), _backward, "huber")


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; add/mul demand equal shapes, scale takes a scalar."""
    unary = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
    if kind in unary:
        return unary[kind](a)
    if kind == "scale":
        if not np.isscalar(b):
            raise ShapeError("scale", a.shape, np.shape(b))
        return scale(a, float(b))
    if kind in ("add", "mul"):
        b = _as_tensor(b, a)
        if a.shape != b.shape:
            raise ShapeError(kind, a.shape, b.shape)
        return add(a, b) if kind == "add" else mul(a, b)
    raise ConfigError("elementwise.kind", f"unknown kind '{kind}'")


# =============================================================================
# Shape ops and reductions
# =============================================================================


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None

    def _backward(g):
        return (g.reshape(x.shape),)

    return _make(out, (x,), _backward, "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def _backward(g):
        return (np.transpose(g, inverse),)

    return _make(np.transpose(x.data, axes), (x,), _backward, "transpose")


def take(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing with a scatter backward."""
    out = x.data[index]

    def _backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), _backward, "take")


def gather_last(x: Tensor, indices: np.ndarray) -> Tensor:
    """Pick x[i, indices[i]] from a 2-D tensor (Q(s, a) for the taken actions)."""
    if x.ndim != 2 or len(indices) != x.shape[0]:
        raise ShapeError("gather_last", x.shape, np.shape(indices))
    rows = np.arange(x.shape[0])
    indices = np.asarray(indices, dtype=np.int64)

    def _backward(g):
        full = np.zeros_like(x.data)
        full[rows, indices] = g
        return (full,)

    return _make(x.data[rows, indices].copy(), (x,), _backward, "gather_last")


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), _backward, "sum")


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# =============================================================================
# Linear algebra and normalization
# =============================================================================


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading dimensions broadcast from 1."""
    b = _as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def _backward(g):
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _make(np.matmul(a.data, b.data), (a, b), _backward, "matmul")


def softmax_last(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max-subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def _backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (x,), _backward, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to mean 0 / variance 1, then apply gain and bias."""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError("layer_norm", x.shape, gain.shape, bias.shape)
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(eps))
    x_hat = centered * inv_std
    out = x_hat * gain.data + bias.data
    reduce_axes = tuple(range(x.ndim - 1))

    def _backward(g):
        d_hat = g * gain.data
        grad_x = (inv_std / width) * (
            width * d_hat
            - d_hat.sum(axis=-1, keepdims=True)
            - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
        )
        grad_gain = (g * x_hat).sum(axis=reduce_axes)
        grad_bias = g.sum(axis=reduce_axes)
        return grad_x, grad_gain, grad_bias

    return _make(out.astype(x.dtype), (x, gain, bias), _backward, "layer_norm")


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[RngState]) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError("dropout.rate", f"must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: training mode with rate > 0 needs an RngState")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1.0 - rate)

    def _backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), _backward, "dropout")


# =============================================================================
# Backward pass
# =============================================================================


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(node) into `.grad` of every reachable requires_grad node."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not depend on any tensor that requires grad")

    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        node.grad = grad if node.grad is None else node.grad + grad
        if node._backward is None:
            continue
        for parent, parent_grad in zip(node._parents, node._backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = parent_grad if key not in pending else pending[key] + parent_grad


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# =============================================================================
# Initialization
# =============================================================================


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init(
    shape: Sequence[int],
    scheme: str,
    rng: Optional[RngState] = None,
    depth: int = 1,
    dtype=DEFAULT_DTYPE,
) -> np.ndarray:
    """Draw an initial weight array.

    xavier_uniform: U(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
    depth_scaled:   the xavier bound divided by sqrt(depth), depth being the
                    1-based encoder layer index.
    zeros / ones:   constants.
    """
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ConfigError("init.shape", f"must be non-empty with positive dims, got {shape}")
    if scheme == "zeros":
        return np.zeros(shape, dtype=dtype)
    if scheme == "ones":
        return np.ones(shape, dtype=dtype)
    if scheme not in ("xavier_uniform", "depth_scaled"):
        raise ConfigError("init.scheme", f"unknown scheme '{scheme}'")
    if rng is None:
        raise ContractError(f"init: scheme '{scheme}' needs an RngState")

    fan_in, fan_out = (shape[0], shape[0]) if len(shape) == 1 else (shape[-2], shape[-1])
    bound = xavier_bound(fan_in, fan_out)
    if scheme == "depth_scaled":
        if depth < 1:
            raise ConfigError("init.depth", f"must be >= 1, got {depth}")
        bound /= np.sqrt(depth)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# =============================================================================
# Optimizer and clipping
# =============================================================================


def adam_step(
    params: Sequence[Parameter],
    lr: float,
    betas: Tuple[float, float] = ADAM_BETAS,
    eps: float = ADAM_EPS,
):
    """Bias-corrected Adam update. Gradients are left in place."""
    beta1, beta2 = betas
    for p in params:
        if p.grad is None:
            raise ContractError(f"adam_step: parameter '{p.name}' has no gradient")
        state = p.adam_state
        state.step += 1
        grad = p.grad.astype(p.dtype, copy=False)
        state.m = beta1 * state.m + (1.0 - beta1) * grad
        state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
        m_hat = state.m / (1.0 - beta1**state.step)
        v_hat = state.v / (1.0 - beta2**state.step)
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return float(np.sqrt(total))


def clip_global_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all grads so their joint L2 norm is at most max_norm; return the pre-clip norm."""
    if max_norm <= 0:
        raise ConfigError("clip_global_norm.max_norm", f"must be > 0, got {max_norm}")
    norm = global_grad_norm(params)
    if np.isfinite(norm) and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * factor).astype(p.grad.dtype)
    return norm


# =============================================================================
# Checkpoints: JSON manifest + flat little-endian float32 payload
# =============================================================================


def _checkpoint_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    base = Path(path)
    if base.suffix in (".json", ".bin"):
        base = base.with_suffix("")
    return base.with_name(base.name + ".json"), base.with_name(base.name + ".bin")


def save_checkpoint(
    path: Union[str, Path], tensors: Dict[str, np.ndarray], metadata: Optional[dict] = None
) -> Path:
    """Write `<path>.json` (name -> shape/offset/dtype) and `<path>.bin` (payload)."""
    manifest_path, payload_path = _checkpoint_paths(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    offset = 0
    chunks = []
    for name, array in tensors.items():
        flat = np.ascontiguousarray(array, dtype="<f4").reshape(-1)
        entries.append(
            {"name": name, "shape": list(np.shape(array)), "offset": offset, "dtype": "<f4"}
        )
        offset += flat.nbytes
        chunks.append(flat.tobytes())

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "payload": payload_path.name,
        "payload_bytes": offset,
        "tensors": entries,
        "metadata": metadata or {},
    }
    with open(payload_path, "wb") as f:
        for chunk in chunks:
            f.write(chunk)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=2)
    logger.debug(f"Saved checkpoint {manifest_path} ({len(entries)} tensors, {offset} bytes)")
    return manifest_path


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    manifest_path, payload_path = _checkpoint_paths(path)
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
        payload = payload_path.read_bytes()
    except FileNotFoundError as e:
        raise CheckpointError(f"checkpoint file missing: {e.filename}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable manifest {manifest_path}: {e}") from e

    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{manifest_path} is not a {CHECKPOINT_FORMAT} manifest")
    if len(payload) != manifest.get("payload_bytes"):
        raise CheckpointError(
            f"payload size {len(payload)} does not match manifest ({manifest.get('payload_bytes')})"
        )

    tensors = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        array = np.frombuffer(payload, dtype=entry["dtype"], count=count, offset=entry["offset"])
        tensors[entry["name"]] = array.reshape(entry["shape"]).astype(np.float32)
    return tensors, manifest.get("metadata", {})


# =============================================================================
# Finite-difference oracle
# =============================================================================


def numerical_gradient(fn: Callable[[], Union[Tensor, float]], tensor: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar fn() with respect to tensor.data (modified in place, restored)."""
    grad = np.zeros_like(tensor.data, dtype=np.float64)
    flat = tensor.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            plus = fn()
            flat[i] = original - eps
            minus = fn()
            flat[i] = original
            plus = plus.item() if isinstance(plus, Tensor) else float(plus)
            minus = minus.item() if isinstance(minus, Tensor) else float(minus)
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * eps)
    return grad
