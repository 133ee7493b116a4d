"""
    berry_sim.qnet
    ~~~~~~~~~~~~~~

    Dense Q-network with forward inference, exact backpropagation of the
    temporal-difference loss, per-layer symmetric 8-bit quantization and the
    binary checkpoint container.

    Parameters are held as 32-bit floats.  Gradients are always computed in
    64-bit arithmetic and cast back when an update is applied.
"""

import hashlib
import logging
import os
import struct
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from berry_sim.errors import (
    ConfigurationError,
    IntegrityError,
    ShapeError,
    TrainingDivergedError,
    UsageError,
)

logger = logging.getLogger(__name__)

#: Largest code magnitude.  -128 is never produced by quantization so the
#: code space stays closed under negation; bit faults may still create it.
QMAX = 127

#: Called as ``hook(layer_index, activations)`` on every hidden layer output.
ActivationHook = Callable[[int, np.ndarray], np.ndarray]


def _frozen(array, dtype=None) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, ties away from zero."""
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


@dataclass(frozen=True, eq=False)
class DenseLayer:
    """One fully connected layer, ``weights`` is ``(out, in)``."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights)
        biases = np.asarray(self.biases)
        if weights.ndim != 2:
            raise ShapeError(f"weights must be 2-D, got shape {weights.shape}")
        if biases.shape != (weights.shape[0],):
            raise ShapeError(
                f"biases of shape {biases.shape} do not match "
                f"weights of shape {weights.shape}"
            )
        object.__setattr__(self, "weights", _frozen(weights))
        object.__setattr__(self, "biases", _frozen(biases, dtype=weights.dtype))

    @property
    def fan_in(self) -> int:
        return self.weights.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[0]

    @property
    def parameter_count(self) -> int:
        return self.weights.size + self.biases.size

    def astype(self, dtype) -> "DenseLayer":
        return DenseLayer(self.weights.astype(dtype), self.biases.astype(dtype))


@dataclass(frozen=True, eq=False)
class QNetwork:
    """An immutable stack of dense layers, ReLU between them and an identity
    output layer with one unit per action.
    """

    layers: Tuple[DenseLayer, ...]

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        for previous, layer in zip(layers, layers[1:]):
            if layer.fan_in != previous.fan_out:
                raise ShapeError(
                    f"layer expects {layer.fan_in} inputs but the previous "
                    f"layer produces {previous.fan_out}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def arch(self) -> Tuple[int, ...]:
        return (self.layers[0].fan_in,) + tuple(l.fan_out for l in self.layers)

    @property
    def n_actions(self) -> int:
        return self.layers[-1].fan_out

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weights.dtype

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)

    def astype(self, dtype) -> "QNetwork":
        return QNetwork(tuple(layer.astype(dtype) for layer in self.layers))

    def copy(self) -> "QNetwork":
        return self.astype(self.dtype)

    def is_finite(self) -> bool:
        return all(
            np.all(np.isfinite(l.weights)) and np.all(np.isfinite(l.biases))
            for l in self.layers
        )

    def parameter_digest(self) -> str:
        """SHA-256 over the architecture and the raw parameter bytes."""
        digest = hashlib.sha256()
        digest.update(np.asarray(self.arch, dtype="<u4").tobytes())
        for layer in self.layers:
            digest.update(np.ascontiguousarray(layer.weights).tobytes())
            digest.update(np.ascontiguousarray(layer.biases).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True, eq=False)
class Gradient:
    """Per-layer weight and bias gradients mirroring a :class:`QNetwork`."""

    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    @classmethod
    def zeros_like(cls, net: QNetwork) -> "Gradient":
        return cls(
            tuple(np.zeros(l.weights.shape) for l in net.layers),
            tuple(np.zeros(l.biases.shape) for l in net.layers),
        )

    def _check(self, other: "Gradient"):
        if len(self.weights) != len(other.weights) or any(
            a.shape != b.shape for a, b in zip(self.weights, other.weights)
        ):
            raise ShapeError("gradients have different shapes")

    def __add__(self, other: "Gradient") -> "Gradient":
        self._check(other)
        return Gradient(
            tuple(a + b for a, b in zip(self.weights, other.weights)),
            tuple(a + b for a, b in zip(self.biases, other.biases)),
        )

    def __mul__(self, factor: float) -> "Gradient":
        return Gradient(
            tuple(w * factor for w in self.weights),
            tuple(b * factor for b in self.biases),
        )

    __rmul__ = __mul__

    def global_norm(self) -> float:
        total = sum(float(np.sum(w * w)) for w in self.weights)
        total += sum(float(np.sum(b * b)) for b in self.biases)
        return float(np.sqrt(total))

    def clipped(self, max_norm: float) -> "Gradient":
        """Rescale so the global norm does not exceed `max_norm`."""
        norm = self.global_norm()
        if max_norm <= 0 or norm <= max_norm:
            return self
        return self * (max_norm / norm)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) for w in self.weights) and all(
            np.all(np.isfinite(b)) for b in self.biases
        )


def init_network(arch: Sequence[int], seed: int, dtype=np.float32) -> QNetwork:
    """Uniform Glorot initialisation, zero biases, deterministic per seed."""
    arch = list(arch)
    if len(arch) < 2:
        raise ConfigurationError(
            f"network architecture needs at least 2 widths, got {arch!r}"
        )
    if any(int(width) != width or width < 1 for width in arch):
        raise ConfigurationError(f"all layer widths must be >= 1, got {arch!r}")

    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(arch, arch[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        layers.append(
            DenseLayer(weights.astype(dtype), np.zeros(fan_out, dtype=dtype))
        )
    return QNetwork(tuple(layers))


def _as_batch(net: QNetwork, states, dtype) -> np.ndarray:
    x = np.asarray(states, dtype=dtype)
    if x.ndim == 1:
        x = x[np.newaxis, :]
    if x.ndim != 2 or x.shape[1] != net.arch[0]:
        raise ShapeError(
            f"state of shape {np.shape(states)} does not match "
            f"network input width {net.arch[0]}"
        )
    return x


def forward(
    net: QNetwork, state, activation_hook: Optional[ActivationHook] = None
) -> np.ndarray:
    """Q-values for a single state (1-D) or a batch of states (2-D)."""
    single = np.ndim(state) == 1
    h = _as_batch(net, state, net.dtype)
    last = len(net.layers) - 1
    for index, layer in enumerate(net.layers):
        h = h @ layer.weights.T + layer.biases
        if index < last:
            h = np.maximum(h, 0)
            if activation_hook is not None:
                h = activation_hook(index, h)
    return h[0] if single else h


def td_gradient(
    net: QNetwork,
    states,
    actions,
    targets,
    activation_hook: Optional[ActivationHook] = None,
) -> Tuple[float, Gradient]:
    """Sum-of-squares TD loss and its exact gradient.

    Only the output unit of the taken action receives error.  When an
    activation hook is given it is applied in the forward pass and treated
    as the identity in the backward pass.
    """
    x = _as_batch(net, states, np.float64) if np.size(states) else None
    if x is None or x.shape[0] == 0:
        raise UsageError("td_gradient needs a non-empty batch")
    actions = np.asarray(actions, dtype=np.intp).reshape(-1)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1)
    if not (x.shape[0] == actions.shape[0] == targets.shape[0]):
        raise ShapeError(
            f"batch sizes differ: {x.shape[0]} states, {actions.shape[0]} "
            f"actions, {targets.shape[0]} targets"
        )
    if np.any((actions < 0) | (actions >= net.n_actions)):
        raise ShapeError(f"actions must lie in [0, {net.n_actions})")
    if not np.all(np.isfinite(targets)):
        raise TrainingDivergedError("TD targets must be finite")

    weights = [layer.weights.astype(np.float64) for layer in net.layers]
    biases = [layer.biases.astype(np.float64) for layer in net.layers]
    last = len(weights) - 1

    inputs, pre_activations = [], []
    h = x
    for index, (w, b) in enumerate(zip(weights, biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre_activations.append(z)
        if index < last:
            h = np.maximum(z, 0.0)
            if activation_hook is not None:
                h = activation_hook(index, h)
        else:
            h = z

    rows = np.arange(actions.shape[0])
    error = h[rows, actions] - targets
    loss = float(np.dot(error, error))

    delta = np.zeros_like(h)
    delta[rows, actions] = 2.0 * error
    grad_w = [None] * len(weights)
    grad_b = [None] * len(weights)
    for index in range(last, -1, -1):
        grad_w[index] = delta.T @ inputs[index]
        grad_b[index] = delta.sum(axis=0)
        if index > 0:
            delta = (delta @ weights[index]) * (pre_activations[index - 1] > 0)

    return loss, Gradient(tuple(grad_w), tuple(grad_b))


def apply_update(
    net: QNetwork,
    g_clean: Gradient,
    g_perturbed: Optional[Gradient],
    learning_rate: float,
) -> QNetwork:
    """``theta - learning_rate * (g_clean + g_perturbed)`` as a new network.

    A missing perturbed gradient counts as zero.
    """
    if not learning_rate > 0:
        raise ConfigurationError(
            f"learning rate must be positive, got {learning_rate!r}"
        )
    total = g_clean if g_perturbed is None else g_clean + g_perturbed
    if len(total.weights) != len(net.layers):
        raise ShapeError("gradient depth does not match the network")

    layers = []
    for layer, gw, gb in zip(net.layers, total.weights, total.biases):
        if gw.shape != layer.weights.shape or gb.shape != layer.biases.shape:
            raise ShapeError(
                f"gradient shapes {gw.shape}/{gb.shape} do not match layer "
                f"shapes {layer.weights.shape}/{layer.biases.shape}"
            )
        dtype = layer.weights.dtype
        weights = layer.weights.astype(np.float64) - learning_rate * gw
        biases = layer.biases.astype(np.float64) - learning_rate * gb
        layers.append(DenseLayer(weights.astype(dtype), biases.astype(dtype)))
    return QNetwork(tuple(layers))


@dataclass(frozen=True, eq=False)
class QuantizedLayer:
    """Signed 8-bit codes of one layer, weights row-major then biases."""

    codes: np.ndarray
    scale: float
    shape: Tuple[int, int]

    def __post_init__(self):
        codes = np.asarray(self.codes)
        if codes.dtype != np.int8:
            raise ShapeError(f"codes must be int8, got {codes.dtype}")
        rows, cols = self.shape
        if codes.shape != (rows * cols + rows,):
            raise ShapeError(
                f"{codes.size} codes do not fit a {rows}x{cols} layer with biases"
            )
        if not self.scale > 0:
            raise ShapeError(f"scale must be positive, got {self.scale!r}")
        object.__setattr__(self, "codes", _frozen(codes))
        object.__setattr__(self, "shape", (int(rows), int(cols)))

    @property
    def n_weights(self) -> int:
        return self.shape[0] * self.shape[1]

    def with_codes(self, codes: np.ndarray) -> "QuantizedLayer":
        return QuantizedLayer(codes, self.scale, self.shape)


def quantize_layer(layer: DenseLayer) -> QuantizedLayer:
    """Symmetric per-layer quantization with ``scale = max|v| / 127``."""
    values = np.concatenate([layer.weights.ravel(), layer.biases]).astype(np.float64)
    max_abs = float(np.max(np.abs(values))) if values.size else 0.0
    if not np.isfinite(max_abs):
        raise UsageError("cannot quantize a layer with non-finite parameters")
    if max_abs == 0.0:
        return QuantizedLayer(np.zeros(values.size, np.int8), 1.0, layer.weights.shape)

    # dividing by max_abs (not by the rounded scale) keeps ties such as
    # 0.635 / (1.27 / 127) = 63.5 exact
    codes = np.clip(round_half_away(values * QMAX / max_abs), -QMAX, QMAX)
    scale = max_abs / QMAX
    return QuantizedLayer(codes.astype(np.int8), scale, layer.weights.shape)


def dequantize_layer(q: QuantizedLayer, dtype=np.float32) -> DenseLayer:
    values = q.codes.astype(np.float64) * q.scale
    weights = values[: q.n_weights].reshape(q.shape)
    return DenseLayer(weights.astype(dtype), values[q.n_weights :].astype(dtype))


def quantize_network(net: QNetwork) -> Tuple[QuantizedLayer, ...]:
    return tuple(quantize_layer(layer) for layer in net.layers)


def dequantize_network(layers: Sequence[QuantizedLayer], dtype=np.float32) -> QNetwork:
    return QNetwork(tuple(dequantize_layer(q, dtype) for q in layers))


# Checkpoint container, all fields little-endian:
#
#   magic   8 bytes   b"BERRYQN\0"
#   version u32       CHECKPOINT_VERSION
#   n       u32       number of widths in the architecture
#   widths  n * u32
#   seed    u64
#   step    u64
#   then for every layer: out*in f32 weights (row-major), out f32 biases
CHECKPOINT_MAGIC = b"BERRYQN\0"
CHECKPOINT_VERSION = 1
_PREAMBLE = struct.Struct("<8sII")
_TRAILER = struct.Struct("<QQ")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    network: QNetwork
    seed: int
    step: int


def checkpoint_bytes(network: QNetwork, seed: int = 0, step: int = 0) -> bytes:
    arch = network.arch
    chunks = [
        _PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(arch)),
        np.asarray(arch, dtype="<u4").tobytes(),
        _TRAILER.pack(int(seed), int(step)),
    ]
    for layer in network.layers:
        chunks.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.biases, dtype="<f4").tobytes())
    return b"".join(chunks)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREAMBLE.size:
        raise IntegrityError("checkpoint is truncated")
    magic, version, n_widths = _PREAMBLE.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise IntegrityError("not a berry_sim checkpoint (bad magic)")
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")

    offset = _PREAMBLE.size
    arch_end = offset + 4 * n_widths
    if n_widths < 2 or len(data) < arch_end + _TRAILER.size:
        raise IntegrityError("checkpoint header is truncated or malformed")
    arch = np.frombuffer(data, dtype="<u4", count=n_widths, offset=offset)
    seed, step = _TRAILER.unpack_from(data, arch_end)
    offset = arch_end + _TRAILER.size

    layers = []
    for fan_in, fan_out in zip(arch, arch[1:]):
        n_weights = int(fan_in) * int(fan_out)
        needed = 4 * (n_weights + int(fan_out))
        if len(data) < offset + needed:
            raise IntegrityError("checkpoint parameter block is truncated")
        weights = np.frombuffer(data, dtype="<f4", count=n_weights, offset=offset)
        offset += 4 * n_weights
        biases = np.frombuffer(data, dtype="<f4", count=int(fan_out), offset=offset)
        offset += 4 * int(fan_out)
        layers.append(
            DenseLayer(
                weights.reshape(int(fan_out), int(fan_in)).astype(np.float32),
                biases.astype(np.float32),
            )
        )
    if offset != len(data):
        raise IntegrityError(f"{len(data) - offset} unexpected trailing bytes")
    return Checkpoint(QNetwork(tuple(layers)), int(seed), int(step))


def save_checkpoint(path, network: QNetwork, seed: int = 0, step: int = 0) -> None:
    data = checkpoint_bytes(network, seed, step)
    with open(os.fspath(path), "wb") as fh:
        fh.write(data)
    logger.debug("wrote checkpoint %s (arch=%s, step=%d)", path, network.arch, step)


def load_checkpoint(path) -> Checkpoint:
    with open(os.fspath(path), "rb") as fh:
        return parse_checkpoint(fh.read())
