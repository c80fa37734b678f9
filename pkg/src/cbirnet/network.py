"""Network assembly, initialization, feature taps, and checkpoint files.

A network is described by a NetworkSpec (pure data, JSON-serializable) and
realized as a Network holding live layers. The classifier architecture built
by build_architecture() is five convolution blocks followed by three hidden
fully connected layers and a log-softmax head; the hidden FC activations
(taken after their ReLUs) double as retrieval features named fc1, fc2, fc3.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from ._binio import read_container_header, read_exact, write_container_header
from .errors import (
    ConfigurationError,
    FormatError,
    InternalError,
    VersionMismatchError,
)
from .layers import (
    DTYPE,
    Conv2d,
    Dropout,
    FullyConnected,
    LogSoftmax,
    MaxPool2d,
    ReLU,
)

CHECKPOINT_MAGIC = b"CBNCKPT\n"
CHECKPOINT_VERSION = 1
WEIGHT_STD = 0.01


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    bias_init: float = 0.0
    type: str = field(default="conv", init=False)


@dataclass(frozen=True)
class MaxPoolSpec:
    window: int
    stride: int
    type: str = field(default="maxpool", init=False)


@dataclass(frozen=True)
class ReLUSpec:
    type: str = field(default="relu", init=False)


@dataclass(frozen=True)
class FCSpec:
    out_features: int
    bias_init: float = 0.0
    type: str = field(default="fc", init=False)


@dataclass(frozen=True)
class DropoutSpec:
    keep_prob: float
    type: str = field(default="dropout", init=False)


@dataclass(frozen=True)
class LogSoftmaxSpec:
    num_classes: int
    type: str = field(default="logsoftmax", init=False)


_SPEC_TYPES = {
    "conv": ConvSpec,
    "maxpool": MaxPoolSpec,
    "relu": ReLUSpec,
    "fc": FCSpec,
    "dropout": DropoutSpec,
    "logsoftmax": LogSoftmaxSpec,
}


def _spec_to_dict(spec):
    d = {"type": spec.type}
    for name in spec.__dataclass_fields__:
        if name != "type":
            d[name] = getattr(spec, name)
    return d


def _spec_from_dict(d):
    kind = d.get("type")
    cls = _SPEC_TYPES.get(kind)
    if cls is None:
        raise ConfigurationError(f"unknown layer type {kind!r}")
    kwargs = {k: v for k, v in d.items() if k != "type"}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"bad fields for layer {kind!r}: {exc}") from exc


@dataclass(frozen=True)
class NetworkSpec:
    """Input geometry plus an ordered list of layer descriptions."""

    input_shape: tuple
    layers: tuple

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "layers": [_spec_to_dict(s) for s in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            input_shape = tuple(int(v) for v in d["input_shape"])
            layers = tuple(_spec_from_dict(s) for s in d["layers"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed network description: {exc}") from exc
        if len(input_shape) != 3:
            raise ConfigurationError(
                f"input_shape must have 3 entries, got {input_shape}")
        return cls(input_shape=input_shape, layers=layers)

    def canonical_json(self):
        """Stable byte encoding used for fingerprinting."""
        return json.dumps(self.to_dict(), sort_keys=True,
                          separators=(",", ":")).encode("utf-8")

    def shape_trace(self):
        """Output shape after each layer, starting from input_shape.

        Raises ConfigurationError as soon as any layer cannot accept
        the shape produced by its predecessor.
        """
        net = Network.from_spec(self)
        shapes = [self.input_shape]
        for layer in net.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes


def build_architecture(input_shape=(1, 224, 224), num_classes=24,
                       keep_prob=0.5, scale=1.0):
    """The fixed classifier topology, optionally width-scaled.

    scale multiplies every convolution's channel count and every hidden FC
    width (rounded up), leaving kernels, strides, and the class head alone.
    The full-size network expects 1x224x224 input; smaller inputs work as
    long as every stage keeps a positive spatial extent (64x64 does at
    scale <= 0.1 because the pools land exactly on 1x1 before the FCs).
    """
    if not 0.0 < scale <= 1.0:
        raise ConfigurationError(f"scale must be in (0, 1], got {scale}")
    if num_classes < 2:
        raise ConfigurationError(f"num_classes must be >= 2, got {num_classes}")

    def width(n):
        return math.ceil(n * scale)

    layers = [
        ConvSpec(width(64), 11, 11, stride=4, padding=2, bias_init=0.0),
        ReLUSpec(),
        MaxPoolSpec(window=3, stride=2),
        ConvSpec(width(192), 5, 5, stride=1, padding=2, bias_init=1.0),
        ReLUSpec(),
        MaxPoolSpec(window=3, stride=2),
        ConvSpec(width(384), 5, 5, stride=1, padding=2, bias_init=0.0),
        ReLUSpec(),
        ConvSpec(width(256), 3, 3, stride=1, padding=1, bias_init=1.0),
        ReLUSpec(),
        ConvSpec(width(256), 3, 3, stride=1, padding=1, bias_init=1.0),
        ReLUSpec(),
        MaxPoolSpec(window=3, stride=2),
        FCSpec(width(4096), bias_init=1.0),
        ReLUSpec(),
        DropoutSpec(keep_prob=keep_prob),
        FCSpec(width(4096), bias_init=1.0),
        ReLUSpec(),
        DropoutSpec(keep_prob=keep_prob),
        FCSpec(width(4096), bias_init=1.0),
        ReLUSpec(),
        FCSpec(num_classes, bias_init=0.0),
        LogSoftmaxSpec(num_classes=num_classes),
    ]
    return NetworkSpec(input_shape=tuple(input_shape), layers=tuple(layers))


class Network:
    """Live layers built from a NetworkSpec, with feature taps.

    Feature taps are the ReLU outputs directly above each hidden FC layer;
    they are named fc1, fc2, ... in depth order. The class head (an FC
    followed by log-softmax) is not a tap.
    """

    def __init__(self, spec, layers, bias_inits, feature_taps):
        self.spec = spec
        self.layers = layers
        self._bias_inits = bias_inits
        self.feature_taps = feature_taps  # list of (name, layer_index)

    @classmethod
    def from_spec(cls, spec):
        layers = []
        bias_inits = []
        taps = []
        shape = spec.input_shape
        for i, ls in enumerate(spec.layers):
            if isinstance(ls, ConvSpec):
                layer = Conv2d(shape[0], ls.out_channels, ls.kernel_h,
                               ls.kernel_w, stride=ls.stride,
                               padding=ls.padding)
                bias_inits.append(ls.bias_init)
            elif isinstance(ls, MaxPoolSpec):
                layer = MaxPool2d(ls.window, ls.stride)
            elif isinstance(ls, ReLUSpec):
                layer = ReLU()
                if i > 0 and isinstance(spec.layers[i - 1], FCSpec):
                    taps.append((f"fc{len(taps) + 1}", len(layers)))
            elif isinstance(ls, FCSpec):
                layer = FullyConnected(int(np.prod(shape)), ls.out_features)
                bias_inits.append(ls.bias_init)
            elif isinstance(ls, DropoutSpec):
                layer = Dropout(ls.keep_prob)
            elif isinstance(ls, LogSoftmaxSpec):
                layer = LogSoftmax(ls.num_classes)
            else:
                raise ConfigurationError(f"unhandled layer spec {ls!r}")
            shape = layer.output_shape(shape)
            layers.append(layer)
        return cls(spec, layers, bias_inits, taps)

    @property
    def feature_layer_names(self):
        return [name for name, _ in self.feature_taps]

    def feature_dims(self):
        trace = self.spec.shape_trace()
        return {name: int(np.prod(trace[idx + 1]))
                for name, idx in self.feature_taps}

    def initialize(self, seed, weight_std=WEIGHT_STD):
        """Draw all weights from N(0, weight_std^2); set biases to their constants.

        A single seeded generator is consumed in layer order, so equal seeds
        give bit-identical parameters. The 0.01 default suits full-width
        networks; narrow width-scaled networks need a larger std, otherwise
        input signal decays to nothing against the constant-1 biases and
        training stalls at chance.
        """
        if not weight_std > 0.0:
            raise ConfigurationError(
                f"weight_std must be positive, got {weight_std}")
        rng = np.random.default_rng(seed)
        k = 0
        for layer in self.layers:
            if isinstance(layer, (Conv2d, FullyConnected)):
                layer.weights[:] = rng.normal(
                    0.0, weight_std, size=layer.weights.shape)
                layer.biases.fill(self._bias_inits[k])
                layer.weight_grads.fill(0.0)
                layer.bias_grads.fill(0.0)
                k += 1

    def seed_dropout(self, seed):
        """Point every dropout layer at one fresh generator (shared stream)."""
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = rng

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def forward(self, x, train=False):
        if x.shape != self.spec.input_shape:
            raise ConfigurationError(
                f"input shape {x.shape} does not match network input "
                f"{self.spec.input_shape}")
        out = np.asarray(x, dtype=DTYPE)
        for layer in self.layers:
            out = layer.forward(out, train=train)
        return out

    def backward(self, grad_out):
        g = grad_out
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def forward_classify(self, x):
        """Eval-mode pass returning (log_probs, predicted, features).

        features maps each tap name to a copy of its activation vector.
        No layer state is written, so a frozen network may serve many
        callers at once.
        """
        if x.shape != self.spec.input_shape:
            raise ConfigurationError(
                f"input shape {x.shape} does not match network input "
                f"{self.spec.input_shape}")
        taps = dict(self.feature_taps)
        wanted = {idx: name for name, idx in taps.items()}
        features = {}
        out = np.asarray(x, dtype=DTYPE)
        for i, layer in enumerate(self.layers):
            out = layer.forward(out, train=False)
            name = wanted.get(i)
            if name is not None:
                features[name] = out.reshape(-1).copy()
        log_probs = out
        return log_probs, int(np.argmax(log_probs)), features

    def fingerprint(self):
        """sha256 over the canonical spec plus every parameter's bytes."""
        h = hashlib.sha256()
        h.update(self.spec.canonical_json())
        for value, _ in self.parameters():
            h.update(np.ascontiguousarray(value, dtype=DTYPE).tobytes())
        return h.hexdigest()


def _write_tensor(f, arr):
    arr = np.ascontiguousarray(arr, dtype=DTYPE)
    f.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        f.write(struct.pack("<I", d))
    f.write(arr.astype("<f8", copy=False).tobytes())


def _read_tensor(f, expect_shape):
    (ndim,) = struct.unpack("<B", read_exact(f, 1, "tensor rank"))
    dims = struct.unpack(
        f"<{ndim}I", read_exact(f, 4 * ndim, "tensor dims"))
    if dims != tuple(expect_shape):
        raise FormatError(
            f"stored tensor shape {dims} does not match network "
            f"parameter shape {tuple(expect_shape)}")
    count = int(np.prod(dims)) if ndim else 1
    raw = read_exact(f, 8 * count, "tensor payload")
    return np.frombuffer(raw, dtype="<f8").reshape(dims).astype(DTYPE)


def save_checkpoint(path, network, metadata=None):
    """Write spec, metadata, and all parameters to a deterministic binary file.

    Layout: 8-byte magic, u32 format version, u32 header length, UTF-8 JSON
    header (sorted keys), then each parameter tensor in layer order as
    u8 rank, u32 dims, little-endian float64 payload.
    """
    header = {
        "spec": network.spec.to_dict(),
        "metadata": metadata or {},
    }
    with open(path, "wb") as f:
        write_container_header(f, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                               header)
        for value, _ in network.parameters():
            _write_tensor(f, value)


def load_checkpoint(path):
    """Rebuild a Network (plus its metadata dict) from save_checkpoint output."""
    with open(path, "rb") as f:
        version, header = read_container_header(
            f, CHECKPOINT_MAGIC, "checkpoint")
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(
                f"checkpoint format version {version} is not supported "
                f"(this build reads version {CHECKPOINT_VERSION})")
        spec = NetworkSpec.from_dict(header.get("spec", {}))
        network = Network.from_spec(spec)
        for value, _ in network.parameters():
            value[:] = _read_tensor(f, value.shape)
        trailing = f.read(1)
        if trailing:
            raise FormatError("checkpoint has trailing bytes after the last tensor")
    return network, header.get("metadata", {})
