"""Text network specs, network construction and the forward pass.

Spec syntax, one layer per line, ``#`` starts a comment::

    input channels=1 height=28 width=28 classes=10
    fio rules=32 outputs=16 kernel=3
    fpo rules=64 outputs=32 kernel=2 stride=2
    fl units=256 dropout=0.2
    fl units=10
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .layers import FuzzyLayerParams, LayerKind, fuzzy_forward, init_params
from .tensor import Tensor

_KEYS = {
    "fio": {"rules": int, "outputs": int, "kernel": int, "stride": int},
    "fpo": {"rules": int, "outputs": int, "kernel": int, "stride": int},
    "fl": {"units": int, "dropout": float, "activation": str},
    "input": {"channels": int, "height": int, "width": int, "classes": int},
}
_REQUIRED = {
    "fio": {"rules", "outputs", "kernel"},
    "fpo": {"rules", "outputs", "kernel", "stride"},
    "fl": {"units"},
    "input": {"channels", "height", "width", "classes"},
}
ACTIVATIONS = ("relu", "leaky_relu")


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    rules: int = 0
    outputs: int = 0
    kernel: int = 0
    stride: int = 1
    units: int = 0
    dropout: float = 0.0
    activation: str = "relu"

    def describe(self) -> str:
        if self.kind is LayerKind.FL:
            return f"FL(units={self.units}, dropout={self.dropout:g}, activation={self.activation})"
        return (f"{self.kind.name}(rules={self.rules}, outputs={self.outputs}, "
                f"kernel={self.kernel}x{self.kernel}, stride={self.stride})")


@dataclass
class NetworkSpec:
    layers: List[LayerSpec]
    input_shape: Optional[Tuple[int, int, int]] = None
    num_classes: Optional[int] = None

    def validate(self) -> None:
        if not self.layers:
            raise ConfigurationError("network has no layers")
        seen_fl = False
        for i, layer in enumerate(self.layers):
            if layer.kind is LayerKind.FL:
                seen_fl = True
            elif seen_fl:
                raise ConfigurationError(
                    f"layer {i + 1} ({layer.kind.value}) follows a fully connected layer; "
                    "fuzzy layers must come before the classifier head")
        if self.layers[-1].kind is not LayerKind.FL:
            raise ConfigurationError("the network must end with an fl layer")
        if self.layers[-1].dropout:
            raise ConfigurationError("the final fl layer emits logits and takes no dropout")
        if self.num_classes is not None and self.layers[-1].units != self.num_classes:
            raise ConfigurationError(
                f"final fl has {self.layers[-1].units} units but there are {self.num_classes} classes")

    def serialize(self) -> str:
        lines = []
        if self.input_shape is not None or self.num_classes is not None:
            if self.input_shape is None or self.num_classes is None:
                raise ConfigurationError("input shape and class count must be set together")
            c, h, w = self.input_shape
            lines.append(f"input channels={c} height={h} width={w} classes={self.num_classes}")
        for layer in self.layers:
            if layer.kind is LayerKind.FL:
                lines.append(f"fl units={layer.units} dropout={layer.dropout!r} "
                             f"activation={layer.activation}")
            else:
                lines.append(f"{layer.kind.value} rules={layer.rules} outputs={layer.outputs} "
                             f"kernel={layer.kernel} stride={layer.stride}")
        return "\n".join(lines) + "\n"


def _convert(kind, key, value, lineno):
    try:
        out = _KEYS[kind][key](value)
    except ValueError:
        raise ConfigurationError(f"line {lineno}: {key}={value!r} is not a valid value") from None
    return out


def parse_network_spec(text: str, input_shape=None, num_classes: Optional[int] = None) -> NetworkSpec:
    """Parse spec text; ``input_shape``/``num_classes`` fill in a missing ``input`` line."""
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *tokens = line.split()
        kind = kind.lower()
        if kind not in _KEYS:
            raise ConfigurationError(f"line {lineno}: unknown layer kind {kind!r}")
        values = {}
        for tok in tokens:
            key, sep, value = tok.partition("=")
            if not sep or not key or not value:
                raise ConfigurationError(f"line {lineno}: expected key=value, got {tok!r}")
            if key not in _KEYS[kind]:
                raise ConfigurationError(f"line {lineno}: unknown key {key!r} for {kind}")
            if key in values:
                raise ConfigurationError(f"line {lineno}: duplicate key {key!r}")
            values[key] = _convert(kind, key, value, lineno)
        missing = _REQUIRED[kind] - values.keys()
        if missing:
            raise ConfigurationError(f"line {lineno}: {kind} is missing {', '.join(sorted(missing))}")
        if kind == "input":
            if any(v < 1 for v in values.values()):
                raise ConfigurationError(f"line {lineno}: input dimensions must be >= 1")
            if layers:
                raise ConfigurationError(f"line {lineno}: the input line must precede all layers")
            input_shape = (values["channels"], values["height"], values["width"])
            num_classes = values["classes"]
            continue
        if kind == "fl":
            if values["units"] < 1:
                raise ConfigurationError(f"line {lineno}: units must be >= 1")
            if not 0.0 <= values.get("dropout", 0.0) < 1.0:
                raise ConfigurationError(f"line {lineno}: dropout must be in [0, 1)")
            if values.get("activation", "relu") not in ACTIVATIONS:
                raise ConfigurationError(f"line {lineno}: activation must be one of {ACTIVATIONS}")
            layers.append(LayerSpec(LayerKind.FL, **values))
            continue
        for key in ("rules", "outputs", "kernel", "stride"):
            if values.get(key, 1) < 1:
                raise ConfigurationError(f"line {lineno}: {key} must be >= 1")
        if kind == "fio" and values.get("stride", 1) != 1:
            raise ConfigurationError(f"line {lineno}: fio layers use stride 1; downsample with fpo")
        layers.append(LayerSpec(LayerKind(kind), **values))
    spec = NetworkSpec(layers, tuple(input_shape) if input_shape is not None else None, num_classes)
    spec.validate()
    return spec


def builtin_spec_text(name: str) -> str:
    """Text of a shipped spec: ``mnist``, ``cifar10``, ``cifar100`` or ``tiny``."""
    try:
        return resources.files("deepfuzzy.specs").joinpath(f"{name}.net").read_text()
    except FileNotFoundError:
        raise ConfigurationError(f"no built-in spec named {name!r}") from None


@dataclass
class DenseParams:
    weights: Tensor
    bias: Tensor
    dropout: float = 0.0
    activation: Optional[str] = "relu"


@dataclass
class Network:
    spec: NetworkSpec
    layers: list
    trace: List[Tuple[str, Tuple[int, ...]]] = field(default_factory=list)

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for i, layer in enumerate(self.layers):
            if isinstance(layer, FuzzyLayerParams):
                prefix = f"{i}.{layer.kind.value}"
                for name, t in layer.tensors().items():
                    out[f"{prefix}.{name}"] = t
            else:
                out[f"{i}.fl.weights"] = layer.weights
                out[f"{i}.fl.bias"] = layer.bias
        return out

    def forward(self, x, training: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = x if isinstance(x, Tensor) else Tensor(x)
        flat = False
        for layer in self.layers:
            if isinstance(layer, FuzzyLayerParams):
                h = fuzzy_forward(h, layer)
                continue
            if not flat:
                h = T.flatten(h)
                flat = True
            h = T.dense(h, layer.weights, layer.bias)
            if layer.activation == "relu":
                h = T.relu(h)
            elif layer.activation == "leaky_relu":
                h = T.leaky_relu(h, 0.01)
            h = T.dropout(h, layer.dropout, training, rng)
        return h

    __call__ = forward

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {k: v.data for k, v in self.parameters().items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for name, t in self.parameters().items():
            if arrays[name].shape != t.shape:
                raise ConfigurationError(f"{name}: shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def format_trace(self) -> str:
        return "\n".join(f"{label:<60} -> {'x'.join(map(str, dims))}" for label, dims in self.trace)


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    """Instantiate parameters for ``spec`` and record the per-layer output shape."""
    spec.validate()
    if spec.input_shape is None or spec.num_classes is None:
        raise ConfigurationError("network spec needs an input shape and class count to build")
    rng = np.random.default_rng(seed)
    c, h, w = spec.input_shape
    trace = [("input", (c, h, w))]
    layers = []
    flat_dim = None
    n_fl = sum(1 for l in spec.layers if l.kind is LayerKind.FL)
    fl_seen = 0
    for i, ls in enumerate(spec.layers, 1):
        if ls.kind is LayerKind.FL:
            if flat_dim is None:
                flat_dim = c * h * w
            fl_seen += 1
            last = fl_seen == n_fl
            bound = np.sqrt(6.0 / (flat_dim + ls.units))
            weights = Tensor(rng.uniform(-bound, bound, size=(flat_dim, ls.units)), requires_grad=True)
            bias = Tensor(np.zeros(ls.units), requires_grad=True)
            layers.append(DenseParams(weights, bias, 0.0 if last else ls.dropout,
                                      None if last else ls.activation))
            flat_dim = ls.units
            label = f"FL(units={ls.units}, logits)" if last else ls.describe()
            trace.append((f"{i:>2} {label}", (flat_dim,)))
            continue
        if ls.kernel > h or ls.kernel > w:
            raise ConfigurationError(
                f"layer {i} {ls.describe()}: fuzzy set {ls.kernel}x{ls.kernel} exceeds the "
                f"{h}x{w} input it receives")
        params = init_params(ls.rules, ls.outputs, c, ls.kernel, rng, stride=ls.stride, kind=ls.kind)
        h, w = params.output_hw(h, w)
        c = ls.outputs
        layers.append(params)
        trace.append((f"{i:>2} {ls.describe()}", (c, h, w)))
    return Network(spec, layers, trace)
