"""Fuzzy inference (FIO) and fuzzy pooling (FPO) layers.

Both layers compute rule memberships as clipped correlations between image
patches and learnable patterns, normalize them across rules into firing
strengths, mix the firing maps into ``n`` gating maps with a 1x1
convolution, and multiply the gates with a consequent convolution of the
input. FIO keeps the spatial size (pad, mix, average back onto pixels);
FPO reduces it by evaluating patches at a stride.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .tensor import Tensor

LEAKY_SLOPE = 0.01
FIRING_EPS = 1e-8


class LayerKind(str, enum.Enum):
    FIO = "fio"
    FPO = "fpo"
    FL = "fl"


@dataclass
class FuzzyLayerParams:
    rule_filters: Tensor  # (K, C, s, s)
    mix_filters: Tensor  # (n, K, 1, 1)
    mix_bias: Tensor  # (n,)
    out_filters: Tensor  # (n, C, s, s)
    out_bias: Tensor  # (n,)
    kernel: int
    stride: int = 1
    kind: LayerKind = LayerKind.FIO

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        k, c, s1, s2 = self.rule_filters.shape
        n = self.out_filters.shape[0]
        if min(k, n, self.kernel, self.stride) < 1:
            raise ConfigurationError("rules, outputs, kernel and stride must all be >= 1")
        if (s1, s2) != (self.kernel, self.kernel):
            raise ConfigurationError(f"rule filters are {s1}x{s2}, kernel is {self.kernel}")
        if self.mix_filters.shape != (n, k, 1, 1) or self.mix_bias.shape != (n,):
            raise ConfigurationError(f"mix filters must be ({n}, {k}, 1, 1) with bias ({n},)")
        if self.out_filters.shape != (n, c, self.kernel, self.kernel) or self.out_bias.shape != (n,):
            raise ConfigurationError(f"out filters must be ({n}, {c}, {self.kernel}, {self.kernel})")
        if self.kind is LayerKind.FIO and self.stride != 1:
            raise ConfigurationError("FIO layers use stride 1; use an FPO layer to downsample")
        if self.kind is LayerKind.FL:
            raise ConfigurationError("FL is not a fuzzy layer kind")

    @property
    def n_rules(self) -> int:
        return self.rule_filters.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.out_filters.shape[0]

    @property
    def in_channels(self) -> int:
        return self.rule_filters.shape[1]

    def tensors(self) -> Dict[str, Tensor]:
        return {
            "rule_filters": self.rule_filters,
            "mix_filters": self.mix_filters,
            "mix_bias": self.mix_bias,
            "out_filters": self.out_filters,
            "out_bias": self.out_bias,
        }

    def output_hw(self, h: int, w: int):
        s, r = self.kernel, self.stride
        if s > h or s > w:
            raise ConfigurationError(f"fuzzy set {s}x{s} exceeds input {h}x{w}")
        if self.kind is LayerKind.FIO:
            return h, w
        return (h - s) // r + 1, (w - s) // r + 1


def init_params(n_rules: int, n_outputs: int, in_channels: int, kernel: int,
                rng: np.random.Generator, stride: int = 1,
                kind: LayerKind = LayerKind.FIO) -> FuzzyLayerParams:
    """Random parameters: non-negative rule patterns, Glorot-uniform mixing and consequents."""
    K, n, C, s = n_rules, n_outputs, in_channels, kernel
    if min(K, n, C, s) < 1:
        raise ConfigurationError("rules, outputs, channels and kernel must all be >= 1")
    rule = rng.uniform(0.0, 2.0 / (C * s * s), size=(K, C, s, s))
    b_mix = np.sqrt(6.0 / (K + n))
    mix = rng.uniform(-b_mix, b_mix, size=(n, K, 1, 1))
    b_out = np.sqrt(6.0 / (C * s * s + n * s * s))
    out = rng.uniform(-b_out, b_out, size=(n, C, s, s))
    return FuzzyLayerParams(
        rule_filters=Tensor(rule, requires_grad=True),
        mix_filters=Tensor(mix, requires_grad=True),
        mix_bias=Tensor(np.zeros(n), requires_grad=True),
        out_filters=Tensor(out, requires_grad=True),
        out_bias=Tensor(np.zeros(n), requires_grad=True),
        kernel=s, stride=stride, kind=kind,
    )


def canonical_rule_order(params: FuzzyLayerParams) -> np.ndarray:
    """Order rules by their parameters so any permutation of rules gives the same order.

    Rules form an unordered set; evaluating them in a canonical order makes the
    layer output bitwise invariant to how the rules happen to be stored.
    """
    K = params.n_rules
    keys = np.concatenate(
        [params.rule_filters.data.reshape(K, -1), params.mix_filters.data.reshape(-1, K).T], axis=1
    )
    return np.lexsort(keys.T[::-1])


def _canonical(params: FuzzyLayerParams):
    order = canonical_rule_order(params)
    if np.array_equal(order, np.arange(order.size)):
        return params.rule_filters, params.mix_filters
    return T.take(params.rule_filters, order, axis=0), T.take(params.mix_filters, order, axis=1)


def membership_matrix(x: Tensor, params: FuzzyLayerParams, rule_filters: Tensor = None) -> Tensor:
    rule_filters = params.rule_filters if rule_filters is None else rule_filters
    s = params.kernel
    if s > x.shape[2] or s > x.shape[3]:
        raise ConfigurationError(f"fuzzy set {s}x{s} exceeds input {x.shape[2]}x{x.shape[3]}")
    return T.clamp01(T.conv2d(x, rule_filters, stride=params.stride))


def firing_strength(memberships: Tensor) -> Tensor:
    return T.normalize_rules(memberships, FIRING_EPS)


def g_map(firing: Tensor, params: FuzzyLayerParams, kind: LayerKind = None,
          mix_filters: Tensor = None) -> Tensor:
    kind = params.kind if kind is None else LayerKind(kind)
    mix_filters = params.mix_filters if mix_filters is None else mix_filters
    if kind is LayerKind.FIO:
        if params.stride != 1:
            raise ConfigurationError("FIO gating requires stride 1")
        s = params.kernel
        padded = T.pad2d(firing, s - 1)
        mixed = T.leaky_relu(T.conv2d(padded, mix_filters, bias=params.mix_bias), LEAKY_SLOPE)
        return T.avg_pool2d(mixed, s, 1)
    if kind is LayerKind.FPO:
        return T.leaky_relu(T.conv2d(firing, mix_filters, bias=params.mix_bias), LEAKY_SLOPE)
    raise ConfigurationError(f"g_map is undefined for layer kind {kind}")


def same_padding(kernel: int):
    """(top, bottom, left, right) padding that keeps stride-1 output size equal to input size."""
    lead = (kernel - 1) // 2
    trail = kernel - 1 - lead
    return lead, trail, lead, trail


def f_map(x: Tensor, params: FuzzyLayerParams, kind: LayerKind = None) -> Tensor:
    kind = params.kind if kind is None else LayerKind(kind)
    if kind is LayerKind.FIO:
        out = T.conv2d(x, params.out_filters, 1, same_padding(params.kernel), params.out_bias)
    elif kind is LayerKind.FPO:
        out = T.conv2d(x, params.out_filters, params.stride, 0, params.out_bias)
    else:
        raise ConfigurationError(f"f_map is undefined for layer kind {kind}")
    return T.leaky_relu(out, LEAKY_SLOPE)


def _forward(x: Tensor, params: FuzzyLayerParams, kind: LayerKind) -> Tensor:
    if x.ndim != 4 or x.shape[1] != params.in_channels:
        raise ConfigurationError(
            f"expected input (N, {params.in_channels}, H, W), got {x.shape}")
    rules, mix = _canonical(params)
    firing = firing_strength(membership_matrix(x, params, rules))
    return T.mul(g_map(firing, params, kind, mix), f_map(x, params, kind))


def fio_forward(x: Tensor, params: FuzzyLayerParams) -> Tensor:
    if params.stride != 1:
        raise ConfigurationError("fio_forward requires stride 1")
    return _forward(x, params, LayerKind.FIO)


def fpo_forward(x: Tensor, params: FuzzyLayerParams) -> Tensor:
    return _forward(x, params, LayerKind.FPO)


def fuzzy_forward(x: Tensor, params: FuzzyLayerParams) -> Tensor:
    if params.kind is LayerKind.FIO:
        return fio_forward(x, params)
    return fpo_forward(x, params)
