"""Loop-based evaluators of TSK rule systems and the fuzzy layers.

These are deliberately slow: plain Python loops over nested lists, no conv,
padding or pooling helpers from the rest of the package. They exist to
cross-check the vectorized layers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, DegenerateInputError

_EPS = 1e-8
_SLOPE = 0.01


@dataclass
class TskRuleSet:
    """K rules with Gaussian antecedents and affine consequents.

    ``centers``/``widths`` are (K, d); ``coef`` is (K, d) and ``intercept`` (K,),
    so rule k outputs ``coef[k] . x + intercept[k]``.
    """

    centers: np.ndarray
    widths: np.ndarray
    coef: np.ndarray
    intercept: np.ndarray

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.widths = np.atleast_2d(np.asarray(self.widths, dtype=float))
        self.coef = np.atleast_2d(np.asarray(self.coef, dtype=float))
        self.intercept = np.atleast_1d(np.asarray(self.intercept, dtype=float))
        K, d = self.centers.shape
        if self.widths.shape != (K, d) or self.coef.shape != (K, d) or self.intercept.shape != (K,):
            raise ConfigurationError("inconsistent rule-set shapes")
        if np.any(self.widths <= 0):
            raise ConfigurationError("Gaussian widths must be strictly positive")

    @property
    def n_rules(self) -> int:
        return self.centers.shape[0]

    def membership(self, k: int, i: int, xi: float) -> float:
        z = (xi - self.centers[k, i]) / self.widths[k, i]
        return math.exp(-0.5 * z * z)

    def firing(self, x: Sequence[float]) -> List[float]:
        """Product t-norm of per-dimension memberships, one value per rule."""
        out = []
        for k in range(self.n_rules):
            p = 1.0
            for i, xi in enumerate(x):
                p *= self.membership(k, i, xi)
            out.append(p)
        return out

    def consequents(self, x: Sequence[float]) -> List[float]:
        return [float(sum(c * xi for c, xi in zip(self.coef[k], x)) + self.intercept[k])
                for k in range(self.n_rules)]


def tsk_combine(firing: Sequence[float], outputs: Sequence[float]) -> float:
    total = math.fsum(firing)
    if total == 0.0:
        raise DegenerateInputError("all rules have zero firing strength")
    return math.fsum(p * f for p, f in zip(firing, outputs)) / total


def tsk_eval(rules: TskRuleSet, x) -> float:
    """Firing-strength weighted average of rule outputs (no epsilon)."""
    x = [float(v) for v in np.asarray(x, dtype=float).ravel()]
    if len(x) != rules.centers.shape[1]:
        raise ConfigurationError(f"input has {len(x)} dims, rules expect {rules.centers.shape[1]}")
    return tsk_combine(rules.firing(x), rules.consequents(x))


@dataclass
class NaiveFuzzyLayerSpec:
    """Plain nested-list copy of a fuzzy layer's parameters."""

    rule_filters: list  # [K][C][s][s]
    mix_filters: list  # [n][K]
    mix_bias: list  # [n]
    out_filters: list  # [n][C][s][s]
    out_bias: list  # [n]
    kernel: int
    stride: int = 1

    @classmethod
    def from_params(cls, params) -> "NaiveFuzzyLayerSpec":
        n, K = params.mix_filters.shape[:2]
        return cls(
            rule_filters=params.rule_filters.data.tolist(),
            mix_filters=params.mix_filters.data.reshape(n, K).tolist(),
            mix_bias=params.mix_bias.data.tolist(),
            out_filters=params.out_filters.data.tolist(),
            out_bias=params.out_bias.data.tolist(),
            kernel=params.kernel,
            stride=params.stride,
        )

    def subregions(self, h: int, w: int) -> List[Tuple[int, int]]:
        """Top-left corners of every patch visited at this layer's stride."""
        s, r = self.kernel, self.stride
        if s > h or s > w:
            raise ConfigurationError(f"fuzzy set {s}x{s} exceeds input {h}x{w}")
        return [(i, j) for i in range(0, h - s + 1, r) for j in range(0, w - s + 1, r)]


def _leaky(v: float) -> float:
    return v if v >= 0.0 else _SLOPE * v


def _patch_dot(img, filt, top, left, s):
    """Dot product of one image patch with one filter; out-of-range pixels read 0."""
    total = 0.0
    C = len(img)
    h, w = len(img[0]), len(img[0][0])
    for c in range(C):
        for a in range(s):
            y = top + a
            if y < 0 or y >= h:
                continue
            for b in range(s):
                x = left + b
                if 0 <= x < w:
                    total += img[c][y][x] * filt[c][a][b]
    return total


def _firing_at(img, spec, top, left):
    """Clipped memberships of one patch against every rule, normalized across rules."""
    s = spec.kernel
    memb = []
    for filt in spec.rule_filters:
        p = _patch_dot(img, filt, top, left, s)
        memb.append(min(max(p, 0.0), 1.0))
    total = sum(memb) + _EPS
    return [m / total for m in memb]


def _mix(spec, firing_values, i):
    return _leaky(spec.mix_bias[i] + sum(wk * f for wk, f in zip(spec.mix_filters[i], firing_values)))


def _to_lists(image):
    arr = np.asarray(image, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ConfigurationError(f"reference evaluators take one (C, H, W) image, got {arr.shape}")
    return arr.tolist()


def fio_reference(image, spec: NaiveFuzzyLayerSpec) -> np.ndarray:
    """Fuzzy inference output (n, H, W) for one image, computed pixel by pixel."""
    img = _to_lists(image)
    C, H, W = len(img), len(img[0]), len(img[0][0])
    s = spec.kernel
    if spec.stride != 1:
        raise ConfigurationError("fuzzy inference uses stride 1")
    n = len(spec.out_filters)
    K = len(spec.rule_filters)
    regions = spec.subregions(H, W)
    mh, mw = H - s + 1, W - s + 1
    assert len(regions) == mh * mw

    firing = {}
    for (top, left) in regions:
        firing[(top, left)] = _firing_at(img, spec, top, left)
    zero = [0.0] * K
    pad = s - 1
    lead = (s - 1) // 2

    out = np.zeros((n, H, W))
    for i in range(n):
        # mixed gate on the zero-padded firing map, padded coordinates (py, px)
        mixed = {}
        for py in range(mh + 2 * pad):
            for px in range(mw + 2 * pad):
                f = firing.get((py - pad, px - pad), zero)
                mixed[(py, px)] = _mix(spec, f, i)
        for y in range(H):
            for x in range(W):
                acc = 0.0
                for a in range(s):
                    for b in range(s):
                        acc += mixed[(y + a, x + b)]
                gate = acc / (s * s)
                cons = _leaky(spec.out_bias[i] + _patch_dot(img, spec.out_filters[i], y - lead, x - lead, s))
                out[i, y, x] = gate * cons
    return out


def fpo_reference(image, spec: NaiveFuzzyLayerSpec) -> np.ndarray:
    """Fuzzy pooling output (n, h', w') for one image, one subregion at a time."""
    img = _to_lists(image)
    H, W = len(img[0]), len(img[0][0])
    s, r = spec.kernel, spec.stride
    n = len(spec.out_filters)
    oh, ow = (H - s) // r + 1, (W - s) // r + 1
    out = np.zeros((n, oh, ow))
    for (top, left) in spec.subregions(H, W):
        f = _firing_at(img, spec, top, left)
        for i in range(n):
            gate = _mix(spec, f, i)
            cons = _leaky(spec.out_bias[i] + _patch_dot(img, spec.out_filters[i], top, left, s))
            out[i, top // r, left // r] = gate * cons
    return out
