"""Randomized fused-vs-reference trials and network gradient checks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, grad_check
from .layers import LayerKind, fio_forward, fpo_forward, init_params
from .network import Network
from .reference import NaiveFuzzyLayerSpec, fio_reference, fpo_reference
from .tensor import Tensor


@dataclass
class OracleTrial:
    kind: str
    shape: tuple
    rules: int
    outputs: int
    kernel: int
    stride: int
    max_abs_diff: float


def random_layer_instance(kind: LayerKind, rng: np.random.Generator, max_hw: int = 8,
                          max_channels: int = 2, max_rules: int = 4, max_outputs: int = 4):
    """Random small layer + single input image with non-trivial biases."""
    kind = LayerKind(kind)
    C = int(rng.integers(1, max_channels + 1))
    K = int(rng.integers(1, max_rules + 1))
    n = int(rng.integers(1, max_outputs + 1))
    H = int(rng.integers(2, max_hw + 1))
    W = int(rng.integers(2, max_hw + 1))
    s = int(rng.integers(1, min(3, H, W) + 1))
    r = 1 if kind is LayerKind.FIO else int(rng.integers(1, 4))
    params = init_params(K, n, C, s, rng, stride=r, kind=kind)
    params.mix_bias.data = rng.normal(0.0, 0.3, size=n)
    params.out_bias.data = rng.normal(0.0, 0.3, size=n)
    x = rng.uniform(0.0, 1.0, size=(1, C, H, W))
    return params, x


def oracle_check(trials: int = 100, seed: int = 0) -> List[OracleTrial]:
    """Run ``trials`` FIO and ``trials`` FPO instances against the loop-based reference."""
    rng = np.random.default_rng(seed)
    results = []
    for kind, fused, naive in ((LayerKind.FIO, fio_forward, fio_reference),
                               (LayerKind.FPO, fpo_forward, fpo_reference)):
        for _ in range(trials):
            params, x = random_layer_instance(kind, rng)
            with T.no_grad():
                got = fused(Tensor(x), params).data[0]
            want = naive(x[0], NaiveFuzzyLayerSpec.from_params(params))
            diff = float(np.max(np.abs(got - want))) if got.shape == want.shape else float("inf")
            results.append(OracleTrial(kind.value, x.shape[1:], params.n_rules, params.n_outputs,
                                       params.kernel, params.stride, diff))
    return results


def network_gradcheck(network: Network, batch: int = 2, seed: int = 0, samples: int = 50,
                      perturbation: float = 1e-5, loss: str = "readout") -> GradCheckReport:
    """Finite-difference check of every parameter group on a random batch.

    Biases are redrawn as small positive values first, moving the check away
    from the Leaky-ReLU kink a zero-bias network sits on. ``loss="readout"``
    differentiates a fixed random linear functional of the logits; its small
    magnitude keeps central-difference rounding noise (about ulp(loss)/2h)
    below the tiny gradients of weights fed by near-zero activations.
    ``loss="cross_entropy"`` uses the training loss instead.
    """
    rng = np.random.default_rng(seed)
    for name, p in network.parameters().items():
        if name.endswith("bias"):
            p.data = rng.uniform(0.05, 0.3, size=p.shape)
    c, h, w = network.spec.input_shape
    x = rng.uniform(0.0, 1.0, size=(batch, c, h, w))
    if loss == "readout":
        weights = Tensor(rng.normal(size=(batch, network.spec.num_classes)))

        def loss_fn():
            return T.tsum(T.mul(network.forward(x, training=False), weights))
    elif loss == "cross_entropy":
        y = rng.integers(0, network.spec.num_classes, size=batch)

        def loss_fn():
            return T.softmax_cross_entropy(network.forward(x, training=False), y)
    else:
        raise ValueError(f"unknown gradcheck loss {loss!r}")
    return grad_check(loss_fn, network.parameters(), perturbation=perturbation, samples=samples,
                      rng=rng)
