"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from .tensor import Tensor, backward


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return np.abs(analytic - numeric) / scale


@dataclass
class GradCheckReport:
    errors: Dict[str, np.ndarray] = field(default_factory=dict)
    coords: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max((float(e.max()) for e in self.errors.values() if e.size), default=0.0)

    def per_param(self) -> Dict[str, float]:
        return {k: float(e.max()) if e.size else 0.0 for k, e in self.errors.items()}

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error < tol


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor],
               perturbation: float = 1e-5, samples: Optional[int] = 50,
               rng: Optional[np.random.Generator] = None) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the graph from the current values of ``params``
    on every call. ``samples`` coordinates are drawn per parameter (all of
    them when the parameter is smaller, or when ``samples`` is None).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape))
                for name, p in params.items()}

    report = GradCheckReport()
    for name, p in params.items():
        flat = p.data.reshape(-1)
        if samples is None or samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = np.sort(rng.choice(flat.size, size=samples, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + perturbation
            up = loss_fn().item()
            flat[i] = orig - perturbation
            down = loss_fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2.0 * perturbation)
        report.errors[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
        report.coords[name] = idx
    return report
