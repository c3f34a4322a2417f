"""Central finite-difference oracle for the hand-derived gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from deers.qnetwork import NetworkParameters


def numerical_gradient(
    loss_fn: Callable[[NetworkParameters], float], params: NetworkParameters, step: float = 1e-5
) -> NetworkParameters:
    """Perturb one coordinate at a time: ``(L(t + h) - L(t - h)) / 2h``."""
    out = params.zeros_like()
    probe = params.copy()
    for name, arr in probe.items():
        flat = arr.reshape(-1)
        g = out.arrays[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(probe)
            flat[i] = orig - step
            down = loss_fn(probe)
            flat[i] = orig
            g[i] = (up - down) / (2.0 * step)
    return out


@dataclass
class GradientComparison:
    max_relative_error: float
    max_absolute_error_small: float
    worst_name: str
    n_coordinates: int
    passed: bool


def compare_gradients(
    analytic: NetworkParameters,
    numeric: NetworkParameters,
    rel_tol: float = 1e-4,
    small: float = 1e-8,
) -> GradientComparison:
    """Relative error per coordinate; coordinates below ``small`` compared absolutely."""
    worst, worst_name, worst_abs, n = 0.0, "", 0.0, 0
    ok = True
    for name, a in analytic.items():
        b = numeric.arrays[name]
        scale = np.maximum(np.abs(a), np.abs(b))
        diff = np.abs(a - b)
        tiny = scale < small
        if np.any(tiny):
            worst_abs = max(worst_abs, float(diff[tiny].max()))
            ok &= bool(np.all(diff[tiny] <= small))
        if np.any(~tiny):
            rel = diff[~tiny] / scale[~tiny]
            if rel.max() > worst:
                worst, worst_name = float(rel.max()), name
            ok &= bool(np.all(rel <= rel_tol))
        n += a.size
    return GradientComparison(worst, worst_abs, worst_name, n, ok)
