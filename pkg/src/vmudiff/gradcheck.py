"""Central finite-difference verification of the handwritten backward passes.

A check builds a small instance in 64-bit mode, projects its output on a
fixed random direction ``R`` (loss ``sum(out * R)``), and compares analytic
gradients with central differences on a sample of input and parameter
coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn import ParamStore


@dataclass
class GradResult:
    name: str
    rel_error: float
    tol: float
    worst: str = ""
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_error) and self.rel_error < self.tol)


def rel_error(a, b) -> float:
    a = np.ravel(a)
    b = np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def _sample(size, k, rng):
    if size <= k:
        return np.arange(size)
    return np.sort(rng.choice(size, size=k, replace=False))


def check_gradients(
    name: str,
    forward: Callable[[dict], np.ndarray],
    backward: Callable[[np.ndarray], dict],
    inputs: dict,
    store: ParamStore | None = None,
    h: float = 1e-3,
    tol: float = 1e-4,
    max_coords: int = 24,
    seed: int = 0,
    skip_params: tuple[str, ...] = (),
) -> GradResult:
    """Compare analytic and numeric gradients for every input and parameter.

    ``backward`` receives ``dL/dout`` and returns a dict of input gradients
    keyed like ``inputs``; parameter gradients are read from ``store``.
    """
    rng = np.random.default_rng(seed)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    if store is not None:
        store.to(np.float64)
        store.zero_grad()
    out = forward(inputs)
    R = rng.normal(size=out.shape)
    analytic_in = backward(R)

    def loss():
        return float(np.sum(forward(inputs) * R))

    targets = []
    for key, arr in inputs.items():
        if key in analytic_in:
            targets.append((f"input:{key}", arr, np.asarray(analytic_in[key])))
    if store is not None:
        for pname in store:
            if any(pname.startswith(s) for s in skip_params):
                continue
            targets.append((pname, store.value(pname), store.grad(pname).copy()))

    worst_err, worst_name, details = 0.0, "", {}
    for label, arr, grad in targets:
        idx = _sample(arr.size, max_coords, rng)
        flat = arr.reshape(-1)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss()
            flat[i] = orig - h
            lm = loss()
            flat[i] = orig
            num[j] = (lp - lm) / (2 * h)
        err = rel_error(grad.reshape(-1)[idx], num)
        details[label] = err
        if err > worst_err or not np.isfinite(err):
            worst_err, worst_name = err, label
    return GradResult(name, worst_err, tol, worst_name, details)
