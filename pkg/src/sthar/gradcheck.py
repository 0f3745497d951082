"""Central-difference gradient verification in 64-bit precision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, no_grad

DENOM_FLOOR = 1e-8


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to every entry of ``arr`` (mutated in place, restored)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_function(
    fn: Callable[..., Tensor],
    inputs: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> tuple[float, int, dict[str, float]]:
    """Compare reverse-mode gradients of scalar ``fn(**tensors)`` to central differences.

    Returns (max relative error, number of entries checked, per-input max error).
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    loss = fn(**leaves)
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(arrays[k])) for k, t in leaves.items()}

    work = {k: np.array(v) for k, v in arrays.items()}

    def evaluate() -> float:
        with no_grad():
            return float(fn(**{k: Tensor(v) for k, v in work.items()}).data)

    per_input: dict[str, float] = {}
    count = 0
    for name in work:
        numeric = numeric_gradient(evaluate, work[name], h)
        err = relative_error(analytic[name], numeric)
        per_input[name] = float(err.max()) if err.size else 0.0
        count += err.size
    return (max(per_input.values()) if per_input else 0.0), count, per_input


def check_params(loss_fn: Callable[[], Tensor], params, h: float = 1e-5) -> tuple[float, int, dict[str, float]]:
    """Like :func:`check_function` but over every tensor of a :class:`ParamStore`.

    ``loss_fn`` reads parameters from the store; values are perturbed in place
    through ``ParamStore.set``.
    """
    params.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: t.grad.copy() for name, t in params.items()}

    per_input: dict[str, float] = {}
    count = 0
    for name, t in params.items():
        base = np.array(t.data, dtype=np.float64)
        work = base.copy()

        def evaluate() -> float:
            params.set(name, work)
            with no_grad():
                return float(loss_fn().data)

        numeric = numeric_gradient(evaluate, work, h)
        params.set(name, base)
        err = relative_error(analytic[name], numeric)
        per_input[name] = float(err.max())
        count += err.size
    return max(per_input.values()), count, per_input
