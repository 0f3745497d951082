"""Named parameter collections and initialisers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import ContractError, DimensionError
from .tensor import Tensor


class ParamStore:
    """Map from dotted parameter path to a trainable :class:`Tensor`.

    Iteration is lexicographic by name so optimiser state, checkpoints and
    gradient reductions never depend on insertion order.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value, dtype=None) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        """Reset every gradient to an exact zero buffer."""
        for t in self._params.values():
            t.grad = np.zeros(t.shape, dtype=t.dtype)

    def grads(self) -> dict[str, np.ndarray]:
        return {
            name: (t.grad if t.grad is not None else np.zeros(t.shape, dtype=t.dtype))
            for name, t in self.items()
        }

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise ContractError(f"parameter names differ: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, t in self._params.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != model shape {t.shape}")
            arr = np.array(value, dtype=t.dtype)
            arr.flags.writeable = False
            t.data = arr
            t.grad = None

    def set(self, name: str, value) -> None:
        """Replace the value of ``name`` (same shape), keeping the Tensor object."""
        t = self._params[name]
        arr = np.array(value, dtype=t.dtype)
        if arr.shape != t.shape:
            raise DimensionError(f"{name}: new shape {arr.shape} != {t.shape}")
        arr.flags.writeable = False
        t.data = arr

    def astype(self, dtype) -> None:
        for t in self._params.values():
            arr = t.data.astype(dtype)
            arr.flags.writeable = False
            t.data = arr
            t.grad = None


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Uniform in ±1/sqrt(fan_in)."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def backward(loss: Tensor, store: ParamStore) -> set[str]:
    """Populate gradients of every parameter in ``store`` from scalar ``loss``.

    Parameters the loss does not reach get an exact zero gradient. Returns
    the names that were reached.
    """
    for _, t in store.items():
        t.grad = None
    loss.backward()
    reached = set()
    for name, t in store.items():
        if t.grad is None:
            t.grad = np.zeros(t.shape, dtype=t.dtype)
        else:
            reached.add(name)
    return reached
