"""Vanilla RNN, LSTM and GRU cells plus a many-to-one sequence runner.

Vectors may carry leading batch dimensions: ``h_prev`` is (..., n_h) and
``x`` is (..., n_x). Weight layout follows the usual column-vector algebra,
W: n_h×n_h acting on the hidden state and U: n_h×n_x acting on the input,
so a row-batched product is written ``h @ W.T``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ContractError, DimensionError
from .params import ParamStore, uniform_fan_in
from .tensor import Tensor, as_tensor, matmul, sigmoid, tanh


@dataclass
class GateParams:
    """One affine map ``W·h + U·x + b``."""

    W: Tensor
    U: Tensor
    b: Tensor

    @property
    def n_h(self) -> int:
        return self.W.shape[0]

    @property
    def n_x(self) -> int:
        return self.U.shape[1]

    def validate(self) -> None:
        n_h, n_x = self.n_h, self.n_x
        if self.W.shape != (n_h, n_h) or self.U.shape != (n_h, n_x) or self.b.shape != (n_h,):
            raise DimensionError(
                f"inconsistent gate shapes W {self.W.shape}, U {self.U.shape}, b {self.b.shape}"
            )

    def preact(self, h_prev: Tensor, x: Tensor) -> Tensor:
        return matmul(h_prev, self.W.T) + matmul(x, self.U.T) + self.b

    @classmethod
    def init(cls, store: ParamStore | None, prefix: str, n_x: int, n_h: int, rng, dtype, bias: float = 0.0):
        # W/U uniform in ±1/sqrt(fan_in) with fan_in the width of the matrix
        W = uniform_fan_in(rng, (n_h, n_h), n_h, dtype)
        U = uniform_fan_in(rng, (n_h, n_x), n_x, dtype)
        b = np.full((n_h,), bias, dtype=dtype)
        if store is None:
            return cls(Tensor(W, requires_grad=True), Tensor(U, requires_grad=True), Tensor(b, requires_grad=True))
        return cls(store.add(f"{prefix}.W", W), store.add(f"{prefix}.U", U), store.add(f"{prefix}.b", b))


# The vanilla cell is a single gate.
RnnCellParams = GateParams


@dataclass
class LstmParams:
    f: GateParams
    i: GateParams
    c: GateParams  # candidate c~
    o: GateParams

    GATES = ("f", "i", "c", "o")

    @property
    def n_h(self) -> int:
        return self.f.n_h

    @property
    def n_x(self) -> int:
        return self.f.n_x

    def validate(self) -> None:
        for g in self.GATES:
            getattr(self, g).validate()
        shapes = {(getattr(self, g).n_h, getattr(self, g).n_x) for g in self.GATES}
        if len(shapes) != 1:
            raise DimensionError(f"LSTM gate shapes disagree: {sorted(shapes)}")

    @classmethod
    def init(cls, store: ParamStore | None, prefix: str, n_x: int, n_h: int, rng, dtype, forget_bias: float = 1.0):
        return cls(
            f=GateParams.init(store, f"{prefix}.f", n_x, n_h, rng, dtype, bias=forget_bias),
            i=GateParams.init(store, f"{prefix}.i", n_x, n_h, rng, dtype),
            c=GateParams.init(store, f"{prefix}.c", n_x, n_h, rng, dtype),
            o=GateParams.init(store, f"{prefix}.o", n_x, n_h, rng, dtype),
        )


@dataclass
class GruParams:
    z: GateParams
    r: GateParams
    h: GateParams  # candidate h~

    GATES = ("z", "r", "h")

    @property
    def n_h(self) -> int:
        return self.z.n_h

    @property
    def n_x(self) -> int:
        return self.z.n_x

    def validate(self) -> None:
        for g in self.GATES:
            getattr(self, g).validate()
        shapes = {(getattr(self, g).n_h, getattr(self, g).n_x) for g in self.GATES}
        if len(shapes) != 1:
            raise DimensionError(f"GRU gate shapes disagree: {sorted(shapes)}")

    @classmethod
    def init(cls, store: ParamStore | None, prefix: str, n_x: int, n_h: int, rng, dtype):
        return cls(
            z=GateParams.init(store, f"{prefix}.z", n_x, n_h, rng, dtype),
            r=GateParams.init(store, f"{prefix}.r", n_x, n_h, rng, dtype),
            h=GateParams.init(store, f"{prefix}.h", n_x, n_h, rng, dtype),
        )


class LstmTrace(NamedTuple):
    f: Tensor
    i: Tensor
    c_tilde: Tensor
    c: Tensor
    o: Tensor
    h: Tensor


class GruTrace(NamedTuple):
    z: Tensor
    r: Tensor
    h_tilde: Tensor
    h: Tensor


def _check(h_prev: Tensor, x: Tensor, n_h: int, n_x: int, c_prev: Tensor | None = None) -> None:
    if h_prev.shape[-1] != n_h:
        raise DimensionError(f"hidden state has extent {h_prev.shape[-1]}, cell expects n_h={n_h}")
    if x.shape[-1] != n_x:
        raise DimensionError(f"input has extent {x.shape[-1]}, cell expects n_x={n_x}")
    if c_prev is not None and c_prev.shape != h_prev.shape:
        raise DimensionError(f"cell state {c_prev.shape} does not match hidden state {h_prev.shape}")


def vanilla_step(p: RnnCellParams, h_prev, x) -> Tensor:
    """h = tanh(W h_prev + U x + b)."""
    h_prev, x = as_tensor(h_prev, p.W), as_tensor(x, p.W)
    _check(h_prev, x, p.n_h, p.n_x)
    return tanh(p.preact(h_prev, x))


def lstm_trace(p: LstmParams, h_prev, c_prev, x) -> LstmTrace:
    """One LSTM step, returning every gate activation."""
    h_prev, c_prev, x = (as_tensor(v, p.f.W) for v in (h_prev, c_prev, x))
    _check(h_prev, x, p.n_h, p.n_x, c_prev)
    f = sigmoid(p.f.preact(h_prev, x))
    i = sigmoid(p.i.preact(h_prev, x))
    c_tilde = tanh(p.c.preact(h_prev, x))
    c = f * c_prev + i * c_tilde
    o = sigmoid(p.o.preact(h_prev, x))
    h = tanh(c) * o
    return LstmTrace(f, i, c_tilde, c, o, h)


def lstm_step(p: LstmParams, h_prev, c_prev, x) -> tuple[Tensor, Tensor]:
    t = lstm_trace(p, h_prev, c_prev, x)
    return t.h, t.c


def gru_trace(p: GruParams, h_prev, x) -> GruTrace:
    h_prev, x = as_tensor(h_prev, p.z.W), as_tensor(x, p.z.W)
    _check(h_prev, x, p.n_h, p.n_x)
    z = sigmoid(p.z.preact(h_prev, x))
    r = sigmoid(p.r.preact(h_prev, x))
    h_tilde = tanh(matmul(r * h_prev, p.h.W.T) + matmul(x, p.h.U.T) + p.h.b)
    # z weights the candidate, (1 - z) the previous state
    h = z * h_tilde + (1.0 - z) * h_prev
    return GruTrace(z, r, h_tilde, h)


def gru_step(p: GruParams, h_prev, x) -> Tensor:
    return gru_trace(p, h_prev, x).h


def _steps(xs, like: Tensor) -> list[Tensor]:
    if isinstance(xs, Tensor):
        if xs.ndim < 2:
            raise DimensionError(f"sequence tensor needs a time axis, got shape {xs.shape}")
        return [xs[..., t, :] for t in range(xs.shape[-2])]
    return [as_tensor(x, like) for x in xs]


def run_many_to_one(kind: str, params, xs: Sequence | Tensor, h0=None, c0=None) -> Tensor:
    """Feed ``xs`` through the cell in order and return the final hidden state.

    ``xs`` is a sequence of (…, n_x) inputs or a tensor whose second-to-last
    axis is time. Initial states default to zeros.
    """
    gate0 = params if isinstance(params, GateParams) else getattr(params, params.GATES[0])
    steps = _steps(xs, gate0.W)
    if not steps:
        raise ContractError("run_many_to_one needs a non-empty sequence")
    first = steps[0]
    dtype = first.dtype
    lead = first.shape[:-1]
    n_h = params.n_h
    h = as_tensor(h0, gate0.W) if h0 is not None else Tensor(np.zeros(lead + (n_h,), dtype=dtype))
    if kind == "rnn":
        for x in steps:
            h = vanilla_step(params, h, x)
        return h
    if kind == "lstm":
        c = as_tensor(c0, gate0.W) if c0 is not None else Tensor(np.zeros(lead + (n_h,), dtype=dtype))
        for x in steps:
            h, c = lstm_step(params, h, c, x)
        return h
    if kind == "gru":
        for x in steps:
            h = gru_step(params, h, x)
        return h
    raise ContractError(f"unknown cell kind {kind!r}; expected rnn, lstm or gru")
