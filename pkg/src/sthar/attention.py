"""Self-attention, multi-head attention and the Transformer encoder block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigError, ContractError, DimensionError
from .params import ParamStore, xavier_uniform
from .tensor import (
    Tensor,
    concat,
    elu,
    layer_norm,
    linear,
    matmul,
    reshape,
    softmax,
    swapaxes,
    transpose,
)


def scaled_dot_attention(Q: Tensor, K: Tensor, V: Tensor) -> tuple[Tensor, Tensor]:
    """softmax(Q Kᵀ / sqrt(d_k)) V.

    Q: (…, n_q, d_k), K: (…, n_k, d_k), V: (…, n_k, d_v).
    Returns (output (…, n_q, d_v), weights (…, n_q, n_k)).
    """
    d_k = Q.shape[-1]
    if d_k == 0:
        raise ContractError("scaled_dot_attention: key dimension d_k is 0")
    if K.shape[-1] != d_k:
        raise DimensionError(f"query/key widths differ: Q {Q.shape}, K {K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"key/value counts differ: K {K.shape}, V {V.shape}")
    scores = matmul(Q, swapaxes(K, -1, -2)) * (1.0 / np.sqrt(d_k))
    weights = softmax(scores, axis=-1)
    return matmul(weights, V), weights


@dataclass
class MhaParams:
    """Per-head projections stacked on a leading head axis.

    ``W_q[i]`` is the head-i query projection (d_model×d_k); likewise
    ``W_k`` and ``W_v``. ``W_o`` maps the head-ordered concatenation
    (H·d_v) back to d_model.
    """

    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor

    @property
    def heads(self) -> int:
        return self.W_q.shape[0]

    @property
    def d_model(self) -> int:
        return self.W_q.shape[1]

    @classmethod
    def init(cls, store: ParamStore | None, prefix: str, d_model: int, heads: int, rng, dtype) -> "MhaParams":
        if heads < 1 or d_model % heads:
            raise ConfigError(f"head count {heads} must divide d_model {d_model}")
        d_k = d_model // heads
        arrays = {
            "W_q": xavier_uniform(rng, (heads, d_model, d_k), d_model, d_k, dtype),
            "W_k": xavier_uniform(rng, (heads, d_model, d_k), d_model, d_k, dtype),
            "W_v": xavier_uniform(rng, (heads, d_model, d_k), d_model, d_k, dtype),
            "W_o": xavier_uniform(rng, (heads * d_k, d_model), heads * d_k, d_model, dtype),
        }
        if store is None:
            return cls(**{k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
        return cls(**{k: store.add(f"{prefix}.{k}", v) for k, v in arrays.items()})


def project_heads(X: Tensor, W: Tensor) -> Tensor:
    """(…, n, d_model) × (H, d_model, d) → (…, H, n, d)."""
    lead = X.shape[:-2]
    Xh = reshape(X, lead + (1,) + X.shape[-2:])
    return matmul(Xh, W)


def merge_heads(heads_out: Tensor) -> Tensor:
    """(…, H, n, d) → (…, n, H·d), concatenated in head order."""
    nd = heads_out.ndim
    moved = transpose(heads_out, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    lead = moved.shape[:-2]
    return reshape(moved, lead + (moved.shape[-2] * moved.shape[-1],))


def multi_head(X: Tensor, p: MhaParams, return_weights: bool = False):
    """Multi-head self-attention of X (…, n, d_model)."""
    if X.shape[-1] != p.d_model:
        raise DimensionError(f"multi_head: input width {X.shape[-1]} != d_model {p.d_model}")
    Q = project_heads(X, p.W_q)
    K = project_heads(X, p.W_k)
    V = project_heads(X, p.W_v)
    out, weights = scaled_dot_attention(Q, K, V)
    y = matmul(merge_heads(out), p.W_o)
    return (y, weights) if return_weights else y


@dataclass
class EncoderBlockParams:
    mha: MhaParams
    ff1_W: Tensor
    ff1_b: Tensor
    ff2_W: Tensor
    ff2_b: Tensor
    norm1_gain: Tensor
    norm1_offset: Tensor
    norm2_gain: Tensor
    norm2_offset: Tensor

    @property
    def d_model(self) -> int:
        return self.mha.d_model

    @classmethod
    def init(cls, store: ParamStore | None, prefix: str, d_model: int, heads: int, d_ff: int, rng, dtype):
        if d_ff < d_model:
            raise ConfigError(f"d_ff ({d_ff}) must be >= d_model ({d_model})")
        mha = MhaParams.init(store, f"{prefix}.mha", d_model, heads, rng, dtype)
        arrays = {
            "ff1_W": xavier_uniform(rng, (d_model, d_ff), d_model, d_ff, dtype),
            "ff1_b": np.zeros(d_ff, dtype),
            "ff2_W": xavier_uniform(rng, (d_ff, d_model), d_ff, d_model, dtype),
            "ff2_b": np.zeros(d_model, dtype),
            "norm1_gain": np.ones(d_model, dtype),
            "norm1_offset": np.zeros(d_model, dtype),
            "norm2_gain": np.ones(d_model, dtype),
            "norm2_offset": np.zeros(d_model, dtype),
        }
        if store is None:
            return cls(mha=mha, **{k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
        return cls(mha=mha, **{k: store.add(f"{prefix}.{k}", v) for k, v in arrays.items()})


NORM_EPS = 1e-5


def encoder_block(X: Tensor, p: EncoderBlockParams) -> Tensor:
    """Pre-norm residual block: X + MHA(norm(X)), then + FFN(norm(·)) with ELU."""
    if X.shape[-1] != p.d_model:
        raise DimensionError(f"encoder_block: input width {X.shape[-1]} != d_model {p.d_model}")
    h = X + multi_head(layer_norm(X, p.norm1_gain, p.norm1_offset, NORM_EPS), p.mha)
    inner = elu(linear(layer_norm(h, p.norm2_gain, p.norm2_offset, NORM_EPS), p.ff1_W, p.ff1_b))
    return h + linear(inner, p.ff2_W, p.ff2_b)


def sinusoidal_table(max_len: int, d_model: int, dtype=np.float64) -> np.ndarray:
    """Row ``pos`` holds sin/cos pairs: [2i] = sin(pos/10000^(2i/d)), [2i+1] = cos(…)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table.astype(dtype)


class PositionalTable:
    """Fixed (non-learned) sinusoidal position encodings.

    Holds positions 0..max_len: position 0 belongs to the CLS token, so a
    sequence of up to ``max_len`` tokens fits.
    """

    def __init__(self, max_len: int, d_model: int, dtype=np.float64):
        self.max_len = max_len
        self.d_model = d_model
        self.table = Tensor(sinusoidal_table(max_len + 1, d_model, dtype))

    def rows(self, n: int) -> Tensor:
        """Encodings for positions 0..n-1."""
        if n > self.max_len + 1:
            raise CapacityError(f"{n} positions exceed table capacity {self.max_len + 1}")
        return self.table[:n]


def add_positions_and_cls(seq: Tensor, table: PositionalTable | None, cls: Tensor) -> Tensor:
    """Prepend the CLS vector to (…, N, d) and add position encodings 0..N.

    With ``table=None`` no encodings are added (used to probe permutation
    equivariance).
    """
    if cls.shape != seq.shape[-1:]:
        raise DimensionError(f"CLS vector {cls.shape} does not match token width {seq.shape[-1]}")
    n = seq.shape[-2]
    if table is not None and n > table.max_len:
        raise CapacityError(f"{n} tokens exceed positional capacity {table.max_len}")
    lead = seq.shape[:-2]
    cls_row = reshape(cls, (1,) * len(lead) + (1, cls.shape[0]))
    if lead:
        cls_row = cls_row + Tensor(np.zeros(lead + (1, cls.shape[0]), dtype=seq.dtype))
    tokens = concat([cls_row, seq], axis=-2)
    if table is None:
        return tokens
    return tokens + Tensor(table.rows(n + 1).data.astype(seq.dtype, copy=False))


def encoder(tokens: Tensor, blocks: list[EncoderBlockParams]) -> Tensor:
    for blk in blocks:
        tokens = encoder_block(tokens, blk)
    return tokens
