"""Per-frame CNN backbone, TimeDistributed wrapper and patch embedding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .params import ParamStore, he_normal, xavier_uniform
from .tensor import Tensor, as_tensor, conv2d, elu, matmul, max_pool2d, reshape, stack, transpose

DEFAULT_WIDTHS = (8, 16, 32, 64)


class FeatureExtractor(Protocol):
    """Anything mapping frames (N, C, H, W) to features (N, L)."""

    feature_len: int

    def __call__(self, frames: Tensor) -> Tensor: ...


@dataclass
class SmallCnnParams:
    """Conv3×3 → ELU → 2×2 max-pool stages followed by a linear projection."""

    kernels: list[Tensor]
    biases: list[Tensor]
    proj_W: Tensor
    proj_b: Tensor

    @property
    def feature_len(self) -> int:
        return self.proj_W.shape[1]

    @property
    def in_channels(self) -> int:
        return self.kernels[0].shape[1]

    @classmethod
    def init(
        cls,
        store: ParamStore | None,
        prefix: str,
        in_channels: int,
        frame_hw: tuple[int, int],
        feature_len: int,
        rng,
        dtype,
        widths: Sequence[int] = DEFAULT_WIDTHS,
    ) -> "SmallCnnParams":
        check_frame_geometry(frame_hw, len(widths))
        add = (lambda name, v: Tensor(v, requires_grad=True)) if store is None else (
            lambda name, v: store.add(f"{prefix}.{name}", v)
        )
        kernels, biases = [], []
        c = in_channels
        for i, w in enumerate(widths):
            kernels.append(add(f"conv{i}.kernel", he_normal(rng, (w, c, 3, 3), c * 9, dtype)))
            biases.append(add(f"conv{i}.bias", np.zeros(w, dtype)))
            c = w
        scale = 2 ** len(widths)
        flat = c * (frame_hw[0] // scale) * (frame_hw[1] // scale)
        proj_W = add("proj.W", xavier_uniform(rng, (flat, feature_len), flat, feature_len, dtype))
        proj_b = add("proj.b", np.zeros(feature_len, dtype))
        return cls(kernels, biases, proj_W, proj_b)


def check_frame_geometry(frame_hw: tuple[int, int], stages: int = len(DEFAULT_WIDTHS)) -> None:
    h, w = frame_hw
    scale = 2**stages
    if h < 8 or w < 8:
        raise ConfigError(f"frames must be at least 8×8, got {h}×{w}")
    if h % scale or w % scale:
        raise ConfigError(f"frame extent {h}×{w} must be divisible by {scale} for {stages} pooling stages")


def cnn_forward(frame, p: SmallCnnParams) -> Tensor:
    """Feature vector of one frame (C, H, W) → (L,), or a batch (N, C, H, W) → (N, L).

    Each frame's result is independent of the batch it travels in: every
    matrix product runs per frame.
    """
    x = as_tensor(frame, p.proj_W)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise DimensionError(f"cnn_forward expects C×H×W or N×C×H×W, got {x.shape}")
    if x.shape[1] != p.in_channels:
        raise DimensionError(f"frame has {x.shape[1]} channels, backbone expects {p.in_channels}")
    for k, b in zip(p.kernels, p.biases):
        x = max_pool2d(elu(conv2d(x, k, b, stride=1, padding=1)), 2)
    n = x.shape[0]
    flat = reshape(x, (n, 1, -1))
    if flat.shape[-1] != p.proj_W.shape[0]:
        raise DimensionError(f"flattened features {flat.shape[-1]} != projection input {p.proj_W.shape[0]}")
    out = reshape(matmul(flat, p.proj_W), (n, p.feature_len)) + p.proj_b
    return reshape(out, (p.feature_len,)) if single else out


class SmallCnn:
    """:class:`FeatureExtractor` wrapper around :func:`cnn_forward`."""

    def __init__(self, params: SmallCnnParams):
        self.params = params
        self.feature_len = params.feature_len

    def __call__(self, frames: Tensor) -> Tensor:
        return cnn_forward(frames, self.params)


def _as_frames(frames) -> Tensor:
    if isinstance(frames, Tensor):
        return frames
    if isinstance(frames, np.ndarray):
        return Tensor(frames)
    frames = list(frames)
    if not frames:
        raise ContractError("time_distributed needs at least one frame")
    shapes = {tuple(np.shape(f.data if isinstance(f, Tensor) else f)) for f in frames}
    if len(shapes) != 1:
        raise DimensionError(f"frames have differing shapes: {sorted(shapes)}")
    return stack([as_tensor(f) for f in frames], axis=0)


def time_distributed(frames, backbone) -> Tensor:
    """Apply one backbone (shared parameters) to every frame.

    frames: (T, C, H, W) → (T, L), or (B, T, C, H, W) → (B, T, L).
    ``backbone`` is a :class:`SmallCnnParams` or any :class:`FeatureExtractor`.
    """
    x = _as_frames(frames)
    if x.ndim not in (4, 5):
        raise DimensionError(f"time_distributed expects T×C×H×W or B×T×C×H×W, got {x.shape}")
    if x.shape[-4] == 0:
        raise ContractError("time_distributed needs at least one frame")
    extract = SmallCnn(backbone) if isinstance(backbone, SmallCnnParams) else backbone
    lead = x.shape[:-3]
    flat = reshape(x, (-1,) + x.shape[-3:])
    feats = extract(flat)
    return reshape(feats, lead + (feats.shape[-1],))


def patchify(frame, patch: int) -> Tensor:
    """Split (…, C, H, W) into row-major p×p patches → (…, H·W/p², p²·C).

    Each row flattens one patch in (channel, row, column) order.
    """
    x = as_tensor(frame)
    *lead, c, h, w = x.shape
    if patch < 1 or h % patch or w % patch:
        raise DimensionError(f"patch size {patch} does not divide frame {h}×{w}")
    lead = tuple(lead)
    gh, gw = h // patch, w // patch
    nl = len(lead)
    y = reshape(x, lead + (c, gh, patch, gw, patch))
    axes = tuple(range(nl)) + (nl + 1, nl + 3, nl, nl + 2, nl + 4)
    y = transpose(y, axes)
    return reshape(y, lead + (gh * gw, c * patch * patch))


def unpatchify(patches, frame_shape: tuple[int, int, int], patch: int) -> Tensor:
    """Inverse of :func:`patchify`."""
    x = as_tensor(patches)
    c, h, w = frame_shape
    if h % patch or w % patch:
        raise DimensionError(f"patch size {patch} does not divide frame {h}×{w}")
    gh, gw = h // patch, w // patch
    lead = x.shape[:-2]
    if x.shape[-2:] != (gh * gw, c * patch * patch):
        raise DimensionError(f"patch matrix {x.shape[-2:]} does not fit frame {frame_shape} with p={patch}")
    nl = len(lead)
    y = reshape(x, lead + (gh, gw, c, patch, patch))
    axes = tuple(range(nl)) + (nl + 2, nl, nl + 3, nl + 1, nl + 4)
    return reshape(transpose(y, axes), lead + (c, h, w))


@dataclass
class PatchEmbedParams:
    patch: int
    W: Tensor  # (p²·C, d_model)

    @property
    def d_model(self) -> int:
        return self.W.shape[1]

    @classmethod
    def init(cls, store: ParamStore | None, prefix: str, patch: int, channels: int, d_model: int, rng, dtype):
        fan_in = patch * patch * channels
        W = xavier_uniform(rng, (fan_in, d_model), fan_in, d_model, dtype)
        return cls(patch, Tensor(W, requires_grad=True) if store is None else store.add(f"{prefix}.W", W))


def patch_embed(patches, p: PatchEmbedParams) -> Tensor:
    """Project each flattened patch row to d_model."""
    x = as_tensor(patches, p.W)
    if x.shape[-1] != p.W.shape[0]:
        raise DimensionError(f"patch length {x.shape[-1]} != projection input {p.W.shape[0]}")
    return matmul(x, p.W)
