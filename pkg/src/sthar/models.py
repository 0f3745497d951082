"""End-to-end clip classifiers: hybrid CNN-ViT, ViT-only, CNN and CNN-LSTM."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .attention import EncoderBlockParams, PositionalTable, add_positions_and_cls, encoder
from .errors import ConfigError, ContractError, DimensionError
from .params import ParamStore, xavier_uniform
from .recurrent import LstmParams, run_many_to_one
from .tensor import Tensor, elu, linear, reshape, softmax, sorted_mean
from .vision import (
    DEFAULT_WIDTHS,
    PatchEmbedParams,
    SmallCnnParams,
    check_frame_geometry,
    patch_embed,
    patchify,
    time_distributed,
)

MODEL_KINDS = ("hybrid", "vit_only", "cnn_baseline", "cnn_lstm")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class ModelConfig:
    kind: str = "hybrid"
    num_classes: int = 6
    context: int = 24
    contexts: tuple[int, ...] = (12, 18, 24)
    frame_shape: tuple[int, int, int] = (1, 32, 32)
    d_model: int = 128
    heads: int = 4
    depth: int = 2
    d_ff: int = 256
    patch: int = 8
    lstm_hidden: int = 128
    feature_len: int = 128
    cnn_widths: tuple[int, ...] = DEFAULT_WIDTHS
    mlp_hidden: int = 128
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        self.contexts = tuple(int(c) for c in self.contexts)
        self.frame_shape = tuple(int(v) for v in self.frame_shape)
        self.cnn_widths = tuple(int(w) for w in self.cnn_widths)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def patches_per_frame(self) -> int:
        _, h, w = self.frame_shape
        return (h // self.patch) * (w // self.patch)

    def validate(self) -> "ModelConfig":
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.context not in self.contexts:
            raise ConfigError(f"context length {self.context} not in configured set {list(self.contexts)}")
        if self.context < 1:
            raise ConfigError("context length must be positive")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {sorted(PRECISIONS)}, got {self.precision!r}")
        if len(self.frame_shape) != 3:
            raise ConfigError(f"frame_shape must be (C, H, W), got {self.frame_shape}")
        c, h, w = self.frame_shape
        if c not in (1, 3):
            raise ConfigError(f"frames must have 1 or 3 channels, got {c}")
        if self.kind in ("hybrid", "vit_only"):
            if self.heads < 1 or self.d_model % self.heads:
                raise ConfigError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
            if self.d_ff < self.d_model:
                raise ConfigError(f"d_ff ({self.d_ff}) must be >= d_model ({self.d_model})")
            if self.depth < 1:
                raise ConfigError("encoder depth must be >= 1")
        if self.kind == "vit_only":
            if h < 8 or w < 8:
                raise ConfigError(f"frames must be at least 8×8, got {h}×{w}")
            if self.patch < 1 or h % self.patch or w % self.patch:
                raise ConfigError(f"patch size {self.patch} must divide frame {h}×{w}")
        else:
            if not self.cnn_widths:
                raise ConfigError("cnn_widths must list at least one stage")
            check_frame_geometry((h, w), len(self.cnn_widths))
            if self.feature_len < 1:
                raise ConfigError("feature_len must be positive")
        if self.kind == "cnn_lstm" and self.lstm_hidden < 1:
            raise ConfigError("lstm_hidden must be positive")
        if self.kind == "cnn_baseline" and self.mlp_hidden < 1:
            raise ConfigError("mlp_hidden must be positive")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("contexts", "frame_shape", "cnn_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def tiny_config(kind: str, **overrides) -> ModelConfig:
    """Minimal 64-bit configuration used by gradient checks."""
    base = dict(
        kind=kind,
        num_classes=3,
        context=3,
        contexts=(1, 2, 3),
        frame_shape=(1, 16, 16),
        d_model=8,
        heads=2,
        depth=1,
        d_ff=8,
        patch=8,
        lstm_hidden=4,
        feature_len=8,
        cnn_widths=(2, 2, 2, 2),
        mlp_hidden=6,
        seed=0,
        precision="float64",
    )
    base.update(overrides)
    return ModelConfig(**base).validate()


class Model:
    """A classifier plus the :class:`ParamStore` that holds all of its weights."""

    def __init__(self, config: ModelConfig):
        self.config = config.validate()
        self.params = ParamStore()
        rng = np.random.default_rng(config.seed)
        dtype = config.dtype
        c, h, w = config.frame_shape
        store = self.params
        self.cnn = self.feat_proj = self.patch_params = self.lstm = None
        self.blocks: list[EncoderBlockParams] = []
        self.table = None
        self.cls = None
        d = config.d_model

        if config.kind in ("hybrid", "cnn_baseline", "cnn_lstm"):
            self.cnn = SmallCnnParams.init(
                store, "cnn", c, (h, w), config.feature_len, rng, dtype, config.cnn_widths
            )
        if config.kind in ("hybrid", "vit_only"):
            if config.kind == "hybrid":
                n_tokens = config.context
                if config.feature_len != d:
                    L = config.feature_len
                    self.feat_proj = (
                        store.add("feat_proj.W", xavier_uniform(rng, (L, d), L, d, dtype)),
                        store.add("feat_proj.b", np.zeros(d, dtype)),
                    )
            else:
                n_tokens = config.context * config.patches_per_frame
                self.patch_params = PatchEmbedParams.init(store, "patch_embed", config.patch, c, d, rng, dtype)
            self.table = PositionalTable(n_tokens, d, dtype)
            self.cls = store.add("cls", np.zeros(d, dtype))
            self.blocks = [
                EncoderBlockParams.init(store, f"encoder.{i}", d, config.heads, config.d_ff, rng, dtype)
                for i in range(config.depth)
            ]
            head_in = d
        elif config.kind == "cnn_lstm":
            self.lstm = LstmParams.init(store, "lstm", config.feature_len, config.lstm_hidden, rng, dtype)
            head_in = config.lstm_hidden
        else:
            L, m = config.feature_len, config.mlp_hidden
            self.mlp = (
                store.add("mlp.W", xavier_uniform(rng, (L, m), L, m, dtype)),
                store.add("mlp.b", np.zeros(m, dtype)),
            )
            head_in = m
        k = config.num_classes
        self.head_W = store.add("head.W", xavier_uniform(rng, (head_in, k), head_in, k, dtype))
        self.head_b = store.add("head.b", np.zeros(k, dtype))

    @property
    def kind(self) -> str:
        return self.config.kind

    # -- forward paths ----------------------------------------------------
    def _clips(self, clips) -> Tensor:
        x = clips if isinstance(clips, Tensor) else Tensor(np.asarray(clips), dtype=self.config.dtype)
        if x.dtype != self.config.dtype:
            x = Tensor(x.data, dtype=self.config.dtype)
        if x.ndim not in (4, 5):
            raise DimensionError(f"expected a clip T×C×H×W or a batch B×T×C×H×W, got {x.shape}")
        if x.shape[-3:] != self.config.frame_shape:
            raise DimensionError(f"frame shape {x.shape[-3:]} != configured {self.config.frame_shape}")
        if x.shape[-4] != self.config.context:
            raise ContractError(f"clip length {x.shape[-4]} != configured context length {self.config.context}")
        return x

    def _frame_features(self, x: Tensor) -> Tensor:
        feats = time_distributed(x, self.cnn)
        if self.feat_proj is not None:
            feats = linear(feats, *self.feat_proj)
        return feats

    def _transformer_head(self, tokens: Tensor) -> Tensor:
        seq = add_positions_and_cls(tokens, self.table, self.cls)
        out = encoder(seq, self.blocks)
        z = out[..., 0, :]
        return linear(z, self.head_W, self.head_b)

    def logits(self, clips) -> Tensor:
        """Unnormalised class scores for a clip (→ (K,)) or a batch of clips (→ (B, K))."""
        x = self._clips(clips)
        kind = self.config.kind
        if kind == "hybrid":
            return self._transformer_head(self._frame_features(x))
        if kind == "vit_only":
            patches = patchify(x, self.config.patch)  # (…, T, P, p²C)
            lead = patches.shape[:-3]
            seq = reshape(patches, lead + (-1, patches.shape[-1]))
            return self._transformer_head(patch_embed(seq, self.patch_params))
        feats = time_distributed(x, self.cnn)
        if kind == "cnn_baseline":
            pooled = sorted_mean(feats, axis=-2)
            return linear(elu(linear(pooled, *self.mlp)), self.head_W, self.head_b)
        h = run_many_to_one("lstm", self.lstm, feats)
        return linear(h, self.head_W, self.head_b)

    def forward(self, clips) -> Tensor:
        """Class distribution(s): softmax over :meth:`logits`."""
        return softmax(self.logits(clips), axis=-1)


def _forward_kind(kind: str, clip, model: Model) -> Tensor:
    if model.kind != kind:
        raise ContractError(f"model is {model.kind!r}, not {kind!r}")
    return model.forward(clip)


def forward_hybrid(clip, model: Model) -> Tensor:
    """CNN per frame → CLS + positions → encoder → CLS row → linear → softmax."""
    return _forward_kind("hybrid", clip, model)


def forward_vit_only(clip, model: Model) -> Tensor:
    """Patches of every frame, concatenated in frame order → encoder → softmax."""
    return _forward_kind("vit_only", clip, model)


def forward_cnn_baseline(clip, model: Model) -> Tensor:
    """Order-free temporal mean of CNN features → 2-layer ELU MLP → softmax."""
    return _forward_kind("cnn_baseline", clip, model)


def forward_cnn_lstm(clip, model: Model) -> Tensor:
    """CNN features → many-to-one LSTM → linear → softmax."""
    return _forward_kind("cnn_lstm", clip, model)


def predict(dist) -> int | np.ndarray:
    """Argmax class index; ties go to the lowest index."""
    d = dist.data if isinstance(dist, Tensor) else np.asarray(dist)
    idx = np.argmax(d, axis=-1)
    return int(idx) if np.ndim(idx) == 0 else idx
