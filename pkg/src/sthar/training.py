"""Losses, optimisers, the training loop and evaluation metrics."""

from __future__ import annotations

import dataclasses
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import ClipRecord, DatasetManifest, SplitSpec, normalize, sample_window
from .errors import ConfigError, ContractError, NumericError, TrainingError
from .models import Model, ModelConfig
from .params import ParamStore, backward
from .tensor import Tensor, clip_min, getitem, log, log_softmax, mean, neg, no_grad

OPTIMIZERS = ("adam", "sgd_momentum")
WINDOW_MODES = ("random", "center")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    max_steps: int | None = None
    clip_norm: float | None = 5.0
    seed: int = 0
    deterministic: bool = True
    window: str = "random"
    eval_batch: int = 32

    def validate(self) -> "TrainConfig":
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.eval_batch < 1:
            raise ConfigError(f"batch sizes must be >= 1, got {self.batch_size}/{self.eval_batch}")
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigError("epochs and max_steps must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and 0 <= self.momentum < 1):
            raise ConfigError("betas and momentum must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError("eps must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive or null, got {self.clip_norm}")
        if self.window not in WINDOW_MODES:
            raise ConfigError(f"window must be one of {WINDOW_MODES}, got {self.window!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(dist: Tensor, label: int) -> Tensor:
    """−log p[label] of one class distribution, with p clamped at 1e-12."""
    if dist.ndim != 1:
        raise ContractError(f"cross_entropy expects one distribution (K,), got {dist.shape}")
    if not 0 <= int(label) < dist.shape[0]:
        raise ContractError(f"label {label} out of range for {dist.shape[0]} classes")
    return neg(log(clip_min(getitem(dist, int(label)), 1e-12)))


def cross_entropy_logits(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of a batch of logits (B, K) against integer labels.

    Same value as :func:`cross_entropy` on the softmax, computed through
    log-softmax so it stays finite for confident predictions.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ContractError(f"need logits (B, K) and B labels, got {logits.shape} and {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ContractError(f"labels out of range for {logits.shape[1]} classes")
    picked = getitem(log_softmax(logits, axis=-1), (np.arange(len(labels)), labels))
    return neg(mean(picked))


# ---------------------------------------------------------------------------
# optimisers


@dataclass
class OptimState:
    """Per-parameter buffers plus the number of updates applied so far.

    Adam keeps ``m`` and ``v``; SGD with momentum keeps ``velocity``.
    """

    kind: str
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    @classmethod
    def zeros(cls, kind: str, params: dict[str, np.ndarray]) -> "OptimState":
        names = ("m", "v") if kind == "adam" else ("velocity",)
        return cls(kind, 0, {b: {n: np.zeros_like(p) for n, p in params.items()} for b in names})

    def copy(self) -> "OptimState":
        return OptimState(self.kind, self.step, {b: {n: a.copy() for n, a in d.items()} for b, d in self.buffers.items()})


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """One bias-corrected Adam update of every parameter listed in ``grads``.

    Parameters missing from ``grads`` keep their value and moments.
    """
    t = state.step + 1
    m_all, v_all = state.buffers["m"], state.buffers["v"]
    out = dict(params)
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in sorted(grads):
        g, p = grads[name], params[name]
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * m_all[name] + (1.0 - beta1) * g
        v = beta2 * v_all[name] + (1.0 - beta2) * (g * g)
        m_all[name], v_all[name] = m.astype(p.dtype), v.astype(p.dtype)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        out[name] = (p - update).astype(p.dtype)
    state.step = t
    return out, state


def sgd_momentum_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimState,
    lr: float = 1e-2,
    momentum: float = 0.9,
) -> tuple[dict[str, np.ndarray], OptimState]:
    """v ← μv + g; p ← p − lr·v for every parameter listed in ``grads``."""
    vel = state.buffers["velocity"]
    out = dict(params)
    for name in sorted(grads):
        g, p = grads[name], params[name]
        if g.shape != p.shape:
            raise ContractError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        v = (momentum * vel[name] + g).astype(p.dtype)
        vel[name] = v
        out[name] = (p - lr * v).astype(p.dtype)
    state.step += 1
    return out, state


class Optimizer:
    """Applies :func:`adam_step` or :func:`sgd_momentum_step` to a ParamStore."""

    def __init__(self, params: ParamStore, config: TrainConfig, state: OptimState | None = None):
        self.params = params
        self.config = config
        self.state = state if state is not None else OptimState.zeros(config.optimizer, params.state())

    def step(self, names: Sequence[str] | None = None) -> None:
        """Update ``names`` (default: all) from their current gradients."""
        chosen = self.params.names() if names is None else sorted(names)
        grads = {n: self.params[n].grad for n in chosen if self.params[n].grad is not None}
        values = self.params.state()
        c = self.config
        if c.optimizer == "adam":
            new, self.state = adam_step(values, grads, self.state, c.lr, c.beta1, c.beta2, c.eps)
        else:
            new, self.state = sgd_momentum_step(values, grads, self.state, c.lr, c.momentum)
        for name in grads:
            self.params.set(name, new[name])


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_grad_norm(params: ParamStore, max_norm: float, names: Sequence[str] | None = None) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    chosen = params.names() if names is None else sorted(names)
    tensors = [params[n] for n in chosen if params[n].grad is not None]
    norm = global_norm([t.grad for t in tensors])
    if norm > max_norm:
        scale = max_norm / norm
        for t in tensors:
            t.grad = (t.grad * scale).astype(t.dtype)
    return norm


# ---------------------------------------------------------------------------
# metrics


@dataclass
class EpochStats:
    epoch: int
    steps: int
    train_loss: float | None
    train_accuracy: float
    val_accuracy: float | None


@dataclass
class Metrics:
    """Run history and/or evaluation results.

    ``accuracy`` and ``confusion`` describe the evaluated split (the test
    split after training); ``confusion[i][j]`` counts clips of class ``i``
    predicted as ``j``. Wall-clock ``seconds`` is kept out of
    :meth:`to_json` by default so that deterministic runs export identical
    bytes.
    """

    num_classes: int
    epochs: list[EpochStats] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    steps: int = 0
    split: str | None = None
    accuracy: float | None = None
    confusion: list[list[int]] | None = None
    count: int = 0
    skipped: int = 0
    seconds: float = 0.0

    def to_json(self, include_timing: bool = False) -> dict:
        d = {
            "num_classes": self.num_classes,
            "steps": self.steps,
            "best_epoch": self.best_epoch,
            "epochs": [dataclasses.asdict(e) for e in self.epochs],
            "step_losses": list(self.step_losses),
            "split": self.split,
            "accuracy": self.accuracy,
            "count": self.count,
            "skipped": self.skipped,
            "confusion": self.confusion,
        }
        if include_timing:
            d["seconds"] = self.seconds
        return d

    def dumps(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_json(include_timing), indent=2) + "\n"


def confusion_matrix(labels: Sequence[int], predictions: Sequence[int], num_classes: int) -> list[list[int]]:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return cm.tolist()


def accuracy_from_confusion(cm: list[list[int]]) -> float | None:
    a = np.asarray(cm)
    total = int(a.sum())
    return float(np.trace(a)) / total if total else None


# ---------------------------------------------------------------------------
# batching helpers


@contextmanager
def thread_limit(threads: int | None):
    """Cap BLAS threads for the duration of the block (``None``: no cap)."""
    if threads is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=int(threads)):
        yield


def _batch(records: Sequence[ClipRecord], context: int, mode: str, rng, dtype) -> tuple[np.ndarray, np.ndarray]:
    clips = np.stack([normalize(sample_window(r, context, mode, rng), dtype) for r in records])
    return clips, np.array([r.label for r in records], dtype=np.int64)


Predictor = Callable[[np.ndarray, Sequence[ClipRecord]], np.ndarray]


def model_predictor(model: Model, batch_size: int = 32) -> Predictor:
    """Argmax predictions of ``model`` for a batch of center windows."""

    def predict(clips: np.ndarray, records) -> np.ndarray:
        out = []
        with no_grad():
            for i in range(0, len(clips), batch_size):
                out.append(np.argmax(model.logits(clips[i : i + batch_size]).data, axis=-1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    return predict


def _accuracy(model: Model, records: Sequence[ClipRecord], batch_size: int) -> float | None:
    if not records:
        return None
    cfg = model.config
    clips, labels = _batch(records, cfg.context, "center", None, cfg.dtype)
    preds = model_predictor(model, batch_size)(clips, records)
    return float(np.mean(preds == labels))


def evaluate_records(
    records: Sequence[ClipRecord],
    context: int,
    num_classes: int,
    predictor: Predictor,
    dtype=np.float32,
    batch_size: int = 64,
) -> Metrics:
    """Accuracy and confusion matrix of ``predictor`` over center windows.

    Clips shorter than ``context`` are skipped and counted.
    """
    usable = [r for r in records if len(r) >= context]
    skipped = len(records) - len(usable)
    labels, preds = [], []
    for i in range(0, len(usable), batch_size):
        chunk = usable[i : i + batch_size]
        clips, y = _batch(chunk, context, "center", None, dtype)
        preds.extend(int(p) for p in np.asarray(predictor(clips, chunk)))
        labels.extend(int(v) for v in y)
    cm = confusion_matrix(labels, preds, num_classes)
    return Metrics(
        num_classes=num_classes,
        accuracy=accuracy_from_confusion(cm),
        confusion=cm,
        count=len(usable),
        skipped=skipped,
    )


def evaluate(
    checkpoint,
    manifest: DatasetManifest,
    split: SplitSpec | None,
    context: int | None = None,
    split_name: str = "test",
    predictor: Predictor | None = None,
) -> Metrics:
    """Evaluate a :class:`~sthar.checkpoint.Checkpoint` (or a :class:`Model`).

    ``split=None`` evaluates every record of ``manifest``. A custom
    ``predictor`` replaces the model's own predictions (useful for reference
    predictors).
    """
    t0 = time.perf_counter()
    model = checkpoint if isinstance(checkpoint, Model) else checkpoint.build_model()
    cfg = model.config
    context = cfg.context if context is None else int(context)
    if context != cfg.context:
        raise ContractError(f"model was built for context length {cfg.context}, not {context}")
    check_compatible(cfg, manifest)
    records = manifest.records if split is None else split.records(manifest, split_name)
    if not records:
        raise ContractError(f"split {split_name!r} holds no clips")
    m = evaluate_records(records, context, cfg.num_classes, predictor or model_predictor(model), cfg.dtype)
    m.split = split_name if split is not None else "all"
    m.seconds = time.perf_counter() - t0
    return m


def check_compatible(cfg: ModelConfig, manifest: DatasetManifest) -> None:
    if manifest.num_classes != cfg.num_classes:
        raise ContractError(f"dataset has {manifest.num_classes} classes, model expects {cfg.num_classes}")
    if manifest.frame_shape is not None and tuple(manifest.frame_shape) != cfg.frame_shape:
        raise ContractError(f"dataset frames {tuple(manifest.frame_shape)} != model frames {cfg.frame_shape}")


# ---------------------------------------------------------------------------
# training loop


def train(
    model_config: ModelConfig,
    manifest: DatasetManifest,
    split: SplitSpec,
    train_config: TrainConfig | None = None,
    progress: Callable[[EpochStats], None] | None = None,
    data_info: dict | None = None,
):
    """Train a fresh model and return ``(checkpoint, metrics)``.

    The checkpoint holds the parameters (and optimiser state) of the epoch
    with the best validation accuracy; ties keep the earlier epoch. Without
    a validation split, train accuracy decides. ``metrics`` records the
    per-epoch history, the per-step loss and, when the split has a test
    part, test accuracy and confusion matrix of the selected parameters.
    """
    from .checkpoint import Checkpoint

    cfg = model_config.validate()
    tc = (train_config or TrainConfig()).validate()
    check_compatible(cfg, manifest)
    train_recs = split.records(manifest, "train")
    if not train_recs:
        raise ContractError("the train split holds no clips")
    t0 = time.perf_counter()
    usable = [r for r in train_recs if len(r) >= cfg.context]
    if not usable:
        raise ContractError(f"no training clip is at least {cfg.context} frames long")
    val_recs = [r for r in split.records(manifest, "val") if len(r) >= cfg.context]
    test_recs = split.records(manifest, "test")

    with thread_limit(1 if tc.deterministic else None):
        model = Model(cfg)
        opt = Optimizer(model.params, tc)
        rng = np.random.default_rng([tc.seed, 7])
        metrics = Metrics(num_classes=cfg.num_classes)
        best = (-1.0, None, model.params.state(), opt.state.copy())  # (score, epoch, params, optimiser)
        step = 0
        budget = tc.max_steps if tc.max_steps is not None else np.inf
        epoch = 0
        while epoch < tc.epochs and step < budget:
            order = rng.permutation(len(usable))
            losses = []
            for i in range(0, len(order), tc.batch_size):
                if step >= budget:
                    break
                chunk = [usable[j] for j in order[i : i + tc.batch_size]]
                clips, labels = _batch(chunk, cfg.context, tc.window, rng, cfg.dtype)
                try:
                    loss = cross_entropy_logits(model.logits(clips), labels)
                except NumericError as exc:
                    raise TrainingError(f"non-finite activations at step {step}: {exc}", step) from None
                value = float(loss.item())
                if not np.isfinite(value):
                    raise TrainingError(f"loss became {value} at step {step}", step)
                reached = backward(loss, model.params)
                if tc.clip_norm is not None:
                    clip_grad_norm(model.params, tc.clip_norm, reached)
                opt.step(reached)
                if not all(np.isfinite(model.params[n].data).all() for n in reached):
                    raise TrainingError(f"parameters became non-finite at step {step}", step)
                step += 1
                losses.append(value)
            metrics.step_losses.extend(losses)
            try:
                train_acc = _accuracy(model, usable, tc.eval_batch)
                val_acc = _accuracy(model, val_recs, tc.eval_batch)
            except NumericError as exc:
                raise TrainingError(f"non-finite activations after step {step}: {exc}", step) from None
            stats = EpochStats(epoch, step, float(np.mean(losses)) if losses else None, train_acc, val_acc)
            metrics.epochs.append(stats)
            if progress is not None:
                progress(stats)
            score = val_acc if val_acc is not None else train_acc
            if score > best[0]:
                best = (score, epoch, model.params.state(), opt.state.copy())
            epoch += 1

        _, best_epoch, best_params, best_opt = best
        model.params.load_state(best_params)
        metrics.best_epoch = best_epoch
        metrics.steps = step
        if test_recs:
            ev = evaluate_records(test_recs, cfg.context, cfg.num_classes, model_predictor(model, tc.eval_batch), cfg.dtype)
            metrics.split, metrics.accuracy, metrics.confusion = "test", ev.accuracy, ev.confusion
            metrics.count, metrics.skipped = ev.count, ev.skipped
    metrics.seconds = time.perf_counter() - t0
    ckpt = Checkpoint(
        model_config=cfg,
        params=model.params.state(),
        optimizer=best_opt,
        train_config=tc.to_dict(),
        seeds={"model": cfg.seed, "train": tc.seed},
        data=dict(data_info or {}, split=split.to_json()),
    )
    return ckpt, metrics
