"""Finite-difference gradient suites at three levels: ops, cells and models.

Every check runs in 64-bit precision and reduces an operation's output to a
scalar by ``sum(R * out)`` with a fixed random ``R``, so each output entry
contributes to the checked gradient.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .attention import EncoderBlockParams, MhaParams, encoder_block, multi_head, scaled_dot_attention
from .gradcheck import GradCheckResult, check_function, check_params
from .models import MODEL_KINDS, Model, tiny_config
from .params import ParamStore
from .recurrent import GateParams, GruParams, LstmParams, gru_step, lstm_step, run_many_to_one, vanilla_step
from .tensor import (
    Tensor,
    concat,
    conv2d,
    default_dtype,
    div,
    elu,
    exp,
    getitem,
    layer_norm,
    linear,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    mean,
    mul,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    sorted_mean,
    stack,
    sum_,
    tanh,
    transpose,
)
from .training import cross_entropy, cross_entropy_logits
from .vision import PatchEmbedParams, patch_embed, patchify

LEVELS = ("ops", "cells", "models")
TOLERANCES = {"ops": 1e-6, "cells": 1e-5, "models": 1e-4}
STEP = 1e-5


def _project(out: Tensor, seed: int) -> Tensor:
    R = np.random.default_rng(seed).standard_normal(out.shape)
    return sum_(mul(out, Tensor(R)))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _op_cases() -> list[tuple[str, Callable, dict]]:
    rng = np.random.default_rng(0)
    n = rng.standard_normal
    pos = lambda shape: rng.uniform(0.5, 2.0, size=shape)  # noqa: E731
    mha = MhaParams.init(None, "mha", 8, 2, np.random.default_rng(1), np.float64)
    block = EncoderBlockParams.init(None, "blk", 8, 2, 16, np.random.default_rng(2), np.float64)

    def with_mha(X, W_q, W_k, W_v, W_o):
        return multi_head(X, MhaParams(W_q, W_k, W_v, W_o))

    def with_block(X, **w):
        p = EncoderBlockParams(
            MhaParams(w["W_q"], w["W_k"], w["W_v"], w["W_o"]),
            w["ff1_W"], w["ff1_b"], w["ff2_W"], w["ff2_b"],
            w["g1"], w["o1"], w["g2"], w["o2"],
        )
        return encoder_block(X, p)

    b = block
    block_inputs = dict(
        X=n((5, 8)), W_q=b.mha.W_q.data, W_k=b.mha.W_k.data, W_v=b.mha.W_v.data, W_o=b.mha.W_o.data,
        ff1_W=b.ff1_W.data, ff1_b=n(16) * 0.1, ff2_W=b.ff2_W.data, ff2_b=n(8) * 0.1,
        g1=1 + 0.1 * n(8), o1=0.1 * n(8), g2=1 + 0.1 * n(8), o2=0.1 * n(8),
    )
    labels = np.array([2, 0, 1])
    return [
        ("add (broadcast)", lambda a, b: a + b, dict(a=n((3, 4)), b=n(4))),
        ("sub", lambda a, b: a - b, dict(a=n((3, 4)), b=n((3, 1)))),
        ("mul", lambda a, b: a * b, dict(a=n((3, 4)), b=n((2, 3, 4)))),
        ("div", lambda a, b: div(a, b), dict(a=n((3, 4)), b=pos((3, 4)))),
        ("power", lambda a: power(a, 3.0), dict(a=n((3, 4)))),
        ("exp", lambda a: exp(a), dict(a=n((3, 4)))),
        ("log", lambda a: log(a), dict(a=pos((3, 4)))),
        ("tanh", lambda a: tanh(a), dict(a=n((3, 4)))),
        ("sigmoid", lambda a: sigmoid(a), dict(a=n((3, 4)))),
        ("relu", lambda a: relu(a), dict(a=_away_from_zero(rng, (3, 4)))),
        ("elu", lambda a: elu(a), dict(a=_away_from_zero(rng, (3, 4)))),
        ("matmul", lambda a, b: matmul(a, b), dict(a=n((2, 3, 4)), b=n((4, 5)))),
        ("matmul (vector)", lambda a, b: matmul(a, b), dict(a=n(4), b=n((4, 3)))),
        ("linear", lambda x, W, b: linear(x, W, b), dict(x=n((3, 4)), W=n((4, 2)), b=n(2))),
        ("sum/mean axes", lambda a: sum_(a, axis=1) + mean(a, axis=(0, 1), keepdims=True)[0], dict(a=n((2, 3, 4)))),
        ("sorted_mean", lambda a: sorted_mean(a, axis=0), dict(a=n((5, 3)))),
        ("reshape/transpose", lambda a: transpose(reshape(a, (4, 6)), (1, 0)), dict(a=n((2, 3, 4)))),
        ("getitem (slice)", lambda a: getitem(a, (slice(None), 1)), dict(a=n((3, 4)))),
        ("getitem (fancy)", lambda a: getitem(a, np.array([0, 2, 2])), dict(a=n((3, 4)))),
        ("concat/stack", lambda a, b: stack([concat([a, b], axis=0), concat([b, a], axis=0)], axis=1), dict(a=n((2, 3)), b=n((2, 3)))),
        ("softmax", lambda a: softmax(a, axis=-1), dict(a=n((3, 5)))),
        ("log_softmax", lambda a: log_softmax(a, axis=0), dict(a=n((3, 5)))),
        ("layer_norm", lambda x, g, o: layer_norm(x, g, o), dict(x=n((3, 6)), g=1 + 0.1 * n(6), o=n(6))),
        ("conv2d pad 1", lambda x, k, b: conv2d(x, k, b, stride=1, padding=1), dict(x=n((2, 6, 6)), k=n((3, 2, 3, 3)), b=n(3))),
        ("conv2d stride 2", lambda x, k: conv2d(x, k, None, stride=2, padding=0), dict(x=n((2, 2, 7, 7)), k=n((2, 2, 3, 3)))),
        ("max_pool2d", lambda x: max_pool2d(x, 2), dict(x=n((2, 2, 4, 6)))),
        ("scaled_dot_attention", lambda Q, K, V: scaled_dot_attention(Q, K, V)[0], dict(Q=n((4, 3)), K=n((5, 3)), V=n((5, 2)))),
        ("multi_head", with_mha, dict(X=n((5, 8)), W_q=mha.W_q.data, W_k=mha.W_k.data, W_v=mha.W_v.data, W_o=mha.W_o.data)),
        ("encoder_block", with_block, block_inputs),
        ("patchify+embed", lambda x, W: patch_embed(patchify(x, 2), PatchEmbedParams(2, W)), dict(x=n((2, 4, 4)), W=n((8, 3)))),
        ("cross_entropy", lambda z: cross_entropy(softmax(z), 2), dict(z=n(6))),
        ("cross_entropy_logits", lambda z: cross_entropy_logits(z, labels), dict(z=n((3, 4)))),
    ]


def ops_suite(h: float = STEP) -> list[GradCheckResult]:
    results = []
    with default_dtype(np.float64):
        for i, (name, fn, inputs) in enumerate(_op_cases()):
            def loss(_fn=fn, _seed=1000 + i, **kw):
                return _project(_fn(**kw), _seed)

            err, count, _ = check_function(loss, inputs, h)
            results.append(GradCheckResult(f"op {name}", err, TOLERANCES["ops"], count))
    return results


def _cell_store(kind: str, n_x: int, n_h: int, steps: int, seed: int) -> tuple[ParamStore, object]:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    if kind == "rnn":
        params = GateParams.init(store, "cell", n_x, n_h, rng, np.float64)
    elif kind == "lstm":
        params = LstmParams.init(store, "cell", n_x, n_h, rng, np.float64)
    else:
        params = GruParams.init(store, "cell", n_x, n_h, rng, np.float64)
    # nudge biases off their constant init so every gate path is exercised
    for name, t in list(store.items()):
        if name.endswith(".b"):
            store.set(name, t.data + 0.3 * rng.standard_normal(t.shape))
    store.add("input.h0", 0.5 * rng.standard_normal(n_h))
    store.add("input.c0", 0.5 * rng.standard_normal(n_h))
    store.add("input.xs", rng.standard_normal((steps, n_x)))
    return store, params


def cells_suite(h: float = STEP) -> list[GradCheckResult]:
    results = []
    n_x, n_h = 3, 4
    with default_dtype(np.float64):
        for kind in ("rnn", "lstm", "gru"):
            store, p = _cell_store(kind, n_x, n_h, 1, 10)
            h0, c0, x = store["input.h0"], store["input.c0"], store["input.xs"]

            def one_step(kind=kind, p=p, h0=h0, c0=c0, x=x):
                x1 = getitem(x, 0)
                if kind == "rnn":
                    return _project(vanilla_step(p, h0, x1), 20)
                if kind == "lstm":
                    h1, c1 = lstm_step(p, h0, c0, x1)
                    return _project(h1, 21) + _project(c1, 22)
                return _project(gru_step(p, h0, x1), 23)

            err, count, _ = check_params(one_step, store, h)
            results.append(GradCheckResult(f"cell {kind} step", err, TOLERANCES["cells"], count))

            store, p = _cell_store(kind, n_x, n_h, 6, 11)
            h0, c0, xs = store["input.h0"], store["input.c0"], store["input.xs"]

            def sequence(kind=kind, p=p, h0=h0, c0=c0, xs=xs):
                return _project(run_many_to_one(kind, p, xs, h0, c0 if kind == "lstm" else None), 24)

            err, count, _ = check_params(sequence, store, h)
            results.append(GradCheckResult(f"cell {kind} 6-step sequence", err, TOLERANCES["cells"], count))
    return results


def models_suite(h: float = STEP) -> list[GradCheckResult]:
    results = []
    rng = np.random.default_rng(30)
    with default_dtype(np.float64):
        for kind in MODEL_KINDS:
            model = Model(tiny_config(kind))
            cfg = model.config
            # nudge zero-initialised parameters so their gradients are generic
            for name, t in list(model.params.items()):
                if not np.any(t.data):
                    model.params.set(name, 0.1 * rng.standard_normal(t.shape))
            clips = rng.uniform(0.0, 1.0, size=(2, cfg.context) + cfg.frame_shape)
            labels = rng.integers(0, cfg.num_classes, size=2)

            def loss(model=model, clips=clips, labels=labels):
                return cross_entropy_logits(model.logits(clips), labels)

            err, count, _ = check_params(loss, model.params, h)
            results.append(GradCheckResult(f"model {kind}", err, TOLERANCES["models"], count))
    return results


SUITES = {"ops": ops_suite, "cells": cells_suite, "models": models_suite}


def run_level(level: str, h: float = STEP) -> list[GradCheckResult]:
    return SUITES[level](h)
