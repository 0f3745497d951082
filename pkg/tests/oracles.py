"""Scalar-loop reference implementations used as independent oracles."""

import math

import numpy as np


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def affine(W, U, b, h, x):
    """W·h + U·x + b, one coordinate at a time."""
    out = []
    for r in range(len(b)):
        acc = b[r]
        for k in range(len(h)):
            acc += W[r][k] * h[k]
        for k in range(len(x)):
            acc += U[r][k] * x[k]
        out.append(acc)
    return out


def gate_lists(g):
    return g.W.data.tolist(), g.U.data.tolist(), g.b.data.tolist()


def rnn_ref(p, h, x):
    return [math.tanh(v) for v in affine(*gate_lists(p), h, x)]


def lstm_ref(p, h, c, x):
    f = [sig(v) for v in affine(*gate_lists(p.f), h, x)]
    i = [sig(v) for v in affine(*gate_lists(p.i), h, x)]
    ct = [math.tanh(v) for v in affine(*gate_lists(p.c), h, x)]
    c_new = [f[k] * c[k] + i[k] * ct[k] for k in range(len(c))]
    o = [sig(v) for v in affine(*gate_lists(p.o), h, x)]
    h_new = [math.tanh(c_new[k]) * o[k] for k in range(len(c))]
    return h_new, c_new


def gru_ref(p, h, x):
    z = [sig(v) for v in affine(*gate_lists(p.z), h, x)]
    r = [sig(v) for v in affine(*gate_lists(p.r), h, x)]
    rh = [r[k] * h[k] for k in range(len(h))]
    ht = [math.tanh(v) for v in affine(*gate_lists(p.h), rh, x)]
    return [z[k] * ht[k] + (1.0 - z[k]) * h[k] for k in range(len(h))]


def attention_ref(Q, K, V):
    """Row-by-row softmax(Q Kᵀ/√d) V with explicit loops."""
    d = len(Q[0])
    out, weights = [], []
    for q in Q:
        scores = [sum(q[j] * k[j] for j in range(d)) / math.sqrt(d) for k in K]
        m = max(scores)
        e = [math.exp(s - m) for s in scores]
        total = sum(e)
        w = [v / total for v in e]
        weights.append(w)
        out.append([sum(w[n] * V[n][j] for n in range(len(V))) for j in range(len(V[0]))])
    return np.array(out), np.array(weights)
