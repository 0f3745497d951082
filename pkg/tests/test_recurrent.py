import math

import numpy as np
import pytest

from oracles import gru_ref, lstm_ref, rnn_ref
from sthar.errors import ContractError, DimensionError
from sthar.gradcheck import check_params
from sthar.params import ParamStore
from sthar.recurrent import (
    GateParams,
    GruParams,
    LstmParams,
    gru_step,
    gru_trace,
    lstm_step,
    lstm_trace,
    run_many_to_one,
    vanilla_step,
)
from sthar.tensor import Tensor, mul, sum_


def gate(n_x, n_h, W=None, U=None, b=None):
    W = np.zeros((n_h, n_h)) if W is None else W
    U = np.zeros((n_h, n_x)) if U is None else U
    b = np.zeros(n_h) if b is None else b
    return GateParams(*(Tensor(np.asarray(v, dtype=np.float64)) for v in (W, U, b)))


def random_lstm(n_x, n_h, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    p = LstmParams.init(None, "lstm", n_x, n_h, rng, np.float64)
    for g in LstmParams.GATES:
        gp = getattr(p, g)
        setattr(p, g, gate(n_x, n_h, gp.W.data * scale, gp.U.data * scale, rng.standard_normal(n_h) * 0.5))
    return p


def random_gru(n_x, n_h, seed):
    rng = np.random.default_rng(seed)
    p = GruParams.init(None, "gru", n_x, n_h, rng, np.float64)
    for g in GruParams.GATES:
        gp = getattr(p, g)
        setattr(p, g, gate(n_x, n_h, gp.W.data, gp.U.data, rng.standard_normal(n_h) * 0.5))
    return p


def test_vanilla_zero_params_give_zero_state():
    out = vanilla_step(gate(2, 3), np.ones(3), np.ones(2))
    assert out.data.tolist() == [0.0, 0.0, 0.0]


def test_vanilla_identity_input_is_tanh():
    x = np.array([0.3, -1.2, 2.0])
    out = vanilla_step(gate(3, 3, U=np.eye(3)), np.zeros(3), x)
    np.testing.assert_array_equal(out.data, np.tanh(x))


def test_vanilla_matches_scalar_loop():
    rng = np.random.default_rng(0)
    p = gate(2, 3, rng.standard_normal((3, 3)), rng.standard_normal((3, 2)), rng.standard_normal(3))
    h, x = rng.standard_normal(3), rng.standard_normal(2)
    np.testing.assert_allclose(vanilla_step(p, h, x).data, rnn_ref(p, h.tolist(), x.tolist()), rtol=0, atol=1e-12)


def test_lstm_closed_form_spot_value():
    p = LstmParams(*(gate(1, 1) for _ in range(4)))
    tr = lstm_trace(p, np.zeros(1), np.ones(1), np.zeros(1))
    assert tr.f.item() == tr.i.item() == tr.o.item() == 0.5
    assert tr.c_tilde.item() == 0.0 and tr.c.item() == 0.5
    assert tr.h.item() == pytest.approx(math.tanh(0.5) * 0.5, abs=1e-15)
    assert tr.h.item() == pytest.approx(0.23106, abs=1e-5)


def test_lstm_saturated_gates_keep_cell_state():
    rng = np.random.default_rng(1)
    p = random_lstm(3, 4, 1)
    p.f = gate(3, 4, p.f.W.data, p.f.U.data, np.full(4, 20.0))
    p.i = gate(3, 4, p.i.W.data, p.i.U.data, np.full(4, -20.0))
    for _ in range(20):
        c_prev = rng.standard_normal(4)
        _, c = lstm_step(p, rng.uniform(-1, 1, 4), c_prev, rng.uniform(-1, 1, 3))
        np.testing.assert_allclose(c.data, c_prev, rtol=0, atol=1e-6)


def test_lstm_sequence_matches_scalar_loop():
    rng = np.random.default_rng(2)
    p = random_lstm(3, 4, 2)
    h, c = rng.standard_normal(4), rng.standard_normal(4)
    rh, rc = h.tolist(), c.tolist()
    for _ in range(200):
        x = rng.standard_normal(3)
        h, c = (t.data for t in lstm_step(p, h, c, x))
        rh, rc = lstm_ref(p, rh, rc, x.tolist())
        np.testing.assert_allclose(h, rh, rtol=0, atol=1e-10)
        np.testing.assert_allclose(c, rc, rtol=0, atol=1e-10)


def test_gru_saturation():
    rng = np.random.default_rng(3)
    base = random_gru(2, 3, 3)
    h_prev, x = rng.standard_normal(3), rng.standard_normal(2)
    up = GruParams(gate(2, 3, base.z.W.data, base.z.U.data, np.full(3, 20.0)), base.r, base.h)
    tr = gru_trace(up, h_prev, x)
    np.testing.assert_allclose(tr.h.data, tr.h_tilde.data, atol=1e-6)
    down = GruParams(gate(2, 3, base.z.W.data, base.z.U.data, np.full(3, -20.0)), base.r, base.h)
    np.testing.assert_allclose(gru_step(down, h_prev, x).data, h_prev, atol=1e-6)


def test_gru_sequence_matches_scalar_loop():
    rng = np.random.default_rng(4)
    p = random_gru(3, 4, 4)
    h = rng.standard_normal(4)
    rh = h.tolist()
    for _ in range(200):
        x = rng.standard_normal(3)
        h = gru_step(p, h, x).data
        rh = gru_ref(p, rh, x.tolist())
        np.testing.assert_allclose(h, rh, rtol=0, atol=1e-10)


def test_gates_in_open_unit_interval_and_gru_convexity():
    rng = np.random.default_rng(5)
    lp, gp = random_lstm(3, 5, 5, scale=3.0), random_gru(3, 5, 6)
    for _ in range(100):
        h, c, x = rng.standard_normal(5) * 3, rng.standard_normal(5), rng.standard_normal(3) * 3
        tr = lstm_trace(lp, h, c, x)
        for g in (tr.f, tr.i, tr.o):
            assert np.all((g.data > 0) & (g.data < 1))
        gt = gru_trace(gp, h, x)
        for g in (gt.z, gt.r):
            assert np.all((g.data > 0) & (g.data < 1))
        lo = np.minimum(gt.h_tilde.data, h)
        hi = np.maximum(gt.h_tilde.data, h)
        assert np.all((gt.h.data >= lo - 1e-15) & (gt.h.data <= hi + 1e-15))


def test_run_many_to_one_base_case_and_unroll():
    rng = np.random.default_rng(6)
    p = random_lstm(2, 3, 7)
    xs = rng.standard_normal((3, 2))
    one = run_many_to_one("lstm", p, xs[:1])
    h1, _ = lstm_step(p, np.zeros(3), np.zeros(3), xs[0])
    assert np.array_equal(one.data, h1.data)
    h, c = np.zeros(3), np.zeros(3)
    for x in xs:
        h, c = lstm_step(p, h, c, x)
    assert np.array_equal(run_many_to_one("lstm", p, list(xs)).data, h.data)
    assert np.array_equal(run_many_to_one("lstm", p, Tensor(xs)).data, h.data)

    g = random_gru(2, 3, 8)
    hg = np.zeros(3)
    for x in xs:
        hg = gru_step(g, hg, x)
    assert np.array_equal(run_many_to_one("gru", g, xs.tolist()).data, hg.data)


def test_run_many_to_one_rejects_empty_and_unknown():
    p = random_gru(2, 3, 9)
    with pytest.raises(ContractError):
        run_many_to_one("gru", p, [])
    with pytest.raises(ContractError):
        run_many_to_one("transformer", p, [np.zeros(2)])


def test_shape_mismatch_is_a_dimension_error():
    p = random_lstm(2, 3, 10)
    with pytest.raises(DimensionError):
        lstm_step(p, np.zeros(3), np.zeros(3), np.zeros(4))
    with pytest.raises(DimensionError):
        lstm_step(p, np.zeros(3), np.zeros(2), np.zeros(2))
    with pytest.raises(DimensionError):
        vanilla_step(gate(2, 3), np.zeros(2), np.zeros(2))
    with pytest.raises(DimensionError):
        gate(2, 3, W=np.zeros((3, 2))).validate()


def test_init_follows_fan_in_and_forget_bias():
    store = ParamStore()
    LstmParams.init(store, "l", 16, 4, np.random.default_rng(0), np.float64)
    assert np.all(store["l.f.b"].data == 1.0)
    assert np.all(store["l.i.b"].data == 0.0)
    assert np.abs(store["l.o.U"].data).max() <= 1 / 4
    assert np.abs(store["l.o.W"].data).max() <= 1 / 2


@pytest.mark.parametrize("kind", ["rnn", "lstm", "gru"])
def test_sequence_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(11)
    store = ParamStore()
    init = {"rnn": GateParams.init, "lstm": LstmParams.init, "gru": GruParams.init}[kind]
    p = init(store, "cell", 2, 3, rng, np.float64)
    xs = store.add("xs", rng.standard_normal((4, 2)))
    R = Tensor(rng.standard_normal(3))
    err, _, _ = check_params(lambda: sum_(mul(run_many_to_one(kind, p, xs), R)), store)
    assert err < 1e-5
