import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sthar.errors import ConfigError, ContractError, DimensionError
from sthar.gradcheck import check_params
from sthar.params import ParamStore
from sthar.tensor import Tensor, mul, sum_
from sthar.vision import (
    PatchEmbedParams,
    SmallCnn,
    SmallCnnParams,
    check_frame_geometry,
    cnn_forward,
    patch_embed,
    patchify,
    time_distributed,
    unpatchify,
)


def t64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def cnn64(store=None, widths=(2, 2, 2, 2), L=8, hw=(16, 16), seed=0):
    return SmallCnnParams.init(store, "cnn", 1, hw, L, np.random.default_rng(seed), np.float64, widths)


def test_default_widths_and_feature_length():
    p = SmallCnnParams.init(None, "cnn", 1, (32, 32), 128, np.random.default_rng(0), np.float32)
    assert [k.shape[0] for k in p.kernels] == [8, 16, 32, 64]
    assert all(k.shape[-2:] == (3, 3) for k in p.kernels)
    out = cnn_forward(Tensor(np.random.default_rng(1).random((1, 32, 32), dtype=np.float32)), p)
    assert out.shape == (128,)


def test_zero_convolutions_leave_the_projection_bias():
    p = cnn64()
    bias = np.random.default_rng(2).standard_normal(8)
    p.kernels = [t64(np.zeros(k.shape)) for k in p.kernels]
    p.proj_b = t64(bias)
    out = cnn_forward(t64(np.random.default_rng(3).random((1, 16, 16))), p)
    np.testing.assert_array_equal(out.data, bias)


def test_cnn_is_deterministic():
    p = cnn64()
    frame = t64(np.random.default_rng(4).random((1, 16, 16)))
    assert np.array_equal(cnn_forward(frame, p).data, cnn_forward(frame, p).data)


def test_frame_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    store = ParamStore()
    p = cnn64(store)
    for name, t in list(store.items()):
        if name.endswith("bias") or name.endswith(".b"):
            store.set(name, 0.1 * rng.standard_normal(t.shape))
    frame = store.add("frame", rng.random((1, 16, 16)))
    R = t64(rng.standard_normal(8))
    err, _, per = check_params(lambda: sum_(mul(cnn_forward(frame, p), R)), store)
    assert per["frame"] < 1e-5
    assert err < 1e-5


def test_time_distributed_equals_per_frame_bit_for_bit():
    p = cnn64(widths=(4, 4, 4, 4))
    frames = np.random.default_rng(6).random((5, 1, 16, 16))
    feats = time_distributed(t64(frames), p).data
    for i in range(5):
        assert np.array_equal(feats[i], cnn_forward(t64(frames[i]), p).data)
    batched = time_distributed(t64(np.stack([frames, frames[::-1]])), p).data
    assert np.array_equal(batched[0], feats) and np.array_equal(batched[1], feats[::-1])


def test_time_distributed_identical_frames_give_identical_rows():
    p = cnn64()
    frame = np.random.default_rng(7).random((1, 16, 16))
    feats = time_distributed([t64(frame)] * 4, SmallCnn(p)).data
    assert all(np.array_equal(feats[0], row) for row in feats)


def test_time_distributed_errors():
    p = cnn64()
    with pytest.raises(ContractError):
        time_distributed([], p)
    with pytest.raises(ContractError):
        time_distributed(t64(np.zeros((0, 1, 16, 16))), p)
    with pytest.raises(DimensionError):
        time_distributed([t64(np.zeros((1, 16, 16))), t64(np.zeros((1, 32, 32)))], p)


def test_shared_parameter_gradient_is_sum_over_frames():
    rng = np.random.default_rng(8)
    store = ParamStore()
    p = cnn64(store)
    frames = rng.random((2, 1, 16, 16))
    R = rng.standard_normal((2, 8))
    store.zero_grad()
    sum_(mul(time_distributed(t64(frames), p), t64(R))).backward()
    joint = {n: t.grad.copy() for n, t in store.items()}
    total = {n: np.zeros(t.shape) for n, t in store.items()}
    for i in range(2):
        store.zero_grad()
        sum_(mul(cnn_forward(t64(frames[i]), p), t64(R[i]))).backward()
        for n, t in store.items():
            total[n] += t.grad
    for n in joint:
        np.testing.assert_allclose(joint[n], total[n], rtol=1e-12, atol=1e-14)
    err, _, _ = check_params(lambda: sum_(mul(time_distributed(t64(frames), p), t64(R))), store)
    assert err < 1e-5


def test_frame_geometry_validation():
    check_frame_geometry((32, 48))
    with pytest.raises(ConfigError):
        check_frame_geometry((20, 32))
    with pytest.raises(ConfigError):
        check_frame_geometry((4, 4), 1)


def test_patchify_single_patch_is_the_flat_frame():
    frame = np.random.default_rng(9).random((3, 8, 8))
    out = patchify(t64(frame), 8)
    assert out.shape == (1, 192)
    np.testing.assert_array_equal(out.data[0], frame.reshape(-1))


def test_patchify_count_and_row_major_order():
    frame = np.arange(64 * 64, dtype=np.float64).reshape(1, 64, 64)
    out = patchify(t64(frame), 16)
    assert out.shape == (16, 256)
    np.testing.assert_array_equal(out.data[1], frame[0, :16, 16:32].reshape(-1))
    np.testing.assert_array_equal(out.data[4], frame[0, 16:32, :16].reshape(-1))


@given(st.sampled_from([16, 32]), st.sampled_from([16, 32]), st.sampled_from([4, 8, 16]), st.sampled_from([1, 3]))
def test_patchify_unpatchify_round_trip(h, w, p, c):
    frame = np.random.default_rng(h * w + p).random((c, h, w))
    back = unpatchify(patchify(t64(frame), p), (c, h, w), p)
    assert np.array_equal(back.data, frame)


def test_patchify_rejects_indivisible_patch():
    with pytest.raises(DimensionError):
        patchify(t64(np.zeros((1, 16, 16))), 5)


def test_patch_embed_identity_zero_and_rows():
    rng = np.random.default_rng(10)
    patches = rng.standard_normal((2, 16))
    np.testing.assert_array_equal(patch_embed(t64(patches), PatchEmbedParams(4, t64(np.eye(16)))).data, patches)
    assert not patch_embed(t64(patches), PatchEmbedParams(4, t64(np.zeros((16, 5))))).data.any()
    W = rng.standard_normal((16, 3))
    out = patch_embed(t64(patches), PatchEmbedParams(4, t64(W))).data
    for i in range(2):
        np.testing.assert_allclose(out[i], patches[i] @ W, atol=1e-12)
    with pytest.raises(DimensionError):
        patch_embed(t64(np.zeros((2, 15))), PatchEmbedParams(4, t64(W)))
