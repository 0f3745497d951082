import numpy as np
import pytest

from sthar.errors import ConfigError, ContractError, DimensionError
from sthar.models import (
    MODEL_KINDS,
    Model,
    ModelConfig,
    forward_cnn_baseline,
    forward_cnn_lstm,
    forward_hybrid,
    forward_vit_only,
    predict,
    tiny_config,
)
from sthar.recurrent import lstm_step
from sthar.tensor import Tensor, linear, softmax
from sthar.vision import cnn_forward

FORWARDS = {
    "hybrid": forward_hybrid,
    "vit_only": forward_vit_only,
    "cnn_baseline": forward_cnn_baseline,
    "cnn_lstm": forward_cnn_lstm,
}


def clip_for(cfg, seed=0, batch=None):
    shape = (cfg.context,) + cfg.frame_shape
    if batch is not None:
        shape = (batch,) + shape
    return np.random.default_rng(seed).random(shape)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_outputs_are_distributions(kind):
    model = Model(tiny_config(kind, num_classes=4))
    for seed in range(3):
        dist = FORWARDS[kind](clip_for(model.config, seed), model).data
        assert dist.shape == (4,)
        assert np.all(dist >= 0) and abs(dist.sum() - 1) <= 1e-6


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_default_float32_models_emit_distributions(kind):
    cfg = ModelConfig(kind=kind, context=12, d_model=32, heads=4, d_ff=64, feature_len=32, lstm_hidden=16)
    dist = Model(cfg).forward(clip_for(cfg, batch=2)).data
    assert dist.dtype == np.float32 and dist.shape == (2, 6)
    np.testing.assert_allclose(dist.sum(axis=-1), 1.0, atol=1e-6)


@pytest.mark.parametrize("kind", MODEL_KINDS)
def test_wrong_clip_length_is_a_contract_error(kind):
    model = Model(tiny_config(kind))
    cfg = model.config
    with pytest.raises(ContractError):
        model.forward(np.zeros((cfg.context + 1,) + cfg.frame_shape))
    with pytest.raises(DimensionError):
        model.forward(np.zeros((cfg.context, 1, 32, 32)))


def test_forward_checks_model_kind():
    with pytest.raises(ContractError):
        forward_vit_only(np.zeros((3, 1, 16, 16)), Model(tiny_config("hybrid")))


def test_batch_equals_individual_clips():
    model = Model(tiny_config("hybrid"))
    clips = clip_for(model.config, batch=3)
    batched = model.logits(clips).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], model.logits(clips[i]).data, atol=1e-12)


def two_frame_swap(cfg):
    rng = np.random.default_rng(42)
    clip = rng.random((cfg.context,) + cfg.frame_shape)
    clip[0] = 0.0
    clip[1] = 1.0
    swapped = clip.copy()
    swapped[[0, 1]] = clip[[1, 0]]
    return clip, swapped


@pytest.mark.parametrize("kind", ["hybrid", "vit_only"])
def test_transformer_models_are_order_sensitive(kind):
    model = Model(tiny_config(kind))
    clip, swapped = two_frame_swap(model.config)
    assert not np.array_equal(model.logits(clip).data, model.logits(swapped).data)


def test_cnn_baseline_is_exactly_order_invariant():
    for precision in ("float64", "float32"):
        model = Model(tiny_config("cnn_baseline", precision=precision))
        clip, swapped = two_frame_swap(model.config)
        assert np.array_equal(model.logits(clip).data, model.logits(swapped).data)
        assert np.array_equal(model.forward(clip).data, model.forward(clip[::-1]).data)


def test_single_frame_vit_with_one_patch_uses_two_tokens():
    model = Model(tiny_config("vit_only", context=1, frame_shape=(1, 8, 8), patch=8))
    assert model.table.max_len == 1
    clip = np.random.default_rng(1).random((1, 1, 8, 8))
    assert model.forward(clip).shape == (3,)


def test_cnn_lstm_single_frame_is_one_step_then_head():
    model = Model(tiny_config("cnn_lstm", context=1))
    clip = clip_for(model.config)
    feats = cnn_forward(Tensor(clip[0]), model.cnn)
    n_h = model.config.lstm_hidden
    h, _ = lstm_step(model.lstm, np.zeros(n_h), np.zeros(n_h), feats)
    expected = softmax(linear(h, model.head_W, model.head_b)).data
    np.testing.assert_allclose(model.forward(clip).data, expected, atol=1e-14)


def test_hybrid_projects_features_only_when_needed():
    assert "feat_proj.W" in Model(tiny_config("hybrid", feature_len=6)).params
    assert "feat_proj.W" not in Model(tiny_config("hybrid")).params


def test_invalid_configs_fail_at_construction():
    with pytest.raises(ConfigError):
        Model(tiny_config("hybrid", heads=3) if False else ModelConfig(kind="hybrid", d_model=10, heads=4))
    with pytest.raises(ConfigError):
        ModelConfig(kind="vit_only", patch=5).validate()
    with pytest.raises(ConfigError):
        ModelConfig(kind="hybrid", context=13).validate()
    with pytest.raises(ConfigError):
        ModelConfig(num_classes=1).validate()
    with pytest.raises(ConfigError):
        ModelConfig(kind="cnn_baseline", frame_shape=(1, 24, 24)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(kind="transnet").validate()


def test_config_round_trip():
    cfg = tiny_config("vit_only")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"kind": "hybrid", "layers": 3})


def test_parameters_are_deterministic_per_seed():
    a = Model(tiny_config("hybrid", seed=3)).params.state()
    b = Model(tiny_config("hybrid", seed=3)).params.state()
    c = Model(tiny_config("hybrid", seed=4)).params.state()
    assert all(np.array_equal(a[n], b[n]) for n in a)
    assert any(not np.array_equal(a[n], c[n]) for n in a)
    assert np.all(a["cls"] == 0)


def test_predict():
    assert predict(np.array([0.1, 0.7, 0.2])) == 1
    assert predict(np.full(6, 1 / 6)) == 0
    assert predict(np.array([[0.2, 0.8], [0.5, 0.5]])).tolist() == [1, 0]
    logits = np.random.default_rng(0).standard_normal((20, 6))
    for transform in (np.exp, lambda z: 3 * z + 1, np.arctan):
        assert np.array_equal(predict(softmax(Tensor(transform(logits))).data), predict(logits))
