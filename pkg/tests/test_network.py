import numpy as np
import pytest

from app.core.config import ModelConfig
from app.core.errors import InvalidConfig, ShapeMismatch, StaleCache
from app.models.domain import PreparedSeries
from app.services.model_store import load_model, save_model
from app.services.network import (
    check_gradients,
    forward_batch,
    he_normal_init,
    model_backward,
    model_forward,
    param_shapes,
    predict_batch,
    predict_passes,
)


def _series(rng, length: int, valid: int = None) -> PreparedSeries:
    valid = valid or length
    values = np.zeros(length)
    values[:valid] = rng.normal(size=valid)
    return PreparedSeries(values, valid)


def test_default_parameter_shapes():
    shapes = param_shapes(ModelConfig())
    assert shapes["conv0.weight"] == (128, 1, 8)
    assert shapes["conv1.weight"] == (128, 128, 6)
    assert shapes["conv3.weight"] == (128, 128, 2)
    assert shapes["lstm_fwd.W"] == (1, 128)
    assert shapes["lstm_bwd.U"] == (32, 128)
    assert shapes["dense.weight"] == (192,)
    assert shapes["dense.bias"] == (1,)


def test_he_normal_init():
    config = ModelConfig()
    params = he_normal_init(config, seed=4)

    assert params.matches(config)
    np.testing.assert_array_equal(params["conv0.bias"], 0.0)
    np.testing.assert_array_equal(params["lstm_fwd.b"][32:64], 1.0)
    np.testing.assert_array_equal(params["lstm_fwd.b"][:32], 0.0)
    assert params["conv1.weight"].std() == pytest.approx(np.sqrt(2.0 / (128 * 6)), rel=0.05)
    np.testing.assert_array_equal(he_normal_init(config, 4)["dense.weight"], params["dense.weight"])


def test_model_forward_is_deterministic_per_seed(tiny_config):
    rng = np.random.default_rng(0)
    config = tiny_config.model_copy(update={"conv_dropout_rate": 0.5, "lstm_dropout_rate": 0.5})
    params = he_normal_init(config, 1)
    x = _series(rng, 12, 9)

    a, _ = model_forward(x, params, config, True, rng_seed=10)
    b, _ = model_forward(x, params, config, True, rng_seed=10)
    others = {model_forward(x, params, config, True, rng_seed=s)[0] for s in range(11, 31)}

    assert a == b
    assert len(others - {a}) > 0


def test_dropout_off_matches_predict_batch(tiny_config):
    rng = np.random.default_rng(1)
    params = he_normal_init(tiny_config, 2)
    xs = [_series(rng, 10) for _ in range(5)]

    batch = predict_batch(xs, params, tiny_config, chunk_size=2)
    singles = [model_forward(x, params, tiny_config, False)[0] for x in xs]

    np.testing.assert_allclose(batch, singles, rtol=1e-10, atol=1e-12)


def test_predict_passes_matches_single_forward_calls(tiny_config):
    rng = np.random.default_rng(2)
    params = he_normal_init(tiny_config, 3)
    x = _series(rng, 10, 8)
    seeds = [100 + i for i in range(7)]

    passes = predict_passes(x, params, tiny_config, seeds, chunk_size=3)
    singles = [model_forward(x, params, tiny_config, True, rng_seed=s)[0] for s in seeds]

    np.testing.assert_allclose(passes, singles, rtol=1e-10, atol=1e-12)


def test_input_length_is_enforced(tiny_config):
    config = tiny_config.model_copy(update={"input_length": 10})
    params = he_normal_init(config, 0)
    with pytest.raises(ShapeMismatch):
        model_forward(PreparedSeries(np.ones(9), 9), params, config, False)


def test_backward_rejects_wrong_gradient_size(tiny_config):
    rng = np.random.default_rng(3)
    params = he_normal_init(tiny_config, 0)
    _, cache = forward_batch([_series(rng, 6) for _ in range(3)], params, tiny_config, False)
    with pytest.raises(StaleCache):
        model_backward(cache, np.ones(2))


def test_backward_rejects_cache_from_other_config(tiny_config):
    rng = np.random.default_rng(4)
    params = he_normal_init(tiny_config, 0)
    _, cache = model_forward(_series(rng, 6), params, tiny_config, False)
    cache["config"] = tiny_config.model_copy(update={"conv_filters": 3})
    with pytest.raises(StaleCache):
        model_backward(cache, 1.0)


def _random_tiny_config(rng) -> ModelConfig:
    layers = int(rng.integers(1, 4))
    windows = tuple(sorted(rng.choice(np.arange(1, 5), size=layers, replace=False).tolist(), reverse=True))
    return ModelConfig(
        conv_layers=layers,
        conv_window_sizes=windows,
        conv_filters=int(rng.integers(1, 5)),
        lstm_hidden_units=int(rng.integers(1, 5)),
        conv_dropout_rate=0.3,
        lstm_dropout_rate=0.3,
    )


def test_gradients_match_central_differences_on_random_tiny_configs():
    rng = np.random.default_rng(2024)
    for trial in range(25):
        config = _random_tiny_config(rng)
        steps = int(rng.integers(3, 9))
        params = he_normal_init(config, trial)
        # move biases off zero so no ReLU sits exactly on its kink
        for name, tensor in params.items():
            if name.endswith(".bias"):
                tensor += rng.normal(0, 0.1, tensor.shape)
        xs = rng.normal(size=(2, steps))
        targets = rng.uniform(0, 1, 2)

        worst = check_gradients(params, config, xs, targets, dropout_on=bool(trial % 2), rng_seed=trial)

        assert set(worst) == set(param_shapes(config))
        assert max(worst.values()) < 1e-4, f"config {trial}: {worst}"


def test_model_files_round_trip_bit_exact(tmp_path, tiny_config):
    config = tiny_config.model_copy(update={"input_length": 12})
    params = he_normal_init(config, 8)

    save_model(tmp_path, params, config, seed=8)
    loaded, loaded_config, meta = load_model(tmp_path)

    assert loaded_config == config
    assert meta["seed"] == "8"
    for name, tensor in params.items():
        assert loaded[name].tobytes() == tensor.tobytes()


def test_load_model_rejects_unknown_format(tmp_path, tiny_config):
    save_model(tmp_path, he_normal_init(tiny_config, 0), tiny_config, seed=0)
    meta = tmp_path / "model.meta"
    meta.write_text(meta.read_text().replace("valence-model/1", "other/9"))
    with pytest.raises(InvalidConfig):
        load_model(tmp_path)


@pytest.mark.parametrize("dropout_on", [False, True])
def test_zero_parameters_predict_the_dense_bias(tiny_config, dropout_on):
    params = he_normal_init(tiny_config, 0).zeros_like()
    params["dense.bias"][0] = 0.37

    y_hat, _ = model_forward(_series(np.random.default_rng(5), 10), params, tiny_config, dropout_on, rng_seed=3)

    assert y_hat == 0.37


def test_zero_upstream_gradient_gives_zero_gradients(tiny_config):
    config = tiny_config.model_copy(update={"conv_dropout_rate": 0.5})
    params = he_normal_init(config, 1)
    _, cache = model_forward(_series(np.random.default_rng(6), 10), params, config, True, rng_seed=2)

    grads = model_backward(cache, 0.0)

    for name, tensor in grads.items():
        np.testing.assert_array_equal(tensor, 0.0, err_msg=name)


def test_dense_bias_gradient_is_the_upstream_gradient(tiny_config):
    params = he_normal_init(tiny_config, 2)
    _, cache = model_forward(_series(np.random.default_rng(7), 10), params, tiny_config, False)

    grads = model_backward(cache, -0.625)

    np.testing.assert_array_equal(grads["dense.bias"], [-0.625])
