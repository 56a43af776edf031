import numpy as np
import pytest

from ctslice.layers import NonFiniteError
from ctslice.model import ModelConfig, build_model
from ctslice.training import TrainConfig, fit, predict

SMALL = ModelConfig(input_len=32, conv=((4, 5), (8, 3)), fc=(32, 1), input_dropout=0.0, fc_dropout=0.0)


def _data(n=48, seed=0):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, 32)).astype(np.float32)
    y = 50 + 10 * x[:, :4].sum(axis=1) + r.normal(size=n)
    return x, y


def test_memorizes_small_set_without_regularization():
    x, y = _data()
    model = build_model(SMALL, seed=1)
    # full-batch steps keep the BN batch statistics equal to what inference sees
    history = fit(model, x, y, TrainConfig(max_steps=1500, batch_size=48, lr=3e-3, l2_lambda=0.0), seed=1)
    mse = np.mean((predict(model, x) - y) ** 2)
    assert history[0]["loss"] > 1000 and mse < 1e-3


def test_history_and_determinism():
    x, y = _data()
    config = TrainConfig(max_steps=7, batch_size=20, decay_step=3)
    a, b = build_model(SMALL, seed=2), build_model(SMALL, seed=2)
    ha, hb = fit(a, x, y, config, seed=3), fit(b, x, y, config, seed=3)
    assert ha == hb
    assert [r["step"] for r in ha] == list(range(7))
    assert [r["lr"] for r in ha] == [1e-4] * 3 + [5e-5] * 3 + [2.5e-5]
    np.testing.assert_array_equal(predict(a, x), predict(b, x))


def test_zero_steps_leaves_model_untouched():
    x, y = _data()
    model = build_model(SMALL, seed=4)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    assert fit(model, x, y, TrainConfig(max_steps=0), seed=0) == []
    for k, v in model.state_dict().items():
        np.testing.assert_array_equal(v, before[k])


def test_callback_and_chunked_predict():
    x, y = _data(n=30)
    seen = []
    model = build_model(SMALL, seed=5)
    fit(model, x, y, TrainConfig(max_steps=4, batch_size=8), seed=0, on_step=seen.append)
    assert [r["step"] for r in seen] == [0, 1, 2, 3]
    # BLAS blocking depends on the batch size, so chunking may move the last float32 bit
    np.testing.assert_allclose(predict(model, x, chunk=7), model.predict(x), rtol=1e-6, atol=1e-6)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_names_step():
    x, y = _data()
    model = build_model(ModelConfig(input_len=32, conv=(), fc=(4, 1), init="fixed", init_std=1e30), seed=0)
    with pytest.raises(NonFiniteError, match=r"^step 0:"):
        fit(model, x * 1e10, y, TrainConfig(max_steps=3, batch_size=8), seed=0)


def test_length_mismatch():
    x, y = _data()
    with pytest.raises(ValueError):
        fit(build_model(SMALL), x, y[:-1], TrainConfig(max_steps=1), seed=0)
