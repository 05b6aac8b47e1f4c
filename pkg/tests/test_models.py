import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advbreak import tensor as T
from advbreak.data_io import load_model, model_bytes, save_model
from advbreak.models import Autoencoder, Classifier, Identity, LinearClassifier, Preprocessor, build_model
from advbreak.tensor import ShapeError


def test_classifier_output_shape_and_probabilities(rng):
    m = Classifier.init(0)
    x = rng.uniform(0, 1, (5, 28, 28, 1)).astype(np.float32)
    z = m.logits(x)
    assert z.shape == (5, 10)
    np.testing.assert_allclose(m.probs(x).data.sum(axis=1), 1, atol=1e-6)
    assert m.logits(x[0]).shape == (1, 10)


def test_zero_final_layer_gives_bias(rng):
    m = Classifier.init(0)
    m.params["fc2.w"].data[:] = 0
    m.params["fc2.b"].data[:] = np.arange(10, dtype=np.float32)
    z = m.logits(rng.uniform(0, 1, (3, 28, 28, 1))).data
    np.testing.assert_array_equal(z, np.tile(np.arange(10, dtype=np.float32), (3, 1)))


def test_argmax_tie_goes_to_lowest_index():
    m = LinearClassifier.from_weights(np.zeros((2, 3)), [2.0, 2.0, 0.0])
    assert m.predict(np.array([[0.3, 0.7]]))[0] == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(-100, 100))
def test_prediction_invariant_to_logit_shift(shift):
    w = np.array([[1.0, -2.0, 0.5], [0.3, 0.1, -1.0]])
    b = np.array([0.1, 0.0, -0.2])
    x = np.array([[0.2, 0.9], [0.8, 0.1], [0.5, 0.5]])
    a = LinearClassifier.from_weights(w, b).predict(x)
    c = LinearClassifier.from_weights(w, b + shift).predict(x)
    np.testing.assert_array_equal(a, c)


def test_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        Classifier.init(0).logits(np.zeros((2, 27, 28, 1)))
    with pytest.raises(ShapeError):
        Autoencoder.init(0)(np.zeros((2, 10)))


def test_autoencoder_preserves_shape_and_range(rng):
    for cls in (Autoencoder, Preprocessor):
        m = cls.init(3)
        x = rng.uniform(0, 1, (4, 28, 28, 1))
        y = m(x).data
        assert y.shape == x.shape
        assert np.all((y > 0) & (y < 1))


def test_brelu_switch_changes_activation():
    assert Classifier.init(0, activation="brelu").architecture()["activation"] == "brelu"
    with pytest.raises(ValueError):
        Classifier.init(0, activation="tanh")


def test_glorot_bounds_and_seeding():
    a, b = Classifier.init(4), Classifier.init(4)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    w = a.params["fc1.w"].data
    assert np.abs(w).max() <= np.sqrt(6 / (w.shape[0] + w.shape[1]))
    assert not a.params["fc1.b"].data.any()


@pytest.mark.parametrize("make", [lambda: Classifier.init(1, activation="brelu"), lambda: Autoencoder.init(2),
                                  lambda: Preprocessor.init(3),
                                  lambda: LinearClassifier.from_weights(np.ones((2, 2)), [0, 1])])
def test_round_trip_is_bit_exact(tmp_path, make, rng):
    m = make()
    path = save_model(m, tmp_path / "m.advb")
    back = load_model(path)
    assert type(back) is type(m)
    for k in m.params:
        assert m.params[k].data.tobytes() == back.params[k].data.tobytes()
    assert model_bytes(back) == model_bytes(m)
    x = rng.uniform(0, 1, (10,) + m.input_shape)
    with T.no_grad():
        np.testing.assert_array_equal(m(x).data, back(x).data)


def test_build_model_rejects_unknown_kind():
    with pytest.raises(ValueError):
        build_model({"kind": "mystery", "input_shape": [1]}, {})


def test_identity_returns_input(rng):
    x = rng.uniform(0, 1, (2, 4))
    np.testing.assert_array_equal(Identity()(x).data, x)
    np.testing.assert_array_equal(Identity().reconstruct(x), x)
