import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from tracegrad.errors import SpecError
from tracegrad.nn.data import synthetic_separable
from tracegrad.nn.estimator import ConvNetClassifier

SPEC = {"name": "two", "input": [1, 8, 8], "layers": [
    {"type": "conv", "kernel": 3, "c_in": 1, "c_out": 4},
    {"type": "relu"}, {"type": "maxpool", "k": 2}, {"type": "flatten"},
    {"type": "dense", "in": 64, "out": 2}]}


def test_params_and_clone():
    est = ConvNetClassifier(spec=SPEC, conv_mode="ortho", r=8, epochs=3)
    params = est.get_params()
    assert params["r"] == 8 and params["conv_mode"] == "ortho"
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_fit_predict():
    x, y = synthetic_separable(300, seed=0)
    est = ConvNetClassifier(spec=SPEC, lr=0.01, batch_size=32, epochs=10, random_state=1)
    est.fit(x[:200], y[:200])
    assert list(est.classes_) == [0, 1]
    proba = est.predict_proba(x[200:])
    assert proba.shape == (100, 2) and np.allclose(proba.sum(axis=1), 1)
    assert est.score(x[200:], y[200:]) >= 0.95


def test_probed_fit_predict():
    x, y = synthetic_separable(300, seed=0)
    est = ConvNetClassifier(spec=SPEC, conv_mode="multi", r=16, lr=0.01, batch_size=32,
                            epochs=10, random_state=1).fit(x[:200], y[:200])
    assert est.score(x[200:], y[200:]) >= 0.9


def test_string_labels_map_back():
    x, y = synthetic_separable(64, seed=3)
    labels = np.array(["left", "right"])[y]
    est = ConvNetClassifier(spec=SPEC, epochs=1).fit(x, labels)
    assert set(est.predict(x)) <= {"left", "right"}


def test_not_fitted():
    with pytest.raises(NotFittedError):
        ConvNetClassifier(spec=SPEC).predict(np.zeros((1, 1, 8, 8)))


def test_class_count_mismatch():
    x, _ = synthetic_separable(30, seed=0)
    with pytest.raises(SpecError):
        ConvNetClassifier(spec=SPEC, epochs=1).fit(x, np.arange(30) % 3)
