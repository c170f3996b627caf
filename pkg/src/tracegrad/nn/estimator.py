"""scikit-learn compatible classifier around the network and training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ..errors import SpecError
from .layers import Dense, LogSoftmax
from .network import NetworkSpec, build_network
from .train import TrainConfig, predict_logits, train


class ConvNetClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained with exact or probed conv gradients.

    ``X`` is ``(n, C, H, W)`` or flattened ``(n, C*H*W)``.  ``spec`` is a
    preset name, a spec dict or a :class:`NetworkSpec`; its last dense layer
    must have one output per class.
    """

    def __init__(self, spec="table2", conv_mode="exact", r=16, sparsity=None, optimizer="adam",
                 lr=0.003, batch_size=64, epochs=5, random_state=0):
        self.spec = spec
        self.conv_mode = conv_mode
        self.r = r
        self.sparsity = sparsity
        self.optimizer = optimizer
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _resolve_spec(self) -> NetworkSpec:
        if isinstance(self.spec, NetworkSpec):
            spec = self.spec
        elif isinstance(self.spec, str):
            spec = NetworkSpec.preset(self.spec)
        else:
            spec = NetworkSpec.from_dict(self.spec)
        return spec.with_conv_mode(self.conv_mode, self.r, self.sparsity)

    def _images(self, X):
        shape = tuple(self.spec_.input)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 2:
            if X.shape[1] != np.prod(shape):
                raise ValueError(f"X has {X.shape[1]} features, network expects {np.prod(shape)}")
            return X.reshape((-1,) + shape)
        if X.shape[1:] != shape:
            raise ValueError(f"X has sample shape {X.shape[1:]}, network expects {shape}")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        self.spec_ = self._resolve_spec()
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        self.net_ = build_network(self.spec_, seed=self.random_state)
        width = next(layer.n_out for layer in reversed(self.net_.layers) if isinstance(layer, Dense))
        if width != len(self.classes_):
            raise SpecError(f"network has {width} outputs for {len(self.classes_)} classes")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        images = self._images(X)
        cfg = TrainConfig(optimizer={"name": self.optimizer, "lr": self.lr}, batch=self.batch_size,
                          epochs=self.epochs, seed=self.random_state)
        self.log_ = train(self.net_, cfg, (images, y_idx, images[:0], y_idx[:0]))
        return self

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        return predict_logits(self.net_, self._images(X))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        if isinstance(self.net_.layers[-1], LogSoftmax):
            return np.exp(logits)
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "net_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]
