"""Training loop, cross-entropy loss and gradient-noise statistics.

Datasets are sample-major ``(n, C, H, W)``; the network sees ``(C, H, W, B)``.
A run is fully determined by ``TrainConfig.seed``: weight init, epoch
shuffles, probe seeds and dropout masks all derive from it.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..csvio import write_csv
from ..errors import DomainError
from .layers import Conv2D, ReLU, Step, log_softmax
from .network import Network
from .optim import cosine_scale, make_optimizer

GRAD_MODES = ("true", "indep", "multi", "ortho")
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def to_batch(x) -> np.ndarray:
    """``(n, C, H, W)`` or ``(n, F)`` samples to network layout."""
    return np.ascontiguousarray(np.moveaxis(np.asarray(x, dtype=np.float64), 0, -1))


@dataclass
class TrainConfig:
    optimizer: dict = field(default_factory=lambda: {"name": "adam", "lr": 0.003})
    batch: int = 64
    epochs: int = 5
    dataset: dict = field(default_factory=lambda: {"name": "mnist", "n_train": 2000, "n_test": 1000})
    seed: int = 0
    schedule: str = "constant"
    probed_lr_scale: float = 1.0

    def __post_init__(self):
        if self.optimizer.get("lr", 0) <= 0:
            raise DomainError(f"learning rate must be positive, got {self.optimizer.get('lr')}")
        if self.batch < 1:
            raise DomainError(f"batch size must be at least 1, got {self.batch}")
        if self.epochs < 0:
            raise DomainError(f"epochs must be non-negative, got {self.epochs}")
        if self.schedule not in ("constant", "cosine"):
            raise DomainError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        known = {k: doc[k] for k in cls.__dataclass_fields__ if k in doc}
        return cls(**known)

    @classmethod
    def load(cls, path) -> TrainConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to ``logits`` ``(K, B)``."""
    labels = np.asarray(labels)
    b = logits.shape[1]
    logp = log_softmax(logits)
    loss = -float(np.mean(logp[labels, np.arange(b)]))
    grad = np.exp(logp)
    grad[labels, np.arange(b)] -= 1.0
    return loss, grad / b


def loss_and_grad(net: Network, x, labels, step: Step):
    """Forward, loss and reverse pass on one batch in network layout.

    Returns ``(loss, gradients)`` keyed like :meth:`Network.parameters`.
    """
    logits = net.forward(x, step)
    loss, g = cross_entropy(logits, labels)
    net.backward(g)
    return loss, net.gradients()


def predict_logits(net: Network, x, batch: int = 256) -> np.ndarray:
    """Eval-mode outputs ``(n, K)`` for sample-major ``x``."""
    out = []
    step = Step(0, 0, train=False)
    for i in range(0, len(x), batch):
        out.append(net.forward(to_batch(x[i:i + batch]), step).T)
    return np.concatenate(out) if out else np.empty((0, 0))


def accuracy(net: Network, x, y) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict_logits(net, x), axis=1) == np.asarray(y)))


@dataclass
class TrainLog:
    rows: list
    header: tuple = ("epoch", "loss", "train_accuracy", "test_accuracy")

    def to_csv(self, path):
        return write_csv(path, self.header, self.rows)

    @property
    def final(self) -> dict:
        return dict(zip(self.header, self.rows[-1])) if self.rows else {}


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train(net: Network, config: TrainConfig, data=None, csv_path=None) -> TrainLog:
    """Train ``net`` in place.

    ``data`` is ``(x_train, y_train, x_test, y_test)``; when omitted it is
    loaded from ``config.dataset``.  Epoch 0 reports the untrained network.
    """
    if data is None:
        from .data import load_dataset
        data = load_dataset(config.dataset)
    x_tr, y_tr, x_te, y_te = data
    opt = make_optimizer(config.optimizer)
    probed = any(layer.probed for layer in net.conv_layers)
    base_scale = config.probed_lr_scale if probed else 1.0
    steps_per_epoch = -(-len(y_tr) // config.batch)
    total = steps_per_epoch * config.epochs
    rows = [(0, float("nan"), accuracy(net, x_tr, y_tr), accuracy(net, x_te, y_te))]
    it = 0
    for epoch in range(1, config.epochs + 1):
        order = _epoch_order(config.seed, epoch, len(y_tr))
        losses = []
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            loss, grads = loss_and_grad(net, to_batch(x_tr[idx]), y_tr[idx], Step(config.seed, it))
            scale = base_scale * (cosine_scale(it, total) if config.schedule == "cosine" else 1.0)
            opt.step(dict(net.parameters()), grads, scale)
            losses.append(loss * len(idx))
            it += 1
        rows.append((epoch, sum(losses) / len(y_tr), accuracy(net, x_tr, y_tr), accuracy(net, x_te, y_te)))
    log = TrainLog(rows)
    if csv_path is not None:
        log.to_csv(csv_path)
    return log


# -- gradient noise -------------------------------------------------------------------

@dataclass
class GradNoiseReport:
    """Per-coefficient mean and std of conv weight gradients over ``m`` minibatches.

    ``stats[(layer_index, mode)]`` is ``(mean, std)`` with the weight's shape.
    """

    stats: dict
    m: int
    batch: int
    r: int | None

    def std_quantiles(self, layer: int, mode: str) -> np.ndarray:
        return np.quantile(self.stats[(layer, mode)][1], QUANTILES)

    def median_std(self, layer: int, mode: str) -> float:
        return float(np.median(self.stats[(layer, mode)][1]))

    def rows(self):
        for (layer, mode), (mean, std) in self.stats.items():
            for q, v in zip(QUANTILES, np.quantile(std, QUANTILES)):
                yield (layer, mode, self.batch, self.r, "std_q%02d" % round(100 * q), v)
            yield (layer, mode, self.batch, self.r, "std_mean", float(np.mean(std)))
            yield (layer, mode, self.batch, self.r, "abs_mean_median", float(np.median(np.abs(mean))))

    header = ("layer", "mode", "batch", "r", "statistic", "value")

    def to_csv(self, path):
        return write_csv(path, self.header, [(l, m, b, "" if r is None else r, s, v)
                                             for l, m, b, r, s, v in self.rows()])


def grad_noise_study(net: Network, x, y, modes=GRAD_MODES, m: int = 40, batch: int = 64,
                     r: int | None = 16, seed: int = 0, sparsity=None,
                     batch_indices=None) -> GradNoiseReport:
    """Spread of conv weight gradients across minibatches, for each gradient mode.

    Every mode sees the same ``m`` minibatches (drawn without replacement
    within each batch) at the current weights.  Probed modes draw fresh
    probes per minibatch.  ``batch_indices`` overrides the draw.  The
    network's conv modes are restored afterwards.
    """
    if m < 2:
        raise DomainError(f"gradient noise needs at least 2 minibatches, got {m}")
    for mode in modes:
        if mode not in GRAD_MODES:
            raise DomainError(f"unknown gradient mode {mode!r}")
    if batch_indices is None:
        rng = np.random.default_rng([seed, 0x6E6F69])
        batch_indices = [rng.choice(len(y), size=batch, replace=False) for _ in range(m)]
    if len(batch_indices) != m:
        raise DomainError(f"expected {m} minibatches, got {len(batch_indices)}")
    conv_idx = [i for i, layer in enumerate(net.layers) if isinstance(layer, Conv2D)]
    saved = [(net.layers[i].mode, net.layers[i].r, net.layers[i].sparsity) for i in conv_idx]
    stats = {}
    try:
        for mode in modes:
            net.set_conv_mode("exact" if mode == "true" else mode, None if mode == "true" else r,
                              sparsity)
            samples = {i: [] for i in conv_idx}
            for t, idx in enumerate(batch_indices):
                _, grads = loss_and_grad(net, to_batch(x[idx]), np.asarray(y)[idx], Step(seed, t))
                for i in conv_idx:
                    samples[i].append(grads[(i, "w")].copy())
            for i in conv_idx:
                arr = np.stack(samples[i])
                stats[(i, mode)] = (arr.mean(axis=0), arr.std(axis=0, ddof=1))
    finally:
        for i, (mode, rr, sp) in zip(conv_idx, saved):
            layer = net.layers[i]
            layer.mode, layer.r, layer.sparsity = mode, rr, sp
        _restore_relu_signs(net)
    return GradNoiseReport(stats, m, batch, r)


def _restore_relu_signs(net: Network):
    prev = None
    for layer in net.layers:
        if isinstance(layer, ReLU):
            layer.sign_only = isinstance(prev, Conv2D) and prev.probed
        prev = layer
