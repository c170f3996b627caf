"""Network layers operating on ``(C, H, W, B)`` images and ``(F, B)`` features.

Each layer records what it keeps for its backward pass so that storage can
be audited after a forward step (:meth:`Layer.stored`).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionError, SpecError
from ..lowmem import MODES, compress_array, draw_probes, probed_grad_array
from ..probing import BlockSparsity, ProbeSeed, derive_stream, uniform
from ..shiftconv import (KernelOffsetMap, conv_forward_array, grad_input_array,
                         grad_weights_array)
from ..tensor import ImageShape

_DROPOUT_PURPOSE = 3


@dataclass(frozen=True)
class Step:
    """Per-iteration context: run seed, global iteration and train/eval flag."""

    seed: int
    iteration: int
    train: bool = True


@dataclass(frozen=True)
class Storage:
    scalars: int = 0
    nbytes: int = 0


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}
        self.layer_id = 0
        self.in_shape = None
        self.out_shape = None

    def build(self, in_shape: tuple, rng) -> tuple:
        self.in_shape = tuple(in_shape)
        self.out_shape = self._out_shape(self.in_shape)
        return self.out_shape

    def _out_shape(self, in_shape):
        return in_shape

    def forward(self, x, step: Step):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def stored(self) -> Storage:
        return Storage()

    def clear(self):
        pass

    def __repr__(self):
        return f"{type(self).__name__}{self.in_shape}->{self.out_shape}"


def _image_shape(in_shape, kind):
    if len(in_shape) != 3:
        raise SpecError(f"{kind} expects a (C, H, W) input, got {in_shape}")
    return in_shape


class Conv2D(Layer):
    """Circular-padding convolution with exact or probed weight gradients.

    ``mode`` is ``exact`` or one of ``multi``, ``ortho``, ``indep``.
    """

    kind = "conv"

    def __init__(self, k, c_in, c_out, mode="exact", r=None, sparsity=None, bias=True):
        super().__init__()
        if mode != "exact" and mode not in MODES:
            raise SpecError(f"unknown conv mode {mode!r}")
        if mode != "exact" and (r is None or r < 1):
            raise SpecError("probed conv needs r >= 1")
        self.offset_map = KernelOffsetMap(k)
        self.c_in, self.c_out = c_in, c_out
        self.mode, self.r = mode, r
        self.sparsity = sparsity
        self.bias = bias
        self.need_input_grad = True
        self._saved = None

    def _out_shape(self, in_shape):
        c, h, w = _image_shape(in_shape, "conv")
        if c != self.c_in:
            raise SpecError(f"conv expects {self.c_in} input channels, got {c}")
        return (self.c_out, h, w)

    def build(self, in_shape, rng):
        out = super().build(in_shape, rng)
        self.shape = ImageShape(in_shape[1], in_shape[2])
        fan_in = self.c_in * self.offset_map.n_w
        bound = np.sqrt(6.0 / fan_in)
        self.params["w"] = rng.uniform(-bound, bound, (self.c_out, self.c_in, self.offset_map.n_w))
        if self.bias:
            self.params["b"] = np.zeros(self.c_out)
        if self.mode == "ortho" and self.sparsity is None:
            self.sparsity = BlockSparsity.uniform(self.c_in)
        if self.sparsity is not None and len(self.sparsity.probs) != self.c_in:
            raise SpecError(f"sparsity lists {len(self.sparsity.probs)} probabilities for {self.c_in} channels")
        return out

    @property
    def probed(self) -> bool:
        return self.mode != "exact"

    def _probe_seed(self, step: Step) -> ProbeSeed:
        return ProbeSeed(step.seed, derive_stream(self.layer_id, step.iteration))

    def _probes(self, seed):
        return draw_probes(self.mode, self.shape.n, self.c_in, self.c_out, self.r, seed,
                           self.sparsity)

    def forward(self, x, step):
        w = self.params["w"]
        y = conv_forward_array(x, w, self.offset_map.offsets)
        if self.bias:
            y += self.params["b"][:, None, None, None]
        if step.train:
            if self.probed:
                seed = self._probe_seed(step)
                c, h, wd, b = x.shape
                xbar = compress_array(x.reshape(c, h * wd, b), self._probes(seed))
                self._saved = ("probed", xbar, seed, b)
            else:
                self._saved = ("exact", x)
        return y

    def backward(self, g):
        if self._saved is None:
            raise RuntimeError("backward called without a training forward pass")
        offsets = self.offset_map.offsets
        if self._saved[0] == "exact":
            self.grads["w"] = grad_weights_array(self._saved[1], g, offsets)
        else:
            _, xbar, seed, b = self._saved
            dy = g.reshape(self.c_out, self.shape.n, b)
            self.grads["w"] = probed_grad_array(xbar, self._probes(seed), dy, self.shape, offsets)
        if self.bias:
            self.grads["b"] = g.sum(axis=(1, 2, 3))
        self._saved = None
        if not self.need_input_grad:
            return None
        return grad_input_array(g, self.params["w"], offsets)

    def stored(self):
        if self._saved is None:
            return Storage()
        arr = self._saved[1]
        return Storage(int(arr.size), int(arr.nbytes))

    def clear(self):
        self._saved = None


class ReLU(Layer):
    """Rectifier; with ``sign_only`` it keeps one bit per activation."""

    kind = "relu"

    def __init__(self, sign_only=False):
        super().__init__()
        self.sign_only = sign_only
        self._saved = None

    def forward(self, x, step):
        out = np.maximum(x, 0.0)
        if step.train:
            if self.sign_only:
                self._saved = (np.packbits(x > 0, axis=None), x.shape)
            else:
                self._saved = out
        return out

    def backward(self, g):
        if self.sign_only:
            bits, shape = self._saved
            mask = np.unpackbits(bits, count=int(np.prod(shape))).reshape(shape).astype(bool)
        else:
            mask = self._saved > 0
        self._saved = None
        return g * mask

    def stored(self):
        if self._saved is None:
            return Storage()
        if self.sign_only:
            return Storage(0, int(self._saved[0].nbytes))
        return Storage(int(self._saved.size), int(self._saved.nbytes))

    def clear(self):
        self._saved = None


def _pool_windows(x, k):
    c, h, w, b = x.shape
    ho, wo = h // k, w // k
    xc = x[:, :ho * k, :wo * k, :].reshape(c, ho, k, wo, k, b)
    return xc.transpose(0, 1, 3, 5, 2, 4).reshape(c, ho, wo, b, k * k)


def _unpool(win_grad, k, in_shape):
    c, ho, wo, b, _ = win_grad.shape
    g = win_grad.reshape(c, ho, wo, b, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(c, ho * k, wo * k, b)
    out = np.zeros((c,) + tuple(in_shape[1:3]) + (b,), dtype=win_grad.dtype)
    out[:, :ho * k, :wo * k, :] = g
    return out


class MaxPool(Layer):
    """Non-overlapping max pooling (floor); keeps the argmax index of each window."""

    kind = "maxpool"

    def __init__(self, k):
        super().__init__()
        self.k = k
        self._idx = None

    def _out_shape(self, in_shape):
        c, h, w = _image_shape(in_shape, "maxpool")
        if h < self.k or w < self.k:
            raise SpecError(f"maxpool {self.k} does not fit a {h}x{w} input")
        return (c, h // self.k, w // self.k)

    def forward(self, x, step):
        win = _pool_windows(x, self.k)
        idx = np.argmax(win, axis=-1)
        if step.train:
            self._idx = idx
        return np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(self, g):
        idx = self._idx
        win = np.zeros(g.shape + (self.k * self.k,), dtype=g.dtype)
        np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
        self._idx = None
        return _unpool(win, self.k, self.in_shape)

    def stored(self):
        if self._idx is None:
            return Storage()
        return Storage(int(self._idx.size), int(self._idx.nbytes))

    def clear(self):
        self._idx = None


class AvgPool(Layer):
    kind = "avgpool"

    def __init__(self, k):
        super().__init__()
        self.k = k

    def _out_shape(self, in_shape):
        c, h, w = _image_shape(in_shape, "avgpool")
        if h < self.k or w < self.k:
            raise SpecError(f"avgpool {self.k} does not fit a {h}x{w} input")
        return (c, h // self.k, w // self.k)

    def forward(self, x, step):
        return _pool_windows(x, self.k).mean(axis=-1)

    def backward(self, g):
        win = np.repeat(g[..., None] / (self.k * self.k), self.k * self.k, axis=-1)
        return _unpool(win, self.k, self.in_shape)


class Flatten(Layer):
    kind = "flatten"

    def _out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, step):
        return x.reshape(-1, x.shape[-1])

    def backward(self, g):
        return g.reshape(self.in_shape + (g.shape[-1],))


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in, n_out):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self._x = None

    def _out_shape(self, in_shape):
        if in_shape != (self.n_in,):
            raise SpecError(f"dense expects ({self.n_in},) input, got {in_shape}")
        return (self.n_out,)

    def build(self, in_shape, rng):
        out = super().build(in_shape, rng)
        bound = 1.0 / np.sqrt(self.n_in)
        self.params["w"] = rng.uniform(-bound, bound, (self.n_out, self.n_in))
        self.params["b"] = np.zeros(self.n_out)
        return out

    def forward(self, x, step):
        if step.train:
            self._x = x
        return self.params["w"] @ x + self.params["b"][:, None]

    def backward(self, g):
        x = self._x
        self.grads["w"] = g @ x.T
        self.grads["b"] = g.sum(axis=1)
        self._x = None
        return self.params["w"].T @ g

    def stored(self):
        if self._x is None:
            return Storage()
        return Storage(int(self._x.size), int(self._x.nbytes))

    def clear(self):
        self._x = None


def log_softmax(x, axis=0):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


class LogSoftmax(Layer):
    kind = "log_softmax"

    def __init__(self):
        super().__init__()
        self._out = None

    def _out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise SpecError(f"log_softmax expects a feature vector, got {in_shape}")
        return in_shape

    def forward(self, x, step):
        out = log_softmax(x)
        if step.train:
            self._out = out
        return out

    def backward(self, g):
        out = self._out
        self._out = None
        return g - np.exp(out) * g.sum(axis=0, keepdims=True)

    def stored(self):
        if self._out is None:
            return Storage()
        return Storage(int(self._out.size), int(self._out.nbytes))

    def clear(self):
        self._out = None


class Dropout(Layer):
    """Inverted dropout with a per-layer, per-iteration seeded mask."""

    kind = "dropout"

    def __init__(self, p):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise SpecError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.enabled = True
        self._mask = None

    def forward(self, x, step):
        if not (step.train and self.enabled) or self.p == 0.0:
            self._mask = None
            return x
        seed = ProbeSeed(step.seed, derive_stream(self.layer_id, step.iteration))
        keep = uniform(seed, x.shape, purpose=_DROPOUT_PURPOSE) >= self.p
        self._mask = np.packbits(keep, axis=None), x.shape
        return x * keep / (1.0 - self.p)

    def backward(self, g):
        if self._mask is None:
            return g
        bits, shape = self._mask
        keep = np.unpackbits(bits, count=int(np.prod(shape))).reshape(shape).astype(bool)
        self._mask = None
        return g * keep / (1.0 - self.p)

    def stored(self):
        if self._mask is None:
            return Storage()
        return Storage(0, int(self._mask[0].nbytes))

    def clear(self):
        self._mask = None


def check_images(x, shape):
    if x.ndim != 4 or tuple(x.shape[:3]) != tuple(shape):
        raise DimensionError(f"expected (C, H, W, B) input with (C, H, W) = {shape}, got {x.shape}")
