"""Sequential networks described by JSON-serializable layer lists.

A spec document looks like::

    {"name": "table2", "input": [1, 28, 28],
     "layers": [{"type": "conv", "kernel": 3, "c_in": 1, "c_out": 16,
                 "mode": "exact"},
                {"type": "relu"}, {"type": "maxpool", "k": 2}, ...]}

Conv ``mode`` is ``"exact"`` or ``{"probed": "multi"|"ortho"|"indep",
"r": int, "sparsity": [p_1, ..., p_cin] | null}``.  Other layer types:
``relu``, ``maxpool``/``avgpool`` (``k``), ``flatten``, ``dense``
(``in``, ``out``), ``log_softmax``, ``dropout`` (``p``).

Audit-only documents (``"audit_only": true``) describe layer shapes of
networks this package does not execute; every layer then carries an
explicit ``in_shape`` (and ``out_shape`` when it differs) and may also use
``batchnorm``.  They are accepted by :mod:`tracegrad.memaudit` only.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ..errors import SpecError
from ..lowmem import MODES
from ..probing import BlockSparsity
from .layers import (AvgPool, Conv2D, Dense, Dropout, Flatten, Layer, LogSoftmax,
                     MaxPool, ReLU, Step, Storage, check_images)

PRESETS = ("table2", "table3", "table4", "resnet18", "squeezenet1_1")


@dataclass
class NetworkSpec:
    input: tuple
    layers: list
    name: str = "network"
    audit_only: bool = False
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> NetworkSpec:
        try:
            layers = [dict(layer) for layer in doc["layers"]]
            spec = cls(tuple(doc.get("input", ())), layers, doc.get("name", "network"),
                       bool(doc.get("audit_only", False)),
                       {k: v for k, v in doc.items()
                        if k not in ("input", "layers", "name", "audit_only")})
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed network spec: {exc}") from exc
        spec.validate()
        return spec

    @classmethod
    def load(cls, path) -> NetworkSpec:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def preset(cls, name: str) -> NetworkSpec:
        if name not in PRESETS:
            raise SpecError(f"unknown preset {name!r}; choose from {PRESETS}")
        text = resources.files("tracegrad.presets").joinpath(f"{name}.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        doc = {"name": self.name, "input": list(self.input), "layers": copy.deepcopy(self.layers)}
        if self.audit_only:
            doc["audit_only"] = True
        doc.update(self.extra)
        return doc

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def validate(self):
        if self.audit_only:
            for i, layer in enumerate(self.layers):
                if "type" not in layer or "in_shape" not in layer:
                    raise SpecError(f"audit-only layer {i} needs 'type' and 'in_shape'")
            return
        shape = tuple(self.input)
        if not shape:
            raise SpecError("spec needs an input shape")
        for i, desc in enumerate(self.layers):
            try:
                shape = make_layer(desc).build(shape, np.random.default_rng(0))
            except SpecError as exc:
                raise SpecError(f"layer {i} ({desc.get('type')}): {exc}") from exc

    def with_conv_mode(self, mode: str, r: int | None = None, sparsity=None) -> NetworkSpec:
        """Copy with every conv layer switched to ``mode`` (``exact`` or a probing mode)."""
        layers = copy.deepcopy(self.layers)
        for layer in layers:
            if layer.get("type") == "conv":
                if mode == "exact":
                    layer["mode"] = "exact"
                else:
                    layer["mode"] = {"probed": mode, "r": r,
                                     "sparsity": list(sparsity) if sparsity else None}
        return NetworkSpec(self.input, layers, self.name, self.audit_only, dict(self.extra))


def conv_mode_of(desc: dict):
    """``(mode, r, sparsity)`` of a conv descriptor."""
    mode = desc.get("mode", "exact")
    if mode == "exact":
        return "exact", None, None
    if isinstance(mode, dict) and "probed" in mode:
        sp = mode.get("sparsity")
        return mode["probed"], mode.get("r"), (BlockSparsity(tuple(sp)) if sp else None)
    raise SpecError(f"bad conv mode {mode!r}")


def make_layer(desc: dict) -> Layer:
    kind = desc.get("type")
    try:
        if kind == "conv":
            mode, r, sp = conv_mode_of(desc)
            return Conv2D(int(desc["kernel"]), int(desc["c_in"]), int(desc["c_out"]), mode, r, sp,
                          bias=bool(desc.get("bias", True)))
        if kind == "relu":
            return ReLU()
        if kind == "maxpool":
            return MaxPool(int(desc["k"]))
        if kind == "avgpool":
            return AvgPool(int(desc["k"]))
        if kind == "flatten":
            return Flatten()
        if kind == "dense":
            return Dense(int(desc["in"]), int(desc["out"]))
        if kind == "log_softmax":
            return LogSoftmax()
        if kind == "dropout":
            return Dropout(float(desc["p"]))
    except KeyError as exc:
        raise SpecError(f"{kind} layer is missing field {exc}") from exc
    except ValueError as exc:
        raise SpecError(str(exc)) from exc
    raise SpecError(f"unknown layer type {kind!r}")


class Network:
    def __init__(self, layers, input_shape, name="network"):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.name = name

    @property
    def conv_layers(self):
        return [layer for layer in self.layers if isinstance(layer, Conv2D)]

    def forward(self, x, step: Step):
        check_images(x, self.input_shape) if len(self.input_shape) == 3 else None
        for layer in self.layers:
            x = layer.forward(x, step)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
            if g is None:
                break
        return g

    def parameters(self):
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                yield (i, name), value

    def gradients(self) -> dict:
        return {(i, name): layer.grads[name]
                for i, layer in enumerate(self.layers) for name in layer.params}

    def get_weights(self) -> dict:
        return {key: value.copy() for key, value in self.parameters()}

    def set_weights(self, weights: dict):
        for (i, name), value in weights.items():
            self.layers[i].params[name][...] = value

    def storage(self) -> list:
        """``(index, kind, Storage)`` for what each layer currently keeps."""
        return [(i, layer.kind, layer.stored()) for i, layer in enumerate(self.layers)]

    def clear(self):
        for layer in self.layers:
            layer.clear()

    def set_conv_mode(self, mode: str, r: int | None = None, sparsity=None):
        """Switch every conv layer to ``mode`` in place, keeping the weights."""
        if mode != "exact" and mode not in MODES:
            raise SpecError(f"unknown conv mode {mode!r}")
        prev = None
        for layer in self.layers:
            if isinstance(layer, Conv2D):
                layer.mode, layer.r = mode, r
                layer.sparsity = sparsity
                if mode == "ortho" and sparsity is None:
                    layer.sparsity = BlockSparsity.uniform(layer.c_in)
                layer.clear()
            elif isinstance(layer, ReLU):
                layer.sign_only = isinstance(prev, Conv2D) and prev.probed
            prev = layer

    def set_dropout(self, enabled: bool):
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.enabled = enabled


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    """Instantiate a spec with seeded weights.

    A ReLU fed directly by a probed conv keeps only sign bits.  The first
    conv skips its input gradient.
    """
    if spec.audit_only:
        raise SpecError(f"spec {spec.name!r} is audit-only and cannot be built")
    rng = np.random.default_rng(seed)
    layers = []
    shape = tuple(spec.input)
    for i, desc in enumerate(spec.layers):
        layer = make_layer(desc)
        if isinstance(layer, ReLU) and layers and isinstance(layers[-1], Conv2D) and layers[-1].probed:
            layer.sign_only = True
        try:
            shape = layer.build(shape, rng)
        except SpecError as exc:
            raise SpecError(f"layer {i} ({desc.get('type')}): {exc}") from exc
        layer.layer_id = i
        layers.append(layer)
    if layers and isinstance(layers[0], Conv2D):
        layers[0].need_input_grad = False
    return Network(layers, spec.input, spec.name)
