"""Static activation-memory accounting for layer stacks, conventional vs. probed.

Only activations kept for the backward pass are counted: no weights,
optimizer state or workspace.  Rules per layer, with ``B`` the batch and
``e`` the element width in bytes:

* conv: input ``N * C_in * B`` elements; probed keeps ``min(r, N * C_in) * B``
  (times ``C_in * C_out`` for independent per-pair probing).
* relu: output ``N * C * B`` elements; when fed directly by a probed conv,
  one sign bit per element, rounded up to whole bytes.
* maxpool: one argmax index per output element (``index_bytes`` each).
* batchnorm, dense: their input.  log_softmax: its output.
* dropout: one mask bit per element, rounded up to whole bytes.
* avgpool, flatten, add, concat: nothing.

Scalar equivalents are bytes divided by ``e``.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np

from .csvio import write_csv
from .errors import DomainError, SpecError
from .lowmem import MODES, memory_footprint
from .nn.network import NetworkSpec, make_layer

NOTE = "activations kept for the backward pass only; weights, optimizer state and workspace excluded"


@dataclass(frozen=True)
class MemoryRow:
    index: int
    name: str
    kind: str
    in_shape: tuple
    conventional_bytes: int
    probed_bytes: int
    element_bytes: int

    @property
    def conventional_scalars(self) -> float:
        return self.conventional_bytes / self.element_bytes

    @property
    def probed_scalars(self) -> float:
        return self.probed_bytes / self.element_bytes

    @property
    def factor(self) -> float:
        if self.probed_bytes == 0:
            return 1.0 if self.conventional_bytes == 0 else float("inf")
        return self.conventional_bytes / self.probed_bytes


@dataclass(frozen=True)
class MemoryReport:
    rows: tuple
    batch: int
    r: int
    element_bytes: int
    index_bytes: int
    mode: str
    note: str = NOTE

    @property
    def conventional_bytes(self) -> int:
        return sum(row.conventional_bytes for row in self.rows)

    @property
    def probed_bytes(self) -> int:
        return sum(row.probed_bytes for row in self.rows)

    @property
    def factor(self) -> float:
        return self.conventional_bytes / self.probed_bytes if self.probed_bytes else float("inf")

    def conv_rows(self):
        return [row for row in self.rows if row.kind == "conv"]

    header = ("index", "layer", "kind", "in_shape", "conventional_bytes", "probed_bytes",
              "conventional_scalars", "probed_scalars", "factor")

    def csv_rows(self):
        for row in self.rows:
            yield (row.index, row.name, row.kind, "x".join(map(str, row.in_shape)),
                   row.conventional_bytes, row.probed_bytes, row.conventional_scalars,
                   row.probed_scalars, row.factor)
        yield ("", "total", "", "", self.conventional_bytes, self.probed_bytes,
               self.conventional_bytes / self.element_bytes,
               self.probed_bytes / self.element_bytes, self.factor)

    def to_csv(self, path):
        return write_csv(path, self.header, self.csv_rows())


def _bits(count: int) -> int:
    return -(-count // 8)


def _shapes(spec: NetworkSpec):
    """``(desc, in_shape, out_shape)`` per layer."""
    if spec.audit_only:
        for desc in spec.layers:
            in_shape = tuple(desc["in_shape"])
            yield desc, in_shape, tuple(desc.get("out_shape", in_shape))
        return
    shape = tuple(spec.input)
    for desc in spec.layers:
        out = make_layer(desc).build(shape, np.random.default_rng(0))
        yield desc, shape, tuple(out)
        shape = out


def audit(spec: NetworkSpec, batch: int, r: int, element_bytes: int = 4, index_bytes: int = 8,
          mode: str = "ortho") -> MemoryReport:
    """Per-layer activation storage of ``spec`` with every conv in ``mode``."""
    if batch < 1 or r < 1:
        raise DomainError(f"batch and r must be positive, got batch={batch}, r={r}")
    if element_bytes < 1 or index_bytes < 1:
        raise DomainError("element and index widths must be positive")
    if mode not in MODES:
        raise DomainError(f"unknown probing mode {mode!r}")
    rows = []
    prev = None
    for i, (desc, in_shape, out_shape) in enumerate(_shapes(spec)):
        kind = desc.get("type")
        n_in, n_out = prod(in_shape) * batch, prod(out_shape) * batch
        if kind == "conv":
            c_in, pixels = in_shape[0], prod(in_shape[1:])
            fp = memory_footprint(pixels, c_in, min(r, pixels * c_in), batch, mode,
                                  int(desc.get("c_out", out_shape[0])))
            conv, probed = fp.conventional * element_bytes, fp.probed * element_bytes
        elif kind == "relu":
            conv = n_out * element_bytes
            probed = _bits(n_out) if prev == "conv" else conv
        elif kind == "maxpool":
            conv = probed = n_out * index_bytes
        elif kind in ("batchnorm", "dense"):
            conv = probed = n_in * element_bytes
        elif kind == "log_softmax":
            conv = probed = n_out * element_bytes
        elif kind == "dropout":
            conv = probed = _bits(n_out)
        elif kind in ("avgpool", "flatten", "add", "concat"):
            conv = probed = 0
        else:
            raise SpecError(f"layer {i}: no accounting rule for type {kind!r}")
        rows.append(MemoryRow(i, desc.get("name", f"{kind}{i}"), kind, tuple(in_shape),
                              int(conv), int(probed), element_bytes))
        prev = kind
    return MemoryReport(tuple(rows), batch, r, element_bytes, index_bytes, mode)
