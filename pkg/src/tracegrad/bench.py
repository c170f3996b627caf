"""Wall-clock comparison of exact and probed conv weight-gradient passes.

Results split into a deterministic part (configuration, probed-gradient
error, sketch size) and a timing part that varies run to run.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from itertools import product

import numpy as np

from .gradcheck import probed_gradient, random_instance, relative_error
from .lowmem import compress_array, draw_probes
from .probing import ProbeSeed
from .shiftconv import grad_weights_array


@dataclass(frozen=True)
class BenchCase:
    size: int
    batch: int
    channels: int
    r: int
    mode: str
    rel_error: float
    stored_exact: int
    stored_probed: int
    exact_seconds: float
    probed_seconds: float

    grid_header = ("size", "batch", "channels", "r", "mode", "rel_error", "stored_exact",
                   "stored_probed")
    timing_header = ("size", "batch", "channels", "r", "mode", "exact_seconds", "probed_seconds",
                     "speedup")

    def grid_row(self):
        return (self.size, self.batch, self.channels, self.r, self.mode, self.rel_error,
                self.stored_exact, self.stored_probed)

    def timing_row(self):
        return (self.size, self.batch, self.channels, self.r, self.mode, self.exact_seconds,
                self.probed_seconds, self.exact_seconds / self.probed_seconds)


def _median_time(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run(sizes, batches, channels, rs, mode="ortho", k=3, repeats=5, warmup=1, seed=0):
    """One :class:`BenchCase` per grid point.

    The probed timing covers drawing the probes, sketching the input and
    the estimate; the exact timing covers the shift-and-dot gradient from
    the stored input.
    """
    cases = []
    for size, b, c, r in product(sizes, batches, channels, rs):
        inst = random_instance(size, size, c, c, k, b, seed)
        ps = ProbeSeed(seed, 0)
        n = size * size
        exact = inst.exact
        est = probed_gradient(inst, mode, r, ps)
        xbar = compress_array(inst.x.reshape(c, n, b), draw_probes(mode, n, c, c, r, ps))
        offsets = inst.offset_map.offsets
        t_exact = _median_time(lambda: grad_weights_array(inst.x, inst.dy, offsets), repeats, warmup)
        t_probed = _median_time(lambda: probed_gradient(inst, mode, r, ps), repeats, warmup)
        cases.append(BenchCase(size, b, c, r, mode, relative_error(est, exact), inst.x.size,
                               int(xbar.size), t_exact, t_probed))
    return cases
