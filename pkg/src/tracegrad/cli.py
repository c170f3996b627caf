"""``tracegrad`` command line: seeded experiments with CSV output.

Every run writes its CSV files plus ``manifest.json`` into ``--out``
(default ``$TRACEGRAD_OUT`` or ``./tracegrad-out``).  ``tracegrad replay
manifest.json`` re-runs from the recorded configuration.

Exit codes: 0 success, 1 a checked property failed, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, bench, bounds, gradcheck, memaudit
from .csvio import write_csv
from .errors import DatasetMissingError, TraceGradError
from .probing import BlockSparsity
from .trace import (BlockLinearMap, LinearMap, crosstalk_blocks, estimator_error_stats,
                    exact_block_traces, locate_phase_transition, matrix_family, sparse_block_map)

SUITE = ("identity", "diagonal", "rank1", "symmetric", "gaussian")
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# -- argument types -----------------------------------------------------------------

def positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def unit_interval(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {value}")
    return value


def int_grid(text):
    """``a..b`` (powers of two from a to b) or a comma list of positive integers."""
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            if lo < 1 or hi < lo:
                raise ValueError
            grid, r = [], lo
            while r <= hi:
                grid.append(r)
                r *= 2
        else:
            grid = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}; use 'a..b' or 'a,b,c'") from None
    if not grid or min(grid) < 1:
        raise argparse.ArgumentTypeError(f"grid values must be at least 1, got {text!r}")
    return grid


# -- subcommands ----------------------------------------------------------------------

def cmd_trace_bench(cfg, out: Path):
    rng = np.random.default_rng(cfg.seed)
    if cfg.matrix == "block-crosstalk":
        blocks = crosstalk_blocks(cfg.blocks, cfg.dim, rng)
        a, exact = sparse_block_map(blocks), exact_block_traces(blocks)
        estimator = cfg.estimator if cfg.estimator != "hutchinson" else "ortho"
        sp = BlockSparsity.uniform(cfg.blocks, cfg.p) if estimator == "ortho" else None
        stats = estimator_error_stats(a, exact, estimator, cfg.r, cfg.trials, cfg.seed, sp,
                                      aggregate="median")
    else:
        dense = matrix_family(cfg.matrix, cfg.dim, rng)
        if cfg.estimator == "hutchinson":
            a, exact = LinearMap.from_dense(dense), float(np.trace(dense))
            stats = estimator_error_stats(a, exact, "hutchinson", cfg.r, cfg.trials, cfg.seed)
        else:
            blocks = dense.reshape(1, 1, cfg.dim, cfg.dim)
            a, exact = BlockLinearMap.from_blocks(blocks), exact_block_traces(blocks)
            stats = estimator_error_stats(a, exact, cfg.estimator, cfg.r, cfg.trials, cfg.seed)
    written = [write_csv(out / "trace_bench.csv", ("r", "mean_abs_error", "std_abs_error",
                                                   "median_abs_error"), stats.rows())]
    summary = [("slope", stats.slope)]
    if len(cfg.r) >= 5 and np.all(stats.median_abs > 0):
        pt = locate_phase_transition(stats.r_grid, stats.median_abs)
        summary += [("phase_transition_r", pt.r), ("left_slope", pt.left_slope),
                     ("right_slope", pt.right_slope), ("f_stat", pt.f_stat),
                     ("significant", pt.significant)]
    written.append(write_csv(out / "trace_summary.csv", ("statistic", "value"), summary))
    print(f"slope {stats.slope:.4f}")
    return 0, written


def cmd_grad_check(cfg, out: Path):
    inst = gradcheck.random_instance(cfg.size, cfg.size, cfg.channels, cfg.channels, cfg.kernel,
                                     cfg.batch, cfg.seed)
    fd = gradcheck.finite_difference_check(inst)
    oracle = (gradcheck.relative_error(inst.exact, gradcheck.dense_trace_gradient(inst))
              if cfg.size * cfg.size <= 64 else float("nan"))
    ok = fd <= 1e-6 and not oracle > 1e-12
    rows = []
    modes = ("multi", "ortho", "indep") if cfg.mode == "all" else (() if cfg.mode == "exact" else (cfg.mode,))
    for mode in modes:
        res = gradcheck.monte_carlo_unbiasedness(inst, mode, cfg.r, cfg.trials, cfg.seed)
        ok &= res.passes(4.0)
        for idx in np.ndindex(*res.exact.shape):
            rows.append((mode,) + idx + (res.exact[idx], res.mean[idx], res.se[idx], res.z[idx]))
        print(f"{mode}: max |z| = {res.max_abs_z:.3f}")
    print(f"finite differences: max rel. error {fd:.3e}")
    print(f"dense trace oracle: max rel. error {oracle:.3e}")
    written = [write_csv(out / "grad_check.csv",
                         ("mode", "c_out", "c_in", "offset", "exact", "mc_mean", "se", "z"), rows),
               write_csv(out / "grad_check_summary.csv", ("check", "value"),
                         [("finite_difference_rel_error", fd), ("dense_oracle_rel_error", oracle),
                          ("pass", ok)])]
    print("PASS" if ok else "FAIL")
    return (0 if ok else 1), written


def cmd_bound_check(cfg, out: Path):
    rng = np.random.default_rng(cfg.seed)
    rows, ok = [], True
    if cfg.kind == "prop1":
        for name in SUITE:
            a = matrix_family(name, cfg.dim, rng)
            for r in cfg.r:
                cov = bounds.coverage_test(a, cfg.delta, r, cfg.trials, cfg.seed)
                ok &= cov.passes(3.0)
                rows.append((name, r, cfg.delta, cov.bound, cov.failure_rate, cov.binomial_se,
                             cov.passes(3.0)))
        header = ("matrix", "r", "delta", "bound", "failure_rate", "binomial_se", "pass")
    else:
        blocks = crosstalk_blocks(cfg.blocks, cfg.dim, rng)
        sp = BlockSparsity.uniform(cfg.blocks, cfg.p)
        for r in cfg.r:
            c, cov = bounds.fit_thm2_constant(blocks, sp, r, cfg.delta, cfg.trials, cfg.seed)
            rows.append(("block-crosstalk", r, cfg.delta, c, cov.failure_rate, cov.binomial_se))
        header = ("matrix", "r", "delta", "fitted_c", "failure_rate", "binomial_se")
    written = [write_csv(out / "bound_check.csv", header, rows)]
    print("PASS" if ok else "FAIL")
    return (0 if ok else 1), written


def cmd_train(cfg, out: Path):
    from .nn import NetworkSpec, TrainConfig, build_network, grad_noise_study, train
    from .nn.data import load_dataset
    spec = NetworkSpec.from_dict(cfg.spec_doc)
    if cfg.mode is not None:
        spec = spec.with_conv_mode(cfg.mode, cfg.r)
    tc = TrainConfig.from_dict(cfg.config_doc)
    data = load_dataset(tc.dataset)
    net = build_network(spec, seed=tc.seed)
    log = train(net, tc, data)
    written = [log.to_csv(out / "train_log.csv")]
    print("final test accuracy %.4f" % log.final["test_accuracy"])
    if cfg.grad_noise:
        x_tr, y_tr = data[0], data[1]
        reports = []
        for i, r in enumerate(cfg.noise_r):
            # the true gradient does not depend on r, so it is measured once
            modes = [m for m in cfg.noise_modes if m != "true" or i == 0]
            if modes:
                reports.append(grad_noise_study(net, x_tr, y_tr, modes, m=cfg.noise_m,
                                                batch=cfg.noise_batch, r=r, seed=tc.seed))
        rows = [row for rep in reports for row in rep.rows()]
        written.append(write_csv(out / "grad_noise.csv",
                                 ("layer", "mode", "batch", "r", "statistic", "value"),
                                 [(l, m, b, "" if m == "true" else r, s, v)
                                  for l, m, b, r, s, v in rows]))
    return 0, written


def cmd_mem_report(cfg, out: Path):
    from .nn import NetworkSpec
    spec = NetworkSpec.from_dict(cfg.spec_doc)
    rep = memaudit.audit(spec, cfg.batch, cfg.r, cfg.element_bytes, cfg.index_bytes, cfg.mode)
    print(f"{spec.name}: conventional {rep.conventional_bytes} B, probed {rep.probed_bytes} B, "
          f"factor {rep.factor:.4f} ({rep.note})")
    return 0, [rep.to_csv(out / "mem_report.csv")]


def cmd_perf_bench(cfg, out: Path):
    cases = bench.run(cfg.sizes, cfg.batches, cfg.channels, cfg.r, cfg.mode, cfg.kernel,
                      cfg.repeats, cfg.warmup, cfg.seed)
    grid = write_csv(out / "perf_grid.csv", bench.BenchCase.grid_header, [c.grid_row() for c in cases])
    timing = write_csv(out / "perf_timings.csv", bench.BenchCase.timing_header,
                       [c.timing_row() for c in cases])
    for c in cases:
        print(f"N={c.size}x{c.size} B={c.batch} C={c.channels} r={c.r}: "
              f"exact {c.exact_seconds:.2e}s probed {c.probed_seconds:.2e}s")
    return 0, [grid, timing]


HANDLERS = {
    "trace-bench": cmd_trace_bench,
    "grad-check": cmd_grad_check,
    "bound-check": cmd_bound_check,
    "train": cmd_train,
    "mem-report": cmd_mem_report,
    "perf-bench": cmd_perf_bench,
}
# outputs that hold wall-clock measurements and so differ between runs
TIMING_OUTPUTS = ("perf_timings.csv",)


# -- parser -----------------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=positive_int, default=1,
                   help="BLAS threads; 1 gives bit-exact reruns")
    p.add_argument("--out", default=None, help="output directory (env TRACEGRAD_OUT)")


def _spec_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="network spec JSON file")
    g.add_argument("--preset", help="shipped network spec name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracegrad", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("trace-bench", help="trace estimator error versus probe count")
    p.add_argument("--matrix", default="gaussian", choices=SUITE + ("asymmetric", "block-crosstalk"))
    p.add_argument("--dim", type=positive_int, default=64, help="matrix or block size")
    p.add_argument("--blocks", type=positive_int, default=16, help="channels for block-crosstalk")
    p.add_argument("--r", type=int_grid, default=int_grid("16..4096"))
    p.add_argument("--trials", type=positive_int, default=200)
    p.add_argument("--estimator", default="hutchinson", choices=("hutchinson", "naive", "ortho"))
    p.add_argument("--p", type=float, default=None, help="block keep probability (ortho)")
    _common(p)

    p = sub.add_parser("grad-check", help="unbiasedness and finite-difference suites")
    p.add_argument("--size", type=positive_int, default=8, help="image height and width")
    p.add_argument("--channels", type=positive_int, default=2)
    p.add_argument("--kernel", type=positive_int, default=3)
    p.add_argument("--batch", type=positive_int, default=4)
    p.add_argument("--r", type=positive_int, default=16)
    p.add_argument("--trials", type=positive_int, default=2000)
    p.add_argument("--mode", default="all", choices=("all", "exact", "multi", "ortho", "indep"))
    _common(p)

    p = sub.add_parser("bound-check", help="empirical coverage of deviation bounds")
    p.add_argument("--kind", default="prop1", choices=("prop1", "thm2"))
    p.add_argument("--dim", type=positive_int, default=32)
    p.add_argument("--blocks", type=positive_int, default=4)
    p.add_argument("--p", type=float, default=None)
    p.add_argument("--r", type=int_grid, default=[16, 64, 256])
    p.add_argument("--delta", type=unit_interval, default=0.1)
    p.add_argument("--trials", type=positive_int, default=2000)
    _common(p)

    p = sub.add_parser("train", help="train a network from spec and config files")
    _spec_args(p)
    p.add_argument("--config", help="training config JSON file")
    p.add_argument("--mode", choices=("exact", "multi", "ortho", "indep"), default=None,
                   help="override every conv layer's gradient mode")
    p.add_argument("--r", type=positive_int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=positive_int, default=None)
    p.add_argument("--grad-noise", action="store_true", help="run the gradient-noise study after training")
    p.add_argument("--noise-m", type=positive_int, default=40)
    p.add_argument("--noise-batch", type=positive_int, default=64)
    p.add_argument("--noise-r", type=int_grid, default=[16])
    p.add_argument("--noise-modes", default="true,indep,multi,ortho")
    _common(p)

    p = sub.add_parser("mem-report", help="per-layer activation memory table")
    _spec_args(p)
    p.add_argument("--batch", type=positive_int, default=64)
    p.add_argument("--r", type=positive_int, default=16)
    p.add_argument("--element-bytes", type=positive_int, default=4)
    p.add_argument("--index-bytes", type=positive_int, default=8)
    p.add_argument("--mode", default="ortho", choices=("multi", "ortho", "indep"))
    _common(p)

    p = sub.add_parser("perf-bench", help="exact vs probed weight-gradient wall time")
    p.add_argument("--sizes", type=int_grid, default=[16, 32])
    p.add_argument("--batches", type=int_grid, default=[8])
    p.add_argument("--channels", type=int_grid, default=[4, 16])
    p.add_argument("--r", type=int_grid, default=[16, 64])
    p.add_argument("--kernel", type=positive_int, default=3)
    p.add_argument("--mode", default="ortho", choices=("multi", "ortho", "indep"))
    p.add_argument("--repeats", type=positive_int, default=5)
    p.add_argument("--warmup", type=int, default=1)
    _common(p)

    p = sub.add_parser("replay", help="re-run a recorded manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="output directory (default: the manifest's)")
    p.add_argument("--threads", type=positive_int, default=1)
    return parser


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from exc


def resolve(args) -> dict:
    """Self-contained configuration of a run: flags plus inlined spec/config documents."""
    cfg = {k: v for k, v in vars(args).items() if k not in ("out", "threads")}
    if "spec" in cfg:
        from .nn import NetworkSpec
        spec = (NetworkSpec.preset(cfg.pop("preset")) if cfg.get("preset")
                else NetworkSpec.from_dict(_load_json(cfg["spec"], "spec")))
        cfg.pop("spec", None)
        cfg.pop("preset", None)
        cfg["spec_doc"] = spec.to_dict()
    if args.command == "train":
        doc = _load_json(cfg.pop("config"), "config") if cfg.get("config") else {}
        cfg.pop("config", None)
        if cfg.pop("epochs") is not None:
            doc["epochs"] = args.epochs
        if cfg.pop("batch") is not None:
            doc["batch"] = args.batch
        doc.setdefault("seed", args.seed)
        from .nn import TrainConfig
        cfg["config_doc"] = TrainConfig.from_dict(doc).to_dict()
        modes = tuple(m for m in cfg["noise_modes"].split(",") if m)
        bad = [m for m in modes if m not in ("true", "indep", "multi", "ortho")]
        if bad or not modes:
            raise UsageError(f"bad --noise-modes {cfg['noise_modes']!r}")
        cfg["noise_modes"] = list(modes)
        if cfg["mode"] not in (None, "exact") and cfg["r"] is None:
            raise UsageError("--r is required with a probed --mode")
    if args.command == "trace-bench" and args.trials < 30:
        raise UsageError("--trials must be at least 30")
    if args.command == "bound-check" and args.trials < 1000:
        raise UsageError("--trials must be at least 1000 for coverage")
    if args.command == "grad-check" and args.kernel % 2 == 0:
        raise UsageError("--kernel must be odd")
    return cfg


def execute(cfg: dict, out: Path, threads: int = 1) -> int:
    out.mkdir(parents=True, exist_ok=True)
    ns = argparse.Namespace(**cfg)
    with threadpool_limits(limits=threads):
        code, written = HANDLERS[cfg["command"]](ns, out)
    manifest = {
        "subcommand": cfg["command"],
        "config": cfg,
        "seed": cfg["seed"],
        "version": __version__,
        "threads": threads,
        "outputs": sorted(Path(p).name for p in written),
        "timing_outputs": [p for p in TIMING_OUTPUTS if any(Path(w).name == p for w in written)],
        "exit_code": code,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return code


def _out_dir(arg) -> Path:
    return Path(arg or os.environ.get("TRACEGRAD_OUT") or "tracegrad-out")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "replay":
            doc = _load_json(args.manifest, "manifest")
            if "config" not in doc or doc["config"].get("command") not in HANDLERS:
                raise UsageError(f"{args.manifest} is not a run manifest")
            out = Path(args.out) if args.out else Path(args.manifest).parent
            return execute(doc["config"], out, args.threads)
        cfg = resolve(args)
        return execute(cfg, _out_dir(args.out), args.threads)
    except UsageError as exc:
        print(f"tracegrad: error: {exc}", file=sys.stderr)
        return 2
    except (TraceGradError, ValueError) as exc:
        if isinstance(exc, DatasetMissingError):
            print(f"tracegrad: dataset missing: {exc}", file=sys.stderr)
        else:
            print(f"tracegrad: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
