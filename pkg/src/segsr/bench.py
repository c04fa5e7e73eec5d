"""Single-threaded wall-clock latency of back-end forward passes."""
from __future__ import annotations

import csv
import os
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from .netgraph import VARIANTS, BackendConfig, Node, build_aspp_block, build_backend, build_faspp_block

WARMUP = 5
MIN_ITERS = 10
CSV_HEADER = ["variant", "iters", "warmup", "median_ms", "mean_ms", "p95_ms", "threads",
              "high_h", "high_w", "python", "numpy", "blas", "machine"]


@contextmanager
def single_thread():
    """Pin BLAS (and OpenMP, if loaded) to one thread for the timed region."""
    with threadpool_limits(limits=1):
        yield


def blas_threads() -> int:
    pools = [p["num_threads"] for p in threadpool_info()]
    return max(pools) if pools else 1


def env_fingerprint() -> dict:
    blas = [f"{p.get('internal_api')}-{p.get('version')}" for p in threadpool_info() if p.get("user_api") == "blas"]
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "blas": "+".join(blas) or "none",
        "machine": f"{platform.system()}-{platform.machine()}-{os.cpu_count()}cpu",
        "threads": blas_threads(),
    }


@dataclass
class Timing:
    samples: list   # seconds

    @property
    def median(self):
        return float(np.median(self.samples))

    @property
    def mean(self):
        return float(np.mean(self.samples))

    @property
    def p95(self):
        return float(np.percentile(self.samples, 95))


def time_call(fn, iters, warmup=WARMUP) -> Timing:
    if iters < 1:
        raise ValueError("iters must be >= 1")
    with single_thread():
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(iters):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
    return Timing(samples)


def time_interleaved(fns: dict, iters, warmup=WARMUP) -> dict:
    """Time several callables round-robin so drift in machine load hits each
    of them alike. Returns {key: Timing}."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    samples = {k: [] for k in fns}
    with single_thread():
        for _ in range(warmup):
            for fn in fns.values():
                fn()
        for _ in range(iters):
            for k, fn in fns.items():
                t0 = time.perf_counter()
                fn()
                samples[k].append(time.perf_counter() - t0)
    return {k: Timing(v) for k, v in samples.items()}


def backend_feeds(cfg: BackendConfig, high_hw, n=1, seed=0, dtype=np.float32):
    h, w = high_hw
    rng = np.random.default_rng(seed)
    t = cfg.shuffle1_t
    return {"high": rng.standard_normal((n, cfg.high_channels, h, w)).astype(dtype),
            "low": rng.standard_normal((n, cfg.low_channels, h * t, w * t)).astype(dtype)}


def time_graph(g, cfg: BackendConfig, high_hw, iters, warmup=WARMUP, seed=0) -> Timing:
    feeds = backend_feeds(cfg, high_hw, seed=seed)
    return time_call(lambda: g.forward(feeds, "infer"), iters, warmup)


def time_backend(cfg: BackendConfig, high_hw, iters, warmup=WARMUP, seed=0) -> Timing:
    return time_graph(build_backend(cfg, seed=seed), cfg, high_hw, iters, warmup, seed)


def bench_variants(cfg: BackendConfig, high_hw, iters, variants=VARIANTS, warmup=WARMUP) -> list:
    """One row dict per variant; every variant sees the same input features."""
    if iters < MIN_ITERS:
        raise ValueError(f"iters must be >= {MIN_ITERS}")
    env = env_fingerprint()
    rows = []
    for v in variants:
        t = time_backend(BackendConfig(**{**cfg.to_dict(), "variant": v}), high_hw, iters, warmup)
        rows.append({
            "variant": v, "iters": iters, "warmup": warmup,
            "median_ms": t.median * 1e3, "mean_ms": t.mean * 1e3, "p95_ms": t.p95 * 1e3,
            "threads": 1, "high_h": high_hw[0], "high_w": high_hw[1],
            "python": env["python"], "numpy": env["numpy"], "blas": env["blas"], "machine": env["machine"],
        })
    return rows


def write_bench_csv(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_HEADER, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})


def block_latency(cin=512, cout=256, hw=(32, 64), rates=(6, 12, 18), iters=50, seed=0) -> dict:
    """Median-ready timings of one F-ASPP block against one unfactorized ASPP."""
    x = np.random.default_rng(seed).standard_normal((1, cin) + tuple(hw)).astype(np.float32)
    out = {}
    for name, build in (("f_aspp", build_faspp_block), ("aspp_full", build_aspp_block)):
        g = build(cin, cout, list(rates), seed=seed)
        out[name] = time_call(lambda: g.forward({"x": x}, "infer"), iters)
    return out


def with_tail_factor(cfg: BackendConfig, factor, seed=0):
    """Back-end graph whose trailing bilinear upsample uses ``factor``, an int
    or a (height, width) pair. Every node before the tail is unchanged."""
    g = build_backend(cfg, seed=seed)
    out = g.outputs[0]
    if out == "head.up":
        g.node(out).t = factor
    elif factor != 1:
        g.add(Node("head.up", "bilinear", [out], t=factor))
        g.outputs = ["head.up"]
    return g


def tail_scaling(cfg: BackendConfig, high_hw, iters=20, seed=0) -> dict:
    """Median latency with the trailing bilinear factor as configured
    ("base"), with output height doubled in the tail only ("height_x2"), and
    with both output axes doubled in the tail ("both_x2"). Seconds.

    The three graphs are timed interleaved on the same input features.
    """
    tf = cfg.final_bilinear_t
    factors = {"base": tf, "height_x2": (2 * tf, tf), "both_x2": 2 * tf}
    feeds = backend_feeds(cfg, high_hw, seed=seed)
    graphs = {k: with_tail_factor(cfg, f, seed) for k, f in factors.items()}
    fns = {k: (lambda g=g: g.forward(feeds, "infer")) for k, g in graphs.items()}
    return {k: t.median for k, t in time_interleaved(fns, iters).items()}


def input_sweep(cfg: BackendConfig, heights=(64, 128, 256), aspect=1, iters=10) -> dict:
    """Median latency per variant for square-ish inputs of the given heights."""
    res = {}
    for h in heights:
        hh = max(1, h // cfg.high_stride)
        hw = (hh, max(1, hh * aspect))
        res[h] = time_backend(cfg, hw, iters).median
    return res
