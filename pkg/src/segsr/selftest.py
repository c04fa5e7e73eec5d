"""Finite-difference gradient checks and the release self-test suites."""
from __future__ import annotations

import os
import tempfile
import time
from fractions import Fraction

import numpy as np

from . import ops
from .flops import factorization_ratio, floor_one_decimal
from .netgraph import BackendConfig, build_backend, graph_backward, graph_forward, load_model, save_model
from .ops import ConvSpec, LayerState

FD_STEP = 1e-5
GRAD_RTOL = 1e-3
ORACLE_ATOL = 1e-6
ORACLE_RATES = (1, 2, 6, 12, 18)


def numerical_grad(loss_fn, arr, h=FD_STEP):
    """Central differences of ``loss_fn()`` w.r.t. every element of ``arr``
    (perturbed in place and restored)."""
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = loss_fn()
        flat[i] = old - h
        down = loss_fn()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric) -> float:
    """max |a - n| relative to the largest numerical gradient entry."""
    scale = max(float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(np.asarray(analytic) - numeric).max()) / scale


# ------------------------------------------------------------------ oracle

def oracle_case(rng: np.random.Generator, rate: int):
    c = int(rng.integers(1, 9))
    h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
    x = rng.normal(size=(1, c, h, w)).astype(np.float32)
    wt = rng.normal(size=(c, 1, 3, 3)).astype(np.float32)
    return x, wt, ConvSpec((3, 3), rate, c, c, depthwise=True)


def oracle_equivalence(cases=100, seed=0):
    """Max abs difference between the fast depthwise atrous conv and the
    naive dilated-kernel oracle over seeded random cases."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(cases):
        rate = ORACLE_RATES[i % len(ORACLE_RATES)]
        x, wt, spec = oracle_case(rng, rate)
        fast = ops.depthwise_atrous_conv_fwd(x, LayerState.conv(wt), spec)
        slow = ops.conv2d_naive(x, wt, spec)
        worst = max(worst, float(np.abs(fast - slow).max()))
    return worst


# ----------------------------------------------------------- gradient checks

def _probe(rng, shape):
    return rng.normal(size=shape)


def check_pointwise(rng):
    x = rng.normal(size=(1, 3, 2, 2))
    st = LayerState.conv(rng.normal(size=(4, 3, 1, 1)), rng.normal(size=4))
    r = _probe(rng, (1, 4, 2, 2))
    loss = lambda: float(np.sum(ops.pointwise_conv_fwd(x, st) * r))
    st.zero_grad()
    gx = ops.pointwise_conv_bwd(x, r, st)
    return max(rel_error(gx, numerical_grad(loss, x)),
               rel_error(st.weight.grad, numerical_grad(loss, st.weight.data)),
               rel_error(st.bias.grad, numerical_grad(loss, st.bias.data)))


def check_depthwise(rng, rate=2):
    x = rng.normal(size=(2, 3, 5, 6))
    spec = ConvSpec((3, 3), rate, 3, 3, depthwise=True)
    st = LayerState.conv(rng.normal(size=(3, 1, 3, 3)), rng.normal(size=3))
    r = _probe(rng, x.shape)
    loss = lambda: float(np.sum(ops.depthwise_atrous_conv_fwd(x, st, spec) * r))
    st.zero_grad()
    gx = ops.depthwise_atrous_conv_bwd(x, r, st, spec)
    return max(rel_error(gx, numerical_grad(loss, x)),
               rel_error(st.weight.grad, numerical_grad(loss, st.weight.data)),
               rel_error(st.bias.grad, numerical_grad(loss, st.bias.data)))


def check_conv(rng, rate=1, stride=2):
    x = rng.normal(size=(2, 2, 5, 6))
    spec = ConvSpec((3, 3), rate, 2, 3, stride=stride)
    st = LayerState.conv(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3))
    r = _probe(rng, (2, 3, -(-5 // stride), -(-6 // stride)))
    loss = lambda: float(np.sum(ops.conv2d_fwd(x, st, spec) * r))
    st.zero_grad()
    gx = ops.conv2d_bwd(x, r, st, spec)
    return max(rel_error(gx, numerical_grad(loss, x)),
               rel_error(st.weight.grad, numerical_grad(loss, st.weight.data)),
               rel_error(st.bias.grad, numerical_grad(loss, st.bias.data)))


def check_batchnorm(rng, mode="train"):
    x = rng.normal(size=(2, 3, 2, 3)) * 2 + 1
    st = LayerState.batchnorm(3, np.float64)
    st.gamma.data[:] = rng.normal(size=3)
    st.beta.data[:] = rng.normal(size=3)
    st.running_mean[:] = rng.normal(size=3)
    st.running_var[:] = rng.uniform(0.5, 2.0, size=3)
    r = _probe(rng, x.shape)
    snapshot = (st.running_mean.copy(), st.running_var.copy())

    def loss():
        out = ops.batchnorm_fwd(x, st, mode)
        st.running_mean[:], st.running_var[:] = snapshot
        return float(np.sum(out * r))

    st.zero_grad()
    gx = ops.batchnorm_bwd(x, r, st, mode)
    return max(rel_error(gx, numerical_grad(loss, x)),
               rel_error(st.gamma.grad, numerical_grad(loss, st.gamma.data)),
               rel_error(st.beta.grad, numerical_grad(loss, st.beta.data)))


def check_relu(rng):
    x = rng.normal(size=(1, 2, 3, 3))
    x[np.abs(x) < 1e-2] = 0.5   # keep away from the kink
    r = _probe(rng, x.shape)
    loss = lambda: float(np.sum(ops.relu_fwd(x) * r))
    return rel_error(ops.relu_bwd(x, r), numerical_grad(loss, x))


def check_pixel_shuffle(rng, t=2):
    x = rng.normal(size=(1, 2 * t * t, 2, 3))
    r = _probe(rng, (1, 2, 2 * t, 3 * t))
    loss = lambda: float(np.sum(ops.pixel_shuffle_fwd(x, t) * r))
    return rel_error(ops.pixel_shuffle_bwd(r, t), numerical_grad(loss, x))


def check_subpixel(rng, t=2):
    x = rng.normal(size=(1, 3, 2, 2))
    st = LayerState.conv(rng.normal(size=(2 * t * t, 3, 1, 1)), rng.normal(size=2 * t * t))
    r = _probe(rng, (1, 2, 2 * t, 2 * t))
    loss = lambda: float(np.sum(ops.subpixel_conv(x, st, t) * r))
    st.zero_grad()
    gx = ops.subpixel_conv_bwd(x, r, st, t)
    return max(rel_error(gx, numerical_grad(loss, x)),
               rel_error(st.weight.grad, numerical_grad(loss, st.weight.data)))


def check_bilinear(rng, t=3):
    x = rng.normal(size=(1, 2, 3, 4))
    th, tw = ops.upsample_factors(t)
    r = _probe(rng, (1, 2, 3 * th, 4 * tw))
    loss = lambda: float(np.sum(ops.bilinear_upsample(x, t) * r))
    return rel_error(ops.bilinear_upsample_bwd(r, t), numerical_grad(loss, x))


def check_cross_entropy(rng):
    logits = rng.normal(size=(2, 4, 3, 3))
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = ops.IGNORE_INDEX
    _, g = ops.cross_entropy_loss(logits, labels)
    loss = lambda: ops.cross_entropy_loss(logits, labels)[0]
    return rel_error(g, numerical_grad(loss, logits))


def tiny_backend_config(variant="cf_aspp_sr") -> BackendConfig:
    return BackendConfig(num_classes=3, high_channels=4, low_channels=3, aspp_rates=[1, 2],
                         faspp1_channels=3, faspp2_channels=2, lowlevel_proj_channels=2,
                         shuffle1_t=2, shuffle2_t=2, final_bilinear_t=1, high_stride=4,
                         low_stride=2, sr_factor=1, variant=variant)


def check_graph(rng, variant="cf_aspp_sr", params_per_tensor=4):
    """Whole-graph check: every input element and a sample of every parameter."""
    cfg = tiny_backend_config(variant)
    g = build_backend(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    high = rng.normal(size=(2, 4, 2, 2))
    low = rng.normal(size=(2, 3, 4, 4))
    out = graph_forward(g, high, low, "train")
    r = _probe(rng, out.shape)
    snapshot = [(n.state.running_mean.copy(), n.state.running_var.copy())
                for n in g.nodes if n.kind == "bn"]

    def loss():
        val = float(np.sum(graph_forward(g, high, low, "train") * r))
        for n, (m, v) in zip([n for n in g.nodes if n.kind == "bn"], snapshot):
            n.state.running_mean[:], n.state.running_var[:] = m, v
        return val

    loss()
    g.zero_grad()
    graph_forward(g, high, low, "train")
    gin = graph_backward(g, r)
    worst = max(rel_error(gin["high"], numerical_grad(loss, high)),
                rel_error(gin["low"], numerical_grad(loss, low)))
    for name, p in g.named_params():
        idx = rng.choice(p.data.size, size=min(params_per_tensor, p.data.size), replace=False)
        flat = p.data.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + FD_STEP
            up = loss()
            flat[i] = old - FD_STEP
            down = loss()
            flat[i] = old
            num = (up - down) / (2 * FD_STEP)
            ana = p.grad.reshape(-1)[i]
            scale = max(abs(num), float(np.abs(p.grad).max()), 1e-12)
            worst = max(worst, abs(ana - num) / scale)
    return worst


GRADIENT_CHECKS = {
    "pointwise_conv": check_pointwise,
    "depthwise_atrous_conv": check_depthwise,
    "dense_conv": check_conv,
    "batchnorm_train": check_batchnorm,
    "batchnorm_infer": lambda rng: check_batchnorm(rng, "infer"),
    "relu": check_relu,
    "pixel_shuffle": check_pixel_shuffle,
    "subpixel_conv": check_subpixel,
    "bilinear": check_bilinear,
    "cross_entropy": check_cross_entropy,
    "graph_cf_aspp_sr": check_graph,
    "graph_f_aspp": lambda rng: check_graph(rng, "f_aspp"),
}


def gradient_errors(seed=0) -> dict:
    return {name: fn(np.random.default_rng(seed + i)) for i, (name, fn) in enumerate(GRADIENT_CHECKS.items())}


# ------------------------------------------------------------------- shuffle

def shuffle_reference(x, t):
    """Element-by-element application of the documented index map."""
    n, ct, h, w = x.shape
    c = ct // (t * t)
    out = np.empty((n, c, h * t, w * t), x.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(h * t):
                for xx in range(w * t):
                    out[b, ch, y, xx] = x[b, ch * t * t + t * (y % t) + (xx % t), y // t, xx // t]
    return out


def shuffle_suite(seed=0, trials=8):
    rng = np.random.default_rng(seed)
    for t in (1, 2, 3, 4):
        for _ in range(trials):
            shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)) * t * t,
                     int(rng.integers(1, 5)), int(rng.integers(1, 5)))
            x = rng.normal(size=shape).astype(np.float32)
            y = ops.pixel_shuffle_fwd(x, t)
            if ops.pixel_shuffle_bwd(y, t).tobytes() != x.tobytes():
                return False
            if not np.array_equal(y, shuffle_reference(x, t)):
                return False
    return True


# ------------------------------------------------------------- serialization

def serialization_suite(seed=0):
    cfg = tiny_backend_config()
    g = build_backend(cfg, seed=seed)
    rng = np.random.default_rng(seed)
    high = rng.normal(size=(1, 4, 2, 2)).astype(np.float32)
    low = rng.normal(size=(1, 3, 4, 4)).astype(np.float32)
    ref = graph_forward(g, high, low)
    with tempfile.TemporaryDirectory() as d:
        p1, p2 = os.path.join(d, "a.bin"), os.path.join(d, "b.bin")
        save_model(g, p1)
        g2 = load_model(p1)
        save_model(g2, p2)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            same_bytes = f1.read() == f2.read()
        same_out = graph_forward(g2, high, low).tobytes() == ref.tobytes()
        with open(p1, "r+b") as f:
            f.write(b"X")
        try:
            load_model(p1)
            rejected = False
        except ValueError:
            rejected = True
    return same_bytes and same_out and rejected


# -------------------------------------------------------------------- runner

def run_selftest(out=print) -> bool:
    results = []

    def record(name, ok, detail=""):
        results.append(ok)
        out(f"[{'PASS' if ok else 'FAIL'}] {name}{': ' + detail if detail else ''}")

    t0 = time.perf_counter()
    worst = oracle_equivalence()
    record("oracle-equivalence", worst <= ORACLE_ATOL, f"max abs diff {worst:.2e} over 100 cases")
    for name, err in gradient_errors().items():
        record(f"gradient-check {name}", err <= GRAD_RTOL, f"rel err {err:.2e}")
    record("shuffle-bijection", shuffle_suite())
    ratio = factorization_ratio(512, 256, 3)
    record("flop-ratio", ratio == Fraction(1179648, 133376) and floor_one_decimal(ratio) == "8.8",
           f"{ratio.numerator}/{ratio.denominator} = {float(ratio):.3f}")
    record("serialization", serialization_suite())
    ok = all(results)
    out(f"{sum(results)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    return ok
