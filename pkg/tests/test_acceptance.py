"""Release acceptance suite: eight criteria, one PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -v`` (about 25 minutes on
one core, dominated by criterion 5).
"""
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest

from segsr import ops
from segsr.bench import block_latency, tail_scaling
from segsr.flops import factorization_ratio, floor_one_decimal, render_ratio
from segsr.netgraph import (FormatError, assign_tensors, deserialize, graph_forward, load_model,
                            save_model, build_backend)
from segsr.selftest import (GRAD_RTOL, check_batchnorm, check_bilinear, check_conv, check_cross_entropy,
                            check_depthwise, check_graph, check_pixel_shuffle, check_pointwise, check_relu,
                            check_subpixel, oracle_case, shuffle_reference, tiny_backend_config)
from segsr.train import RunConfig, make_datasets, train


@pytest.fixture
def report(capsys):
    def emit(num, name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num} {name}: {detail}")
        return ok
    return emit


def test_1_flop_ratio(report):
    r = factorization_ratio(512, 256, 3)
    ok = (r == Fraction(1_179_648, 133_376) and render_ratio(r) == "8.845" and floor_one_decimal(r) == "8.8")
    assert report(1, "flop-ratio", ok, f"{r.numerator}/{r.denominator} = {render_ratio(r)} (floor {floor_one_decimal(r)})")


def test_2_oracle_equivalence(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(100):
        rate = (1, 2, 6, 12, 18)[i % 5]
        x, w, spec = oracle_case(rng, rate)
        assert x.dtype == np.float32
        fast = ops.depthwise_atrous_conv_fwd(x, ops.LayerState.conv(w), spec)
        worst = max(worst, float(np.abs(fast - ops.conv2d_naive(x, w, spec)).max()))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and dt < 30
    assert report(2, "oracle-equivalence", ok, f"max abs diff {worst:.2e} over 100 cases in {dt:.1f}s")


def test_3_gradient_fidelity(report):
    t0 = time.perf_counter()
    checks = {
        "pointwise": check_pointwise, "depthwise_r1": lambda r: check_depthwise(r, 1),
        "depthwise_r2": lambda r: check_depthwise(r, 2), "dense_conv": check_conv,
        "batchnorm_train": check_batchnorm, "batchnorm_infer": lambda r: check_batchnorm(r, "infer"),
        "relu": check_relu, "pixel_shuffle": check_pixel_shuffle, "subpixel": check_subpixel,
        "bilinear": check_bilinear, "cross_entropy": check_cross_entropy,
        "graph_cf_aspp_sr": check_graph, "graph_cf_aspp": lambda r: check_graph(r, "cf_aspp"),
        "graph_f_aspp": lambda r: check_graph(r, "f_aspp"),
        "graph_aspp_full": lambda r: check_graph(r, "aspp_full"),
        "graph_bilinear_baseline": lambda r: check_graph(r, "bilinear_baseline"),
    }
    errs = {name: fn(np.random.default_rng(100 + i)) for i, (name, fn) in enumerate(checks.items())}
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    bad = [n for n, e in errs.items() if e > GRAD_RTOL]
    ok = not bad and dt < 120
    assert report(3, "gradient-fidelity", ok,
                  f"{len(errs)} checks, worst {worst} rel err {errs[worst]:.1e}, {dt:.1f}s"
                  + (f", failing {bad}" if bad else ""))


def test_4_shuffle_bijection(report):
    rng = np.random.default_rng(4)
    cases = 0
    ok = True
    for t in (1, 2, 3, 4):
        for _ in range(25):
            shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)) * t * t,
                     int(rng.integers(1, 7)), int(rng.integers(1, 7)))
            x = rng.standard_normal(shape).astype(np.float32)
            y = ops.pixel_shuffle_fwd(x, t)
            ok &= ops.pixel_shuffle_bwd(y, t).tobytes() == x.tobytes()
            ok &= np.array_equal(y, shuffle_reference(x, t))
            cases += 1
    assert report(4, "shuffle-bijection", ok, f"{cases} random shapes, t in 1..4, bit-exact")


ABLATION_VARIANTS = ("cf_aspp_sr", "cf_aspp", "f_aspp", "bilinear_baseline")
ABLATION_SEEDS = (0, 1, 2)


def test_5_ablation_ordering(report, tmp_path):
    t0 = time.perf_counter()
    base = RunConfig()   # data seed 7, 320 samples split 256/64, sr 2, N=4, 40 epochs
    assert (base.data_seed, base.dataset_count, base.train_fraction, base.sr_factor,
            base.num_classes, base.epochs) == (7, 320, 0.8, 2, 4, 40)
    data = make_datasets(base)
    assert (len(data[0]), len(data[1])) == (256, 64)
    scores = {}
    for v in ABLATION_VARIANTS:
        for s in ABLATION_SEEDS:
            cfg = RunConfig(variant=v, seed=s)
            rep, _, _ = train(cfg, out_dir=str(tmp_path / f"{v}_{s}"), data=data, evaluate_every=0)
            scores.setdefault(v, []).append(rep["val_miou"])
    dt = time.perf_counter() - t0
    med = {v: statistics.median(x) for v, x in scores.items()}
    checks = {
        "cf_aspp_sr>=cf_aspp": med["cf_aspp_sr"] >= med["cf_aspp"],
        "cf_aspp>=f_aspp": med["cf_aspp"] >= med["f_aspp"],
        "cf_aspp_sr-bilinear>=0.01": med["cf_aspp_sr"] - med["bilinear_baseline"] >= 0.01,
        "runtime<30min": dt < 1800,
    }
    detail = ", ".join(f"{v} {med[v]:.4f} {[round(x, 4) for x in scores[v]]}" for v in ABLATION_VARIANTS)
    failed = [k for k, ok in checks.items() if not ok]
    assert report(5, "ablation-ordering", not failed,
                  f"median val mIoU: {detail}; {dt / 60:.1f} min" + (f"; violated: {failed}" if failed else ""))


def test_6_latency_ordering(report):
    blocks = block_latency(512, 256, (32, 64), iters=50)
    f, a = blocks["f_aspp"].median, blocks["aspp_full"].median
    cfg = RunConfig().backend()
    tail = tail_scaling(cfg, (2, 2), iters=50)
    ratio = tail["height_x2"] / tail["base"]
    ok = f < a and ratio < 2
    assert report(6, "latency-ordering", ok,
                  f"F-ASPP {f * 1e3:.1f} ms vs ASPP {a * 1e3:.1f} ms (median of 50); "
                  f"tail height x2: {tail['base'] * 1e3:.2f} -> {tail['height_x2'] * 1e3:.2f} ms "
                  f"(ratio {ratio:.2f} < 2); both axes x2 (not asserted): "
                  f"ratio {tail['both_x2'] / tail['base']:.2f}")


def test_7_determinism(report, tmp_path):
    cfg = RunConfig(dataset_count=20, epochs=3, batch_size=8)
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        train(cfg, out_dir=str(d), evaluate_every=0)
        model = load_model(d / "model.bin")
        logits = model.forward(make_datasets(cfg)[1].images, "infer")
        outs.append(((d / "model.bin").read_bytes(), logits.tobytes()))
    ok = outs[0][0] == outs[1][0] and outs[0][1] == outs[1][1]
    assert report(7, "determinism", ok, f"model files {len(outs[0][0])} bytes identical; inference logits identical")


def test_8_serialization(report, tmp_path):
    cfg = RunConfig().backend()
    g = build_backend(cfg, seed=8)
    rng = np.random.default_rng(8)
    high = rng.standard_normal((2, cfg.high_channels, 2, 2)).astype(np.float32)
    low = rng.standard_normal((2, cfg.low_channels, 16, 16)).astype(np.float32)
    graph_forward(g, high, low, "train")   # move BN running stats off their defaults
    ref = graph_forward(g, high, low)
    path = tmp_path / "m.bin"
    save_model(g, path)
    same = graph_forward(load_model(path), high, low).tobytes() == ref.tobytes()

    data = path.read_bytes()
    corruptions = {
        "magic": b"SEGSR2" + data[6:],
        "truncated": data[: len(data) // 2],
        "dims": data[:11] + b"\xff\xff" + data[13:],
        "trailing": data + b"\x00",
    }
    rejected = []
    for name, blob in corruptions.items():
        try:
            deserialize(blob)
        except FormatError:
            rejected.append(name)
    # a well-formed file whose tensors do not fit must leave the target untouched
    target = build_backend(cfg, seed=9)
    before = [t.copy() for _, t in target.named_tensors()]
    tensors = dict((n, t.copy()) for n, t in g.named_tensors())
    tensors.popitem()
    try:
        assign_tensors(target, tensors)
        untouched = False
    except FormatError:
        untouched = all(np.array_equal(b, t) for b, (_, t) in zip(before, target.named_tensors()))
    ok = same and len(rejected) == len(corruptions) and untouched
    assert report(8, "serialization", ok,
                  f"round-trip forward bit-identical={same}; rejected {rejected}; partial load untouched={untouched}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
