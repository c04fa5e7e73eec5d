"""``segsr`` command line: flops, train, infer, bench, selftest.

Exit codes: 0 success, 1 failure (validation, IO, numerical), 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import ops
from .bench import MIN_ITERS, bench_variants, env_fingerprint, write_bench_csv
from .flops import report_graph
from .netgraph import ConfigError, FormatError, build_backend, load_model
from .selftest import run_selftest
from .tensor import ShapeError
from .toydata import SegModel, read_ppm, write_pgm
from .train import RunConfig, TrainingError, train

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def feature_dims(cfg: RunConfig):
    """(high h, high w) implied by the label dims, sr factor and stride."""
    if cfg.label_height % cfg.sr_factor or cfg.label_width % cfg.sr_factor:
        raise ConfigError("label dims must be divisible by sr_factor")
    ih, iw = cfg.label_height // cfg.sr_factor, cfg.label_width // cfg.sr_factor
    if ih % cfg.high_stride or iw % cfg.high_stride:
        raise ConfigError(f"input {ih}x{iw} is not divisible by the high-level stride {cfg.high_stride}")
    return ih // cfg.high_stride, iw // cfg.high_stride


def _load_config(path) -> RunConfig:
    try:
        return RunConfig.load(path)
    except FileNotFoundError:
        raise UsageError(f"config file {path!r} not found") from None
    except ConfigError as exc:
        raise UsageError(f"{path}: {exc}") from None


def cmd_flops(args):
    cfg = _load_config(args.config)
    backend = cfg.backend()
    h, w = feature_dims(cfg)
    t = backend.shuffle1_t
    shapes = {"high": (1, backend.high_channels, h, w), "low": (1, backend.low_channels, h * t, w * t)}
    rep = report_graph(build_backend(backend), shapes)
    rep.write_csv(args.out)
    print(f"{backend.variant}: {rep.total_macs} MACs, {rep.total_params} params, "
          f"activation high-water {rep.activation_high_water} elements -> {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = args.out_dir or cfg.output_dir
    report, _, _ = train(cfg, out_dir=out_dir)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_infer(args):
    model = load_model(args.model)
    if not isinstance(model, SegModel):
        raise FormatError(f"{args.model} holds a bare back-end; inference needs a full model from `train`")
    image = read_ppm(args.image)
    labels = model.predict(image[None].astype(model.dtype))[0]
    write_pgm(args.out, labels)
    print(f"{image.shape[2]}x{image.shape[1]} -> {labels.shape[1]}x{labels.shape[0]} labels in {args.out}")
    return EXIT_OK


def cmd_bench(args):
    if args.iters < MIN_ITERS:
        raise UsageError(f"--iters must be >= {MIN_ITERS}")
    cfg = _load_config(args.config)
    backend = cfg.backend()
    hw = feature_dims(cfg)
    env = env_fingerprint()
    print("environment: " + ", ".join(f"{k}={v}" for k, v in env.items()))
    rows = bench_variants(backend, hw, args.iters)
    write_bench_csv(args.out, rows)
    for r in rows:
        print(f"{r['variant']:>18}  median {r['median_ms']:8.3f} ms  mean {r['mean_ms']:8.3f} ms  "
              f"p95 {r['p95_ms']:8.3f} ms")
    return EXIT_OK


def cmd_selftest(args):
    ops.PERTURB_SHUFFLE = bool(args.perturb_shuffle)
    try:
        return EXIT_OK if run_selftest() else EXIT_FAIL
    finally:
        ops.PERTURB_SHUFFLE = False


def build_parser():
    p = argparse.ArgumentParser(prog="segsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("flops", help="per-layer MAC/parameter CSV for a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_flops)

    s = sub.add_parser("train", help="train a toy model")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out-dir")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="label one PPM image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("bench", help="single-threaded forward latency per variant")
    s.add_argument("--config", required=True)
    s.add_argument("--iters", type=int, default=20)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("selftest", help="oracle, gradient, shuffle, FLOP and serialization checks")
    s.add_argument("--perturb-shuffle", action="store_true",
                   help="debug hook: swap the pixel-shuffle axes; the suite must then fail")
    s.set_defaults(fn=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"segsr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ShapeError, TrainingError, OSError, ValueError, FloatingPointError) as exc:
        print(f"segsr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
