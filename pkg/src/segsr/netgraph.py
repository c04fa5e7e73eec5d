"""Static layer graphs for the CF-ASPP back-end and its ablation variants."""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .ops import ConvSpec, LayerState
from .tensor import DTYPES, NonFiniteError, Rng, ShapeError, kaiming_init

VARIANTS = ("cf_aspp_sr", "cf_aspp", "f_aspp", "aspp_full", "bilinear_baseline")


class ConfigError(ValueError):
    pass


class GraphStateError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class BackendConfig:
    num_classes: int = 19
    high_channels: int = 512
    low_channels: int = 128
    aspp_rates: list = field(default_factory=lambda: [6, 12, 18])
    faspp1_channels: int = 256
    faspp2_channels: int = 128
    lowlevel_proj_channels: int = 48
    shuffle1_t: int = 4
    shuffle2_t: int = 4
    final_bilinear_t: int = 2
    high_stride: int = 32
    low_stride: int = 8
    sr_factor: int = 1
    variant: str = "cf_aspp_sr"

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        rates = list(self.aspp_rates)
        if not rates or any(r < 1 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"aspp_rates must be non-empty, >= 1 and strictly increasing, got {rates}")
        for name in ("num_classes", "high_channels", "low_channels", "faspp1_channels",
                     "faspp2_channels", "lowlevel_proj_channels", "shuffle1_t", "shuffle2_t",
                     "final_bilinear_t", "high_stride", "low_stride", "sr_factor"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        up = self.shuffle1_t * self.shuffle2_t * self.final_bilinear_t
        if self.high_stride * self.sr_factor != up:
            raise ConfigError(
                f"high-level stride {self.high_stride} x sr_factor {self.sr_factor} = "
                f"{self.high_stride * self.sr_factor} but shuffle1_t*shuffle2_t*final_bilinear_t = "
                f"{self.shuffle1_t}*{self.shuffle2_t}*{self.final_bilinear_t} = {up}")
        if self.high_stride != self.shuffle1_t * self.low_stride:
            raise ConfigError(
                f"high-level stride {self.high_stride} != shuffle1_t {self.shuffle1_t} x "
                f"low-level stride {self.low_stride}; upsampled features cannot meet the low-level map")
        return self

    def to_dict(self):
        d = asdict(self)
        d["aspp_rates"] = list(d["aspp_rates"])
        return d


@dataclass
class Node:
    name: str
    kind: str
    inputs: list
    state: LayerState | None = None
    spec: ConvSpec | None = None
    t: int | tuple = 1   # bilinear may take a (height, width) pair


def _out_shape(node, shapes):
    ins = [shapes[i] for i in node.inputs]
    n, c, h, w = ins[0]
    k = node.kind
    if k in ("conv", "pointwise", "depthwise"):
        s = node.spec
        if c != s.in_channels:
            raise ShapeError(f"node {node.name!r}: expected {s.in_channels} input channels, got {c}")
        return (n, s.out_channels, -(-h // s.stride), -(-w // s.stride))
    if k == "bn":
        if c != node.state.gamma.data.shape[0]:
            raise ShapeError(f"node {node.name!r}: expected {node.state.gamma.data.shape[0]} channels, got {c}")
        return ins[0]
    if k == "relu":
        return ins[0]
    if k == "concat":
        for other in ins[1:]:
            if (other[0], other[2], other[3]) != (n, h, w):
                raise ShapeError(f"node {node.name!r}: cannot concat {ins[0]} with {other}")
        return (n, sum(s[1] for s in ins), h, w)
    if k == "shuffle":
        if c % (node.t * node.t):
            raise ShapeError(f"node {node.name!r}: {c} channels not divisible by {node.t}^2")
        return (n, c // (node.t * node.t), h * node.t, w * node.t)
    if k == "bilinear":
        th, tw = ops.upsample_factors(node.t)
        return (n, c, h * th, w * tw)
    raise ValueError(f"unknown node kind {k}")


class Graph:
    """Topologically ordered layer list with cached activations.

    ``forward`` takes a dict of named inputs and returns a dict of named
    outputs; ``backward`` takes output gradients and returns input gradients
    while accumulating parameter gradients into each node's state.
    """

    def __init__(self, inputs, dtype=np.float32, config=None):
        self.inputs = list(inputs)
        self.outputs: list = []
        self.nodes: list[Node] = []
        self.dtype = np.dtype(dtype)
        self.config = config
        self._acts = None
        self._mode = None

    # -- construction
    def add(self, node: Node) -> str:
        known = set(self.inputs) | {n.name for n in self.nodes}
        if node.name in known:
            raise ConfigError(f"duplicate node name {node.name!r}")
        for i in node.inputs:
            if i not in known:
                raise ConfigError(f"node {node.name!r} consumes unknown tensor {i!r}")
        self.nodes.append(node)
        return node.name

    def node(self, name) -> Node:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    # -- parameters
    def named_params(self):
        for n in self.nodes:
            if n.state is not None:
                for pname, p in n.state.params():
                    yield f"{n.name}.{pname}", p

    def params(self):
        return [p for _, p in self.named_params()]

    def named_tensors(self):
        """Every persistent array (parameters and BN running stats) in order."""
        for n in self.nodes:
            if n.state is not None:
                for pname, p in n.state.params():
                    yield f"{n.name}.{pname}", p.data
                for bname, b in n.state.buffers():
                    yield f"{n.name}.{bname}", b

    def zero_grad(self):
        for p in self.params():
            p.grad[...] = 0

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params())

    # -- shapes
    def infer_shapes(self, input_shapes: dict) -> dict:
        shapes = {k: tuple(v) for k, v in input_shapes.items()}
        for k in self.inputs:
            if k not in shapes:
                raise ShapeError(f"missing graph input {k!r}")
        for node in self.nodes:
            shapes[node.name] = _out_shape(node, shapes)
        return shapes

    def activation_high_water(self, input_shapes: dict) -> int:
        """Peak live activation elements of an inference pass (inputs included)."""
        shapes = self.infer_shapes(input_shapes)
        last_use = {}
        for idx, node in enumerate(self.nodes):
            for i in node.inputs:
                last_use[i] = idx
        for o in self.outputs:
            last_use[o] = len(self.nodes)
        size = lambda k: int(np.prod(shapes[k]))
        live = {k for k in self.inputs}
        current = sum(size(k) for k in live)
        peak = current
        for idx, node in enumerate(self.nodes):
            live.add(node.name)
            current += size(node.name)
            peak = max(peak, current)
            for k in list(live):
                if last_use.get(k, -1) <= idx:
                    live.discard(k)
                    current -= size(k)
        return peak

    # -- execution
    def forward(self, feeds: dict, mode: str = "infer") -> dict:
        self.infer_shapes({k: v.shape for k, v in feeds.items()})
        acts = {k: np.asarray(feeds[k], dtype=self.dtype) for k in self.inputs}
        for node in self.nodes:
            x = [acts[i] for i in node.inputs]
            try:
                acts[node.name] = _forward(node, x, mode)
            except NonFiniteError as exc:
                raise NonFiniteError(f"node {node.name!r}: {exc}") from None
        self._acts = acts
        self._mode = mode
        return {k: acts[k] for k in self.outputs}

    def backward(self, grads: dict) -> dict:
        if self._acts is None:
            raise GraphStateError("backward called before forward")
        acts = self._acts
        g = {k: np.asarray(v, dtype=self.dtype) for k, v in grads.items()}
        for node in reversed(self.nodes):
            go = g.pop(node.name, None)
            if go is None:
                continue
            gin = _backward(node, [acts[i] for i in node.inputs], acts[node.name], go, self._mode)
            for name, gi in zip(node.inputs, gin):
                if name in g:
                    g[name] = g[name] + gi
                else:
                    g[name] = gi
        return {k: g.get(k, np.zeros_like(acts[k])) for k in self.inputs}


def _forward(node, x, mode):
    k = node.kind
    if k == "conv":
        return ops.conv2d_fwd(x[0], node.state, node.spec)
    if k == "pointwise":
        return ops.pointwise_conv_fwd(x[0], node.state)
    if k == "depthwise":
        return ops.depthwise_atrous_conv_fwd(x[0], node.state, node.spec)
    if k == "bn":
        return ops.batchnorm_fwd(x[0], node.state, mode)
    if k == "relu":
        return ops.relu_fwd(x[0])
    if k == "concat":
        return np.concatenate(x, axis=1)
    if k == "shuffle":
        return ops.pixel_shuffle_fwd(x[0], node.t)
    if k == "bilinear":
        return ops.bilinear_upsample(x[0], node.t)
    raise ValueError(k)


def _backward(node, x, y, go, mode):
    k = node.kind
    if k == "conv":
        return [ops.conv2d_bwd(x[0], go, node.state, node.spec)]
    if k == "pointwise":
        return [ops.pointwise_conv_bwd(x[0], go, node.state)]
    if k == "depthwise":
        return [ops.depthwise_atrous_conv_bwd(x[0], go, node.state, node.spec)]
    if k == "bn":
        return [ops.batchnorm_bwd(x[0], go, node.state, mode)]
    if k == "relu":
        return [ops.relu_bwd(x[0], go)]
    if k == "concat":
        bounds = np.cumsum([a.shape[1] for a in x])[:-1]
        return np.split(go, bounds, axis=1)
    if k == "shuffle":
        return [ops.pixel_shuffle_bwd(go, node.t)]
    if k == "bilinear":
        return [ops.bilinear_upsample_bwd(go, node.t)]
    raise ValueError(k)


# ---------------------------------------------------------------- builders

def icnr_init(rng: Rng, spec: ConvSpec, t: int, dtype) -> np.ndarray:
    """Kaiming init for a conv feeding a pixel shuffle of factor ``t``, with
    every sub-pixel position starting from the same filter (ICNR), so the
    shuffle initially acts like nearest-neighbour upsampling."""
    o, i, kh, kw = spec.weight_shape()
    if o % (t * t):
        raise ConfigError(f"{o} output channels not divisible by t^2={t * t}")
    base = kaiming_init(rng, (o // (t * t), i, kh, kw), spec.fan_in(), dtype)
    return np.repeat(base, t * t, axis=0)


class Builder:
    """Appends layers to a graph, drawing initial weights from one Rng."""

    def __init__(self, graph: Graph, rng: Rng):
        self.g = graph
        self.rng = rng

    def conv(self, name, src, spec: ConvSpec, bias=False, icnr_t=1):
        if icnr_t > 1:
            w = icnr_init(self.rng, spec, icnr_t, self.g.dtype)
        else:
            w = kaiming_init(self.rng, spec.weight_shape(), spec.fan_in(), self.g.dtype)
        b = np.zeros(spec.out_channels, self.g.dtype) if bias else None
        if spec.depthwise:
            kind = "depthwise"
        elif spec.kernel == (1, 1) and spec.stride == 1:
            kind = "pointwise"
        else:
            kind = "conv"
        return self.g.add(Node(name, kind, [src], LayerState.conv(w, b), spec))

    def conv_bn_relu(self, name, src, spec: ConvSpec):
        x = self.conv(name, src, spec)
        x = self.g.add(Node(f"{name}.bn", "bn", [x], LayerState.batchnorm(spec.out_channels, self.g.dtype)))
        return self.g.add(Node(f"{name}.relu", "relu", [x]))

    def pointwise(self, name, src, cin, cout, bias=False, icnr_t=1):
        return self.conv(name, src, ConvSpec((1, 1), 1, cin, cout), bias=bias, icnr_t=icnr_t)

    def pw_bn_relu(self, name, src, cin, cout, icnr_t=1):
        x = self.conv(name, src, ConvSpec((1, 1), 1, cin, cout), icnr_t=icnr_t)
        x = self.g.add(Node(f"{name}.bn", "bn", [x], LayerState.batchnorm(cout, self.g.dtype)))
        return self.g.add(Node(f"{name}.relu", "relu", [x]))

    def concat(self, name, srcs):
        return self.g.add(Node(name, "concat", list(srcs)))

    def shuffle(self, name, src, t):
        return self.g.add(Node(name, "shuffle", [src], t=t))

    def bilinear(self, name, src, t):
        if t == 1:
            return src
        return self.g.add(Node(name, "bilinear", [src], t=t))


def _check_rates(rates):
    rates = list(rates)
    if not rates or any(int(r) != r or r < 1 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
        raise ConfigError(f"invalid atrous rates {rates}")
    return rates


def add_faspp(b: Builder, prefix, src, cin, cout, rates):
    """Factorized ASPP: shared pointwise reduction, parallel depthwise atrous
    branches, concat, pointwise fuse. Every conv is followed by BN + ReLU."""
    rates = _check_rates(rates)
    x = b.pw_bn_relu(f"{prefix}.reduce", src, cin, cout)
    branches = [
        b.conv_bn_relu(f"{prefix}.dw_r{r}", x, ConvSpec((3, 3), r, cout, cout, depthwise=True))
        for r in rates
    ]
    cat = b.concat(f"{prefix}.cat", branches) if len(branches) > 1 else branches[0]
    return b.pw_bn_relu(f"{prefix}.fuse", cat, cout * len(rates), cout)


def add_aspp(b: Builder, prefix, src, cin, cout, rates):
    """Unfactorized ASPP: parallel dense 3x3 atrous convs, concat, pointwise fuse."""
    rates = _check_rates(rates)
    branches = [b.conv_bn_relu(f"{prefix}.conv_r{r}", src, ConvSpec((3, 3), r, cin, cout)) for r in rates]
    cat = b.concat(f"{prefix}.cat", branches) if len(branches) > 1 else branches[0]
    return b.pw_bn_relu(f"{prefix}.fuse", cat, cout * len(rates), cout)


def build_faspp_block(in_channels, out_channels, rates, seed=0, dtype=np.float32) -> Graph:
    g = Graph(["x"], dtype)
    g.outputs = [add_faspp(Builder(g, Rng(seed)), "faspp", "x", in_channels, out_channels, rates)]
    return g


def build_aspp_block(in_channels, out_channels, rates, seed=0, dtype=np.float32) -> Graph:
    g = Graph(["x"], dtype)
    g.outputs = [add_aspp(Builder(g, Rng(seed)), "aspp", "x", in_channels, out_channels, rates)]
    return g


def add_backend(b: Builder, cfg: BackendConfig, high="high", low="low") -> str:
    """Wire the configured variant; returns the logits tensor name."""
    v = cfg.variant
    n_cls = cfg.num_classes
    t1, t2, tf = cfg.shuffle1_t, cfg.shuffle2_t, cfg.final_bilinear_t
    w1, w2, wp = cfg.faspp1_channels, cfg.faspp2_channels, cfg.lowlevel_proj_channels
    rates = cfg.aspp_rates
    block = add_aspp if v == "aspp_full" else add_faspp
    x = block(b, "block1", high, cfg.high_channels, w1, rates)

    if v == "bilinear_baseline":
        x = b.pointwise("head", x, w1, n_cls, bias=True)
        return b.bilinear("head.up", x, t1 * t2 * tf)

    if v == "cf_aspp_sr":
        x = b.pw_bn_relu("up1.expand", x, w1, w1 * t1 * t1, icnr_t=t1)
        x = b.shuffle("up1.shuffle", x, t1)
    else:
        x = b.bilinear("up1.bilinear", x, t1)
    lp = b.pw_bn_relu("lowproj", low, cfg.low_channels, wp)
    x = b.concat("fusion", [x, lp])

    if v == "f_aspp":
        x = b.conv_bn_relu("decoder", x, ConvSpec((3, 3), 1, w1 + wp, w2))
    else:
        x = block(b, "block2", x, w1 + wp, w2, rates)

    if v == "cf_aspp_sr":
        x = b.pointwise("head", x, w2, n_cls * t2 * t2, bias=True, icnr_t=t2)
        x = b.shuffle("head.shuffle", x, t2)
        return b.bilinear("head.up", x, tf)
    x = b.pointwise("head", x, w2, n_cls, bias=True)
    return b.bilinear("head.up", x, t2 * tf)


def build_backend(config: BackendConfig, seed: int = 0, dtype=np.float32) -> Graph:
    config.validate()
    g = Graph(["high", "low"], dtype, config={"kind": "backend", "backend": config.to_dict(),
                                              "dtype": np.dtype(dtype).name})
    g.outputs = [add_backend(Builder(g, Rng(seed)), config)]
    return g


def graph_forward(graph: Graph, high_feat, low_feat, mode="infer"):
    return graph.forward({"high": high_feat, "low": low_feat}, mode)[graph.outputs[0]]


def graph_backward(graph: Graph, grad_logits):
    return graph.backward({graph.outputs[0]: grad_logits})


# ----------------------------------------------------------- serialization

MAGIC = b"SEGSR1\0"
CONFIG_ENTRY = "__config__"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def serialize(config: dict, tensors) -> bytes:
    """Model file bytes: magic, u32 entry count, then one record per array.

    The rebuild config travels as the first record, named ``__config__``,
    holding its canonical JSON bytes as f32 values.
    """
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    entries = [(CONFIG_ENTRY, np.frombuffer(cfg_bytes, np.uint8).astype(np.float32))]
    entries += list(tensors)
    out = [MAGIC, struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)))
        out.append(raw)
        out.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    return b"".join(out)


def deserialize(data: bytes):
    """Parse model bytes into (config, {name: array}); raises FormatError."""
    if not data.startswith(MAGIC):
        raise FormatError("bad magic: not a SEGSR1 model file")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated file at byte {pos} (need {n} more bytes)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"invalid parameter name: {exc}") from None
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _CODE_DTYPES[code]
        count_vals = 1
        for d in dims:
            count_vals *= d
        nbytes = count_vals * dt.itemsize
        if nbytes > len(data) - pos:
            raise FormatError(f"dims {dims} of {name!r} exceed the remaining file size")
        if name in tensors:
            raise FormatError(f"duplicate entry {name!r}")
        tensors[name] = np.frombuffer(take(nbytes), dt).reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after last entry")
    if CONFIG_ENTRY not in tensors:
        raise FormatError("missing config entry")
    try:
        config = json.loads(bytes(tensors.pop(CONFIG_ENTRY).astype(np.uint8)).decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable config entry: {exc}") from None
    return config, tensors


def _write_atomic(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".segsr-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model, path):
    """Write ``model`` (a backend Graph or a full SegModel) to ``path``."""
    _write_atomic(path, serialize(model.config, model.named_tensors()))


def assign_tensors(model, tensors: dict):
    expected = dict(model.named_tensors())
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise FormatError(f"parameter set mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, dst in expected.items():
        src = tensors[name]
        if src.shape != dst.shape or src.dtype != dst.dtype:
            raise FormatError(f"{name!r}: file has {src.dtype}{src.shape}, model needs {dst.dtype}{dst.shape}")
    # validated everything; only now mutate
    for name, dst in expected.items():
        dst[...] = tensors[name]


def model_from_config(config: dict):
    kind = config.get("kind")
    try:
        if kind == "backend":
            return build_backend(BackendConfig(**config["backend"]), dtype=DTYPES.get(config["dtype"], config["dtype"]))
        if kind == "segmodel":
            from .toydata import SegModel
            return SegModel.from_config(config)
    except (TypeError, KeyError, ConfigError) as exc:
        raise FormatError(f"invalid model config: {exc}") from None
    raise FormatError(f"unknown model kind {kind!r}")


def load_model(path):
    with open(path, "rb") as f:
        data = f.read()
    config, tensors = deserialize(data)
    model = model_from_config(config)
    assign_tensors(model, tensors)
    return model
