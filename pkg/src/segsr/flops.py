"""Analytic multiply-accumulate and parameter counts.

Convention: one MAC is one multiply plus one accumulate. Counts are per
sample. Bias additions are not counted; batch norm costs two MACs per
element (scale and shift); ReLU, concat, pixel shuffle and bilinear
upsampling cost nothing.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from math import floor

_NAME_OK = re.compile(r"^[A-Za-z0-9_.-]+$")


def macs_conv(h, w, kh, kw, f_in, f_out, depthwise=False) -> int:
    """MACs of one conv layer producing an ``h x w`` map. The atrous rate
    does not appear: inserted zeros are never multiplied."""
    if depthwise:
        return h * w * kh * kw * f_out
    return h * w * kh * kw * f_in * f_out


def factorization_ratio(f_in, f_out, k=3) -> Fraction:
    """Cost of a dense k x k conv over pointwise + depthwise k x k, exactly."""
    return Fraction(k * k * f_in * f_out, f_in * f_out + k * k * f_out)


def render_ratio(r: Fraction, digits=3) -> str:
    return f"{float(r):.{digits}f}"


def floor_one_decimal(r: Fraction) -> str:
    return f"{floor(r * 10) / 10:.1f}"


@dataclass
class FlopRow:
    layer: str
    type: str
    out_dims: tuple
    macs: int
    params: int


@dataclass
class FlopReport:
    rows: list = field(default_factory=list)
    total_macs: int = 0
    total_params: int = 0
    activation_high_water: int = 0

    def by_prefix(self, prefix) -> int:
        return sum(r.macs for r in self.rows if r.layer.startswith(prefix))

    def to_csv(self) -> str:
        lines = ["layer,type,out_n,out_c,out_h,out_w,macs,params"]
        for r in self.rows:
            if not _NAME_OK.match(r.layer):
                raise ValueError(f"layer name {r.layer!r} is not CSV-safe")
            n, c, h, w = r.out_dims
            lines.append(f"{r.layer},{r.type},{n},{c},{h},{w},{r.macs},{r.params}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())


def node_macs(node, in_shape, out_shape) -> int:
    _, c, h, w = out_shape
    k = node.kind
    if k in ("conv", "pointwise", "depthwise"):
        s = node.spec
        kh, kw = s.kernel
        return macs_conv(h, w, kh, kw, s.in_channels, s.out_channels, s.depthwise)
    if k == "bn":
        return 2 * c * h * w
    return 0


def report_graph(graph, input_shapes: dict) -> FlopReport:
    """One row per node of ``graph`` evaluated at ``input_shapes``.

    MACs and the activation high-water mark are per sample, so the totals do
    not depend on the batch size in ``input_shapes``.
    """
    shapes = graph.infer_shapes(input_shapes)
    per_sample = {k: (1,) + tuple(v[1:]) for k, v in input_shapes.items()}
    rep = FlopReport()
    for node in graph.nodes:
        out = shapes[node.name]
        one = (1,) + tuple(out[1:])
        macs = node_macs(node, shapes[node.inputs[0]], one)
        params = 0 if node.state is None else int(sum(p.data.size for _, p in node.state.params()))
        rep.rows.append(FlopRow(node.name, node.kind, tuple(out), int(macs), params))
    rep.total_macs = sum(r.macs for r in rep.rows)
    rep.total_params = sum(r.params for r in rep.rows)
    rep.activation_high_water = graph.activation_high_water(per_sample)
    return rep


def backend_input_shapes(cfg, high_hw, n=1) -> dict:
    """Input shapes of a back-end graph whose high-level map is ``high_hw``."""
    h, w = high_hw
    t = cfg.shuffle1_t
    return {"high": (n, cfg.high_channels, h, w), "low": (n, cfg.low_channels, h * t, w * t)}


def check_consistency(graph, input_shapes) -> bool:
    """Each conv row equals :func:`macs_conv` on the node's recorded dims."""
    shapes = graph.infer_shapes(input_shapes)
    rep = report_graph(graph, input_shapes)
    for node, row in zip(graph.nodes, rep.rows):
        if node.kind in ("conv", "pointwise", "depthwise"):
            _, _, h, w = shapes[node.name]
            s = node.spec
            if row.macs != macs_conv(h, w, *s.kernel, s.in_channels, s.out_channels, s.depthwise):
                return False
    return rep.total_macs == sum(r.macs for r in rep.rows) and \
        rep.total_params == sum(r.params for r in rep.rows) == graph.num_params()


def block_macs(graph, input_shapes, prefix) -> int:
    return report_graph(graph, input_shapes).by_prefix(prefix)
