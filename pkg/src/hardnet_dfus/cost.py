"""MACs / CIO / MoC cost model for block graphs and whole networks.

Only parametric layers (convolutions and the decoder's linear layers) are
counted.  For a conv row::

    macs   = N * kh * kw * (c_in / groups) * c_out * h_out * w_out
    cio    = N * (c_in * h_in * w_in + c_out * h_out * w_out)
    params = kh * kw * (c_in / groups) * c_out + c_out (+ 2 * c_out with BN)

A linear row over ``M`` tokens counts ``in * out * M`` MACs and
``(in + out) * M`` CIO.  Attention score/value products and pooling carry no
parameters and are left out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .blockgraph import build_block, wrap_csp


@dataclass
class CostRow:
    name: str
    kind: str
    macs: int
    cio: int
    params: int


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)

    @property
    def macs(self):
        return sum(r.macs for r in self.rows)

    @property
    def cio(self):
        return sum(r.cio for r in self.rows)

    @property
    def params(self):
        return sum(r.params for r in self.rows)

    @property
    def moc(self):
        cio = self.cio
        return self.macs / cio if cio else 0.0

    def totals(self):
        return {"macs": self.macs, "cio": self.cio, "moc": self.moc, "params": self.params}

    def to_dict(self):
        return {"rows": [vars(r).copy() for r in self.rows], "totals": self.totals()}

    def conv(self, name, n, c_in, c_out, h, w, k=1, stride=1, groups=1, bn=True):
        """Append a conv row; returns the output spatial size."""
        pad = k // 2
        h_out = (h + 2 * pad - k) // stride + 1
        w_out = (w + 2 * pad - k) // stride + 1
        if h_out < 1 or w_out < 1:
            raise ValueError(f"{name}: spatial size underflow ({h}x{w} -> {h_out}x{w_out})")
        weights = k * k * (c_in // groups) * c_out
        self.rows.append(CostRow(
            name, "conv",
            macs=n * weights * h_out * w_out,
            cio=n * (c_in * h * w + c_out * h_out * w_out),
            params=weights + c_out + (2 * c_out if bn else 0)))
        return h_out, w_out

    def linear(self, name, tokens, c_in, c_out):
        self.rows.append(CostRow(name, "linear", macs=tokens * c_in * c_out,
                                 cio=tokens * (c_in + c_out), params=c_in * c_out + c_out))


def _block_rows(report, prefix, graph, n, h, w):
    if graph.has_entry_conv:
        report.conv(f"{prefix}.entry", n, graph.entry_channels, graph.nodes[0].c_out, h, w)
    for node in graph.nodes[1:]:
        report.conv(f"{prefix}.conv{node.k}", n, node.c_in, node.c_out, h, w, k=3)


def analyze_block(graph, input_shape):
    """Cost of one block graph on an ``N x C x H x W`` input."""
    n, _, h, w = input_shape
    report = CostReport()
    _block_rows(report, "block", graph, n, h, w)
    return report


def analyze(net, input_shape):
    """Per-layer and total cost of ``net`` on an ``N x C x H x W`` input."""
    n, c, h, w = input_shape
    if c != net.input_channels:
        raise ValueError(f"input has {c} channels, network expects {net.input_channels}")
    report = CostReport()

    for i, conv in enumerate(net.stem):
        h, w = report.conv(f"stem.conv{i}", n, c, conv.out, h, w, k=conv.kernel, stride=conv.stride)
        c = conv.out

    sizes = {}
    for s, (stage, plan) in enumerate(zip(net.stages, net.plan()), start=1):
        _block_rows(report, f"stage{s}.block", plan.graph, n, h, w)
        report.conv(f"stage{s}.trans.conv", n, plan.graph.out_channels, plan.trans_channels, h, w)
        report.conv(f"stage{s}.trans.se.fc1", n, plan.trans_channels, plan.se_hidden, 1, 1, bn=False)
        report.conv(f"stage{s}.trans.se.fc2", n, plan.se_hidden, plan.trans_channels, 1, 1, bn=False)
        sizes[s] = (plan.trans_channels, h, w)
        if stage.transition.downsample:
            h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ValueError(f"stage{s}: spatial size underflow after downsampling")

    dec = net.decoder
    D = dec.embed_dim
    _, hf, wf = sizes[dec.taps[0]]
    for j, tap in enumerate(dec.taps):
        ct, ht, wt = sizes[tap]
        report.conv(f"decoder.proj{j}", n, ct, D, ht, wt, bn=False)
    report.conv("decoder.fuse", n, len(dec.taps) * D, D, hf, wf)
    report.conv("decoder.short", n, D, D, hf, wf)
    for p in dec.pool_sizes:
        report.conv(f"decoder.pool{p}", n, D, D, p, p, bn=False)

    P = dec.patch_size
    hp, wp = math.ceil(hf / P) * P, math.ceil(wf / P) * P
    tokens = n * hp * wp
    patches = n * (hp // P) * (wp // P)
    for r in dec.window_ratios:
        report.linear(f"decoder.lawin{r}.mix", patches * D, P * P, P * P)
        for proj in ("q", "k", "v", "o"):
            report.linear(f"decoder.lawin{r}.{proj}", tokens, D, D)
    branches = 1 + len(dec.pool_sizes) + len(dec.window_ratios)
    report.conv("decoder.fuse2", n, branches * D, D, hf, wf)

    for name in _head_names(net):
        report.conv(f"head.{name}", n, D, 1, hf, wf, bn=False)
    return report


def _head_names(net):
    names = ["main"] + [f"deep{i + 1}" for i in range(len(net.heads.deep))]
    if net.heads.boundary:
        names.append("boundary")
    return names


def _graph_for(spec, channels):
    graph = build_block(spec, channels)
    return wrap_csp(graph, 0.5) if spec.csp_wrap else graph


def compare_blocks(a, b, input_shape):
    """Side-by-side cost of two block specs on the same input."""
    ga, gb = _graph_for(a, input_shape[1]), _graph_for(b, input_shape[1])
    ra, rb = analyze_block(ga, input_shape), analyze_block(gb, input_shape)
    return {
        "macs_a": ra.macs, "macs_b": rb.macs,
        "cio_a": ra.cio, "cio_b": rb.cio,
        "moc_a": ra.moc, "moc_b": rb.moc,
        "conv_count_a": ga.conv_count, "conv_count_b": gb.conv_count,
        "params_a": ra.params, "params_b": rb.params,
    }


def match_growth(reference, spec, input_shape, g_max=1024):
    """Growth for ``spec`` whose block MACs come closest to ``reference``'s."""
    target = analyze_block(_graph_for(reference, input_shape[1]), input_shape).macs
    best, best_err = None, math.inf
    for g in range(1, g_max + 1):
        macs = analyze_block(_graph_for(replace(spec, g=g), input_shape[1]), input_shape).macs
        err = abs(macs - target)
        if err < best_err:
            best, best_err = g, err
        if macs > target:
            break
    return replace(spec, g=best)
