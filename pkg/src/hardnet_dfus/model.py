"""HarDNet-DFUS forward executor: HarDNetV2 encoder + Lawin-style decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops


class MissingWeightError(KeyError):
    def __init__(self, names):
        self.names = sorted(names)
        super().__init__(f"missing weight tensor(s): {', '.join(self.names)}")

    def __str__(self):
        return self.args[0]


@dataclass
class WeightStore:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    provenance: str = "seeded-init"
    seed: int | None = None

    def __getitem__(self, name):
        try:
            return self.tensors[name]
        except KeyError:
            raise MissingWeightError([name]) from None

    def __contains__(self, name):
        return name in self.tensors

    def __len__(self):
        return len(self.tensors)

    @property
    def num_params(self):
        return sum(t.size for t in self.tensors.values())

    def check(self, net):
        """Raise :class:`MissingWeightError` listing every absent parameter of ``net``."""
        missing = [name for name, *_ in param_specs(net) if name not in self.tensors]
        if missing:
            raise MissingWeightError(missing)
        for name, shape, *_ in param_specs(net):
            if self.tensors[name].shape != shape:
                raise ValueError(f"weight {name} has shape {self.tensors[name].shape}, expected {shape}")


@dataclass
class ForwardOutputs:
    main: np.ndarray
    deep: list[np.ndarray]
    boundary: np.ndarray | None
    pyramid: dict[int, np.ndarray]
    strides: dict[int, int]


# -- parameter declarations -------------------------------------------------

def _conv_specs(out, name, c_in, c_out, k=1, bn=True):
    fan_in = c_in * k * k
    out.append((f"{name}.w", (c_out, c_in, k, k), fan_in, "weight"))
    out.append((f"{name}.b", (c_out,), fan_in, "bias"))
    if bn:
        out.append((f"{name}.bn_scale", (c_out,), fan_in, "bn_scale"))
        out.append((f"{name}.bn_shift", (c_out,), fan_in, "bn_shift"))


def _linear_specs(out, name, c_in, c_out):
    out.append((f"{name}.w", (c_out, c_in), c_in, "weight"))
    out.append((f"{name}.b", (c_out,), c_in, "bias"))


def head_names(net):
    names = ["main"] + [f"deep{i + 1}" for i in range(len(net.heads.deep))]
    if net.heads.boundary:
        names.append("boundary")
    return names


def param_specs(net):
    """Ordered ``(name, shape, fan_in, kind)`` for every parameter of ``net``."""
    specs = []
    c = net.input_channels
    for i, conv in enumerate(net.stem):
        _conv_specs(specs, f"stem.conv{i}", c, conv.out, conv.kernel)
        c = conv.out
    for s, plan in enumerate(net.plan(), start=1):
        graph = plan.graph
        if graph.has_entry_conv:
            _conv_specs(specs, f"stage{s}.block.entry", graph.entry_channels, graph.nodes[0].c_out)
        for node in graph.nodes[1:]:
            _conv_specs(specs, f"stage{s}.block.conv{node.k}", node.c_in, node.c_out, 3)
        _conv_specs(specs, f"stage{s}.trans.conv", graph.out_channels, plan.trans_channels)
        _conv_specs(specs, f"stage{s}.trans.se.fc1", plan.trans_channels, plan.se_hidden, bn=False)
        _conv_specs(specs, f"stage{s}.trans.se.fc2", plan.se_hidden, plan.trans_channels, bn=False)

    dec = net.decoder
    D, T = dec.embed_dim, dec.patch_size ** 2
    widths = [p.trans_channels for p in net.plan()]
    for j, tap in enumerate(dec.taps):
        _conv_specs(specs, f"decoder.proj{j}", widths[tap - 1], D, bn=False)
    _conv_specs(specs, "decoder.fuse", len(dec.taps) * D, D)
    _conv_specs(specs, "decoder.short", D, D)
    for p in dec.pool_sizes:
        _conv_specs(specs, f"decoder.pool{p}", D, D, bn=False)
    for r in dec.window_ratios:
        _linear_specs(specs, f"decoder.lawin{r}.mix", T, T)
        for proj in ("q", "k", "v", "o"):
            _linear_specs(specs, f"decoder.lawin{r}.{proj}", D, D)
    branches = 1 + len(dec.pool_sizes) + len(dec.window_ratios)
    _conv_specs(specs, "decoder.fuse2", branches * D, D)
    for name in head_names(net):
        _conv_specs(specs, f"head.{name}", D, 1, bn=False)
    return specs


def init_weights(net, seed=0):
    """Seeded parameter store.

    PRNG: numpy ``Generator(PCG64(seed))``, one ``uniform`` draw per tensor in
    declaration order (float64, then cast to float32).  Weights use the He
    bound ``sqrt(6 / fan_in)``, biases ``1 / sqrt(fan_in)``; batch-norm is
    folded to identity (scale 1, shift 0) and consumes no draws.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors = {}
    for name, shape, fan_in, kind in param_specs(net):
        if kind == "bn_scale":
            t = np.ones(shape)
        elif kind == "bn_shift":
            t = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / fan_in) if kind == "weight" else 1.0 / math.sqrt(fan_in)
            t = rng.uniform(-bound, bound, size=shape)
        tensors[name] = t.astype(np.float32)
    return WeightStore(tensors, provenance="seeded-init", seed=seed)


# -- large window attention ---------------------------------------------------

def large_window_attention(q_feat, ctx_feat, patch, ratio, heads, params, return_weights=False):
    """Lawin-style attention of P x P query patches to pooled R*P x R*P context.

    For every query patch the surrounding ``(R P) x (R P)`` context window
    (zero padded at the borders, centred on the patch) is average-pooled to
    ``P x P``, mixed across its ``P*P`` tokens by a linear layer, and attended
    to with multi-head scaled dot-product attention.

    ``params`` maps ``mix.w/mix.b`` (T x T) and ``q/k/v/o.w/.b`` (D x D).
    """
    n, d, h, w = q_feat.shape
    if ctx_feat.shape != q_feat.shape:
        raise ValueError(f"query {q_feat.shape} and context {ctx_feat.shape} differ")
    if h % patch or w % patch:
        raise ValueError(f"feature {h}x{w} not divisible by patch size {patch}")
    if patch % ratio:
        raise ValueError(f"window ratio {ratio} must divide patch size {patch}")
    if d % heads:
        raise ValueError(f"embed dim {d} not divisible by {heads} heads")
    nh, nw, T = h // patch, w // patch, patch * patch
    B = n * nh * nw

    def tokens(x):
        # (N, D, nh, P, nw, P) -> (N, nh, nw, P, P, D) -> (B, T, D)
        x = x.reshape(n, d, nh, patch, nw, patch).transpose(0, 2, 4, 3, 5, 1)
        return np.ascontiguousarray(x).reshape(B, T, d)

    total = (ratio - 1) * patch
    lo, hi = total // 2, total - total // 2
    padded = np.pad(ctx_feat, ((0, 0), (0, 0), (lo, hi), (lo, hi))) if total else ctx_feat
    pooled = ops.avgpool(padded, ratio) if ratio > 1 else padded
    step = patch // ratio
    win = np.lib.stride_tricks.sliding_window_view(pooled, (patch, patch), axis=(2, 3))
    win = win[:, :, ::step, ::step][:, :, :nh, :nw]  # (N, D, nh, nw, P, P)
    ctx = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 5, 1)).reshape(B, T, d)

    mixed = ops.linear(ctx.transpose(0, 2, 1).reshape(B * d, T), params["mix.w"], params["mix.b"])
    mixed = mixed.reshape(B, d, T).transpose(0, 2, 1).reshape(B * T, d)

    q = ops.linear(tokens(q_feat).reshape(B * T, d), params["q.w"], params["q.b"])
    k = ops.linear(mixed, params["k.w"], params["k.b"])
    v = ops.linear(mixed, params["v.w"], params["v.b"])
    dh = d // heads

    def split(x):
        return np.ascontiguousarray(x.reshape(B, T, heads, dh).transpose(0, 2, 1, 3))

    q, k, v = split(q), split(k), split(v)
    with ops._single_blas():
        scores = (q @ k.transpose(0, 1, 3, 2)) * np.float32(1.0 / math.sqrt(dh))
        attn = ops.softmax(scores, axis=-1)
        y = attn @ v  # (B, heads, T, dh)
    y = y.transpose(0, 2, 1, 3).reshape(B * T, d)
    y = ops.linear(y, params["o.w"], params["o.b"])
    y = y.reshape(n, nh, nw, patch, patch, d).transpose(0, 5, 1, 3, 2, 4).reshape(n, d, h, w)
    y = np.ascontiguousarray(y, dtype=np.float32)
    if return_weights:
        return y, attn
    return y


# -- forward -----------------------------------------------------------------

def total_stride(net):
    s = math.prod(c.stride for c in net.stem)
    return s * 2 ** sum(st.transition.downsample for st in net.stages)


class _Runner:
    def __init__(self, weights):
        self.w = weights

    def conv(self, name, x, k=1, stride=1, bn=True, act="relu"):
        y = ops.conv2d(x, self.w[f"{name}.w"], self.w[f"{name}.b"], stride=stride, pad=k // 2)
        if bn:
            y = ops.batchnorm(y, self.w[f"{name}.bn_scale"], self.w[f"{name}.bn_shift"])
        if act == "relu":
            y = ops.relu(y)
        elif act == "gelu":
            y = ops.gelu(y)
        return y

    def params(self, prefix):
        keys = ("mix.w", "mix.b", "q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b")
        return {key: self.w[f"{prefix}.{key}"] for key in keys}


def _run_block(run, prefix, graph, x):
    if graph.csp is not None:
        x, bypass = x[:, :graph.csp.block_channels], x[:, graph.csp.block_channels:]
    else:
        bypass = None
    g = graph.spec.g
    outs = {}
    if graph.has_entry_conv:
        outs[0] = run.conv(f"{prefix}.entry", x)
    else:
        outs[0] = x

    def share(src, dst):
        if graph.spec.version == "v1":
            return outs[src]
        # consumed slots come first, in ascending target order
        slot = [t for t, _ in graph.nodes[src].out_targets].index(dst)
        return outs[src][:, slot * g:(slot + 1) * g]

    for node in graph.nodes[1:]:
        inp = np.concatenate([share(s, node.k) for s in node.in_sources], axis=1)
        outs[node.k] = run.conv(f"{prefix}.conv{node.k}", inp, k=3)

    parts = []
    for k, slot in graph.block_out_concat_order:
        if graph.spec.version == "v1":
            parts.append(outs[k])
        else:
            parts.append(outs[k][:, slot * g:(slot + 1) * g])
    if bypass is not None:
        parts.append(bypass)
    return np.concatenate(parts, axis=1)


def _attention_padded(run, name, feat, dec, ratio):
    _, _, h, w = feat.shape
    P = dec.patch_size
    ph, pw = -h % P, -w % P
    if ph or pw:
        feat = np.pad(feat, ((0, 0), (0, 0), (ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)))
    y = large_window_attention(feat, feat, P, ratio, dec.heads, run.params(name))
    if ph or pw:
        y = y[:, :, ph // 2:ph // 2 + h, pw // 2:pw // 2 + w]
    return y


def forward(net, weights, image):
    """Run HarDNet-DFUS on an N x C x H x W float32 image batch.

    Returns main, deep-supervision and boundary logit maps at input
    resolution plus the per-stage feature pyramid.
    """
    image = np.asarray(image)
    if image.ndim != 4 or image.shape[1] != net.input_channels:
        raise ValueError(
            f"expected N x {net.input_channels} x H x W input, got shape {image.shape}")
    n, _, H, W = image.shape
    stride = total_stride(net)
    if H % stride or W % stride:
        raise ValueError(f"input {H}x{W} must be divisible by the network stride {stride}")
    weights.check(net)
    run = _Runner(weights)
    x = image.astype(np.float32)

    for i, conv in enumerate(net.stem):
        x = run.conv(f"stem.conv{i}", x, k=conv.kernel, stride=conv.stride)

    pyramid, strides = {}, {}
    cur = math.prod(c.stride for c in net.stem)
    for s, (stage, plan) in enumerate(zip(net.stages, net.plan()), start=1):
        x = _run_block(run, f"stage{s}.block", plan.graph, x)
        x = run.conv(f"stage{s}.trans.conv", x)
        w = weights
        x = ops.se_gate(x, w[f"stage{s}.trans.se.fc1.w"], w[f"stage{s}.trans.se.fc1.b"],
                        w[f"stage{s}.trans.se.fc2.w"], w[f"stage{s}.trans.se.fc2.b"])
        pyramid[s], strides[s] = x, cur
        if stage.transition.downsample:
            x = ops.maxpool2(x)
            cur *= 2

    dec = net.decoder
    base = pyramid[dec.taps[0]]
    hf, wf = base.shape[2:]
    projected = []
    for j, tap in enumerate(dec.taps):
        p = run.conv(f"decoder.proj{j}", pyramid[tap], bn=False, act="gelu")
        projected.append(ops.bilinear_resize(p, hf, wf))
    fused = run.conv("decoder.fuse", np.concatenate(projected, axis=1))

    branches = [run.conv("decoder.short", fused)]
    for p in dec.pool_sizes:
        pooled = ops.adaptive_avgpool(fused, p)
        branches.append(ops.bilinear_resize(run.conv(f"decoder.pool{p}", pooled, bn=False), hf, wf))
    for r in dec.window_ratios:
        branches.append(_attention_padded(run, f"decoder.lawin{r}", fused, dec, r))
    fused2 = run.conv("decoder.fuse2", np.concatenate(branches, axis=1))

    taps = {"pre_attention": fused, "post_attention": fused2}

    def head(name, feat):
        logits = run.conv(f"head.{name}", feat, bn=False, act=None)
        return ops.bilinear_resize(logits, H, W)

    main = head("main", fused2)
    deep = [head(f"deep{i + 1}", taps[t]) for i, t in enumerate(net.heads.deep)]
    boundary = head("boundary", fused2) if net.heads.boundary else None
    return ForwardOutputs(main, deep, boundary, pyramid, strides)
