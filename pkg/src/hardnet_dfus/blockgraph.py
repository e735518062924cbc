"""Connection graphs for HarDNet (v1) and HarDNetV2 (v2) dense blocks.

A block of depth ``n`` has nodes ``0..n``: node 0 is the block input and
nodes ``1..n`` are 3x3 conv layers.

v2 link rule: layer ``k`` receives one edge from ``k - f`` for every divisor
``f`` of ``n`` that also divides ``k``.  Every node splits its output into
equal ``g``-channel shares, one per outgoing slot ``f`` (``f | n`` and
``f | k``); a share whose target ``k + f`` lies past ``n`` is routed to the
block output.  In- and out-degree of layer ``k`` are both ``d(gcd(n, k))``, so
every v2 conv has as many input as output channels.

v1 link rule (original HarDNet): layer ``k`` links to ``k - 2**i`` for every
``2**i`` dividing ``k``; every consumer receives the full output, and the
block output concatenates odd layers and the last layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace


@dataclass(frozen=True)
class BlockSpec:
    version: str = "v2"
    n: int = 9
    g: int = 16
    m: float = 1.7
    csp_wrap: bool = False

    def __post_init__(self):
        if self.version not in ("v1", "v2"):
            raise ValueError(f"block version must be 'v1' or 'v2', got {self.version!r}")
        if not isinstance(self.n, int) or self.n < 1:
            raise ValueError(f"block depth n must be an integer >= 1, got {self.n!r}")
        if not isinstance(self.g, int) or self.g < 1:
            raise ValueError(f"growth g must be an integer >= 1, got {self.g!r}")
        if self.version == "v1" and not self.m > 1:
            raise ValueError(f"v1 blocks need multiplier m > 1, got {self.m!r}")


@dataclass(frozen=True)
class LayerNode:
    k: int
    in_sources: tuple[int, ...]
    # (target, channels) per outgoing slot; target n + 1 never appears, output
    # routed slots are counted in output_routed_shares instead.
    out_targets: tuple[tuple[int, int], ...]
    c_in: int
    c_out: int
    output_routed_shares: int = 0

    @property
    def total_shares(self):
        return len(self.out_targets) + self.output_routed_shares


@dataclass(frozen=True)
class CSPInfo:
    ratio: float
    in_channels: int
    block_channels: int
    bypass_channels: int


@dataclass(frozen=True)
class BlockGraph:
    spec: BlockSpec
    in_channels: int
    nodes: tuple[LayerNode, ...]
    block_out_channels: int
    block_out_concat_order: tuple[tuple[int, int], ...]
    csp: CSPInfo | None = field(default=None)

    def sources(self, k):
        return self.nodes[k].in_sources

    @property
    def out_channels(self):
        """Channels leaving the (possibly CSP-wrapped) block."""
        if self.csp is None:
            return self.block_out_channels
        return self.block_out_channels + self.csp.bypass_channels

    @property
    def entry_channels(self):
        """Channels entering the block proper (after any CSP split)."""
        return self.csp.block_channels if self.csp else self.in_channels

    @property
    def has_entry_conv(self):
        return self.spec.version == "v2"

    @property
    def conv_count(self):
        return self.spec.n + (1 if self.has_entry_conv else 0)


def divisors(n):
    """Positive divisors of ``n`` in ascending order."""
    if not isinstance(n, int) or n < 1:
        raise ValueError(f"divisors() needs a positive integer, got {n!r}")
    small, large = [], []
    for f in range(1, math.isqrt(n) + 1):
        if n % f == 0:
            small.append(f)
            if f != n // f:
                large.append(n // f)
    return small + large[::-1]


def divisor_count(n):
    return len(divisors(n))


def _two_adic(k):
    z = 0
    while k % 2 == 0:
        k //= 2
        z += 1
    return z


def v1_channels(k, g, m):
    """Output width of v1 layer k: g * m**z floored to an even number (min 2)."""
    c = int(g * m ** _two_adic(k))
    return max(2, c - c % 2)


def build_block(spec, in_channels=None):
    """Compile ``spec`` into an explicit :class:`BlockGraph`.

    ``in_channels`` is the width arriving at the block.  For v2 it feeds the
    1x1 entry conv and defaults to ``g * d(n)``; for v1 it is node 0's width
    and defaults to ``2 * g``.
    """
    if spec.version == "v2":
        return _build_v2(spec, in_channels)
    return _build_v1(spec, in_channels)


def _build_v2(spec, in_channels):
    n, g = spec.n, spec.g
    fs = divisors(n)
    if in_channels is None:
        in_channels = g * len(fs)

    nodes = []
    concat = []
    for k in range(n + 1):
        slots = [f for f in fs if k % f == 0]
        sources = tuple(sorted(k - f for f in slots)) if k else ()
        targets = tuple((k + f, g) for f in slots if k + f <= n)
        routed = 0
        for slot, f in enumerate(slots):
            if k + f > n:
                concat.append((k, slot))
                routed += 1
        width = g * len(slots)
        nodes.append(LayerNode(k, sources, targets,
                               c_in=in_channels if k == 0 else g * len(sources),
                               c_out=width, output_routed_shares=routed))
    return BlockGraph(spec, in_channels, tuple(nodes),
                      block_out_channels=g * len(concat),
                      block_out_concat_order=tuple(concat))


def _build_v1(spec, in_channels):
    n, g, m = spec.n, spec.g, spec.m
    if in_channels is None:
        in_channels = 2 * g
    widths = [in_channels] + [v1_channels(k, g, m) for k in range(1, n + 1)]

    links = {0: ()}
    for k in range(1, n + 1):
        src = []
        i = 0
        while 2 ** i <= k:
            if k % 2 ** i == 0:
                src.append(k - 2 ** i)
            i += 1
        links[k] = tuple(sorted(src))

    consumers = {k: [] for k in range(n + 1)}
    for k in range(1, n + 1):
        for s in links[k]:
            consumers[s].append(k)

    outputs = [k for k in range(1, n + 1) if k % 2 == 1 or k == n]
    nodes = []
    for k in range(n + 1):
        c_in = in_channels if k == 0 else sum(widths[s] for s in links[k])
        nodes.append(LayerNode(k, links[k],
                               tuple((t, widths[k]) for t in sorted(consumers[k])),
                               c_in=c_in, c_out=widths[k],
                               output_routed_shares=1 if k in outputs else 0))
    return BlockGraph(spec, in_channels, tuple(nodes),
                      block_out_channels=sum(widths[k] for k in outputs),
                      block_out_concat_order=tuple((k, 0) for k in outputs))


def wrap_csp(graph, split_ratio=0.5):
    """Route ``floor(in * ratio)`` input channels around the block.

    The block path keeps the leading channels (and any remainder); the
    bypass part is concatenated after the block output.
    """
    if graph.csp is not None:
        raise ValueError("block graph is already CSP-wrapped")
    if not 0.0 < split_ratio < 1.0:
        raise ValueError(f"CSP split ratio must lie in (0, 1), got {split_ratio!r}")
    bypass = int(math.floor(graph.in_channels * split_ratio))
    block = graph.in_channels - bypass
    if bypass < 1 or block < 1:
        raise ValueError(
            f"cannot split {graph.in_channels} channels with ratio {split_ratio}")
    rebuilt = build_block(graph.spec, block)
    return replace(rebuilt, in_channels=graph.in_channels,
                   csp=CSPInfo(split_ratio, graph.in_channels, block, bypass))
