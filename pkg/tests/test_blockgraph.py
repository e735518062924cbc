import math

import pytest
from hypothesis import given, strategies as st

from hardnet_dfus.blockgraph import BlockSpec, build_block, divisors, v1_channels, wrap_csp


def brute_divisors(n):
    return [f for f in range(1, n + 1) if n % f == 0]


def brute_sources(n, k):
    return {k - f for f in range(1, n + 1) if n % f == 0 and k % f == 0}


def d(n):
    return len(brute_divisors(n))


@pytest.mark.parametrize("n, expected", [(9, [1, 3, 9]), (1, [1]), (15, [1, 3, 5, 15])])
def test_divisors_examples(n, expected):
    assert divisors(n) == expected


@pytest.mark.parametrize("bad", [0, -3])
def test_divisors_rejects_nonpositive(bad):
    with pytest.raises(ValueError):
        divisors(bad)


@given(st.integers(1, 5000))
def test_divisors_match_trial_division(n):
    assert divisors(n) == brute_divisors(n)


def test_n9_sources_and_shortcuts():
    graph = build_block(BlockSpec("v2", 9, 16))
    assert set(graph.sources(9)) == {8, 6, 0}
    assert {k for k in range(1, 10) if 0 in graph.sources(k)} == {1, 3, 9}


def test_n1_degenerate_block():
    graph = build_block(BlockSpec("v2", 1, 8))
    assert graph.sources(1) == (0,)
    assert graph.block_out_channels == graph.nodes[1].c_out == 8
    assert graph.block_out_concat_order == ((1, 0),)


def test_n9_g16_layer3_channels():
    graph = build_block(BlockSpec("v2", 9, 16))
    assert graph.nodes[3].c_out == 32
    assert graph.nodes[3].c_in == 32
    assert set(graph.sources(3)) == {2, 0}


@pytest.mark.parametrize("n", range(1, 25))
def test_link_rule_against_oracle(n):
    graph = build_block(BlockSpec("v2", n, 4))
    for k in range(1, n + 1):
        assert set(graph.sources(k)) == brute_sources(n, k)
        assert all(s < k for s in graph.sources(k))
    assert [k for k in range(1, n + 1) if 0 in graph.sources(k)] == brute_divisors(n)


@given(st.integers(1, 40), st.integers(1, 64))
def test_share_conservation(n, g):
    graph = build_block(BlockSpec("v2", n, g))
    consumed_by = {k: 0 for k in range(n + 1)}
    for node in graph.nodes[1:]:
        for s in node.in_sources:
            consumed_by[s] += 1
    for node in graph.nodes:
        expected = d(math.gcd(n, node.k))
        assert consumed_by[node.k] + node.output_routed_shares == expected
        assert node.total_shares == expected
        assert node.c_out == g * expected
        if node.k:
            assert node.c_in == node.c_out
    assert graph.block_out_channels == g * sum(nd.output_routed_shares for nd in graph.nodes)


@given(st.integers(1, 40))
def test_only_last_layer_routes_out_and_order_is_sorted(n):
    graph = build_block(BlockSpec("v2", n, 2))
    order = list(graph.block_out_concat_order)
    assert order == sorted(order)
    assert {k for k, _ in order} == {n}


def test_build_is_deterministic():
    spec = BlockSpec("v2", 15, 24)
    assert build_block(spec) == build_block(spec)
    assert build_block(BlockSpec("v1", 8, 14)) == build_block(BlockSpec("v1", 8, 14))


def test_v1_pattern():
    graph = build_block(BlockSpec("v1", 8, 10, 1.7))
    assert graph.sources(8) == (0, 4, 6, 7)
    assert graph.sources(6) == (4, 5)
    assert graph.sources(5) == (4,)
    assert [k for k, _ in graph.block_out_concat_order] == [1, 3, 5, 7, 8]
    # z(8) = 3: 10 * 1.7**3 = 49.13 -> 48
    assert v1_channels(8, 10, 1.7) == 48
    assert v1_channels(2, 10, 1.7) == 16
    widths = [20] + [v1_channels(k, 10, 1.7) for k in range(1, 9)]
    assert graph.nodes[8].c_in == widths[0] + widths[4] + widths[6] + widths[7]


def test_spec_validation():
    with pytest.raises(ValueError):
        BlockSpec("v2", 0, 8)
    with pytest.raises(ValueError):
        BlockSpec("v2", 3, 0)
    with pytest.raises(ValueError):
        BlockSpec("v1", 3, 8, m=1.0)
    with pytest.raises(ValueError):
        BlockSpec("v3", 3, 8)


def test_csp_wrap_example():
    graph = build_block(BlockSpec("v2", 3, 48), in_channels=64)
    assert graph.block_out_channels == 96
    wrapped = wrap_csp(graph, 0.5)
    assert wrapped.csp.bypass_channels == 32
    assert wrapped.csp.block_channels == 32
    assert wrapped.out_channels == 128
    assert wrapped.in_channels == 64
    assert wrapped.entry_channels == 32


def test_csp_odd_split_gives_remainder_to_block():
    wrapped = wrap_csp(build_block(BlockSpec("v2", 3, 8), in_channels=65), 0.5)
    assert (wrapped.csp.block_channels, wrapped.csp.bypass_channels) == (33, 32)


def test_csp_errors():
    graph = build_block(BlockSpec("v2", 3, 8), in_channels=64)
    for ratio in (0.0, 1.0, -0.5, 1.5):
        with pytest.raises(ValueError):
            wrap_csp(graph, ratio)
    with pytest.raises(ValueError, match="already"):
        wrap_csp(wrap_csp(graph), 0.5)
