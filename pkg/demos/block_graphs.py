"""Walk through the v2 dense-block link pattern and its channel bookkeeping."""

from hardnet_dfus import BlockSpec, build_block, divisors, wrap_csp

n, g = 9, 16
graph = build_block(BlockSpec("v2", n, g))
print(f"v2 block n={n} g={g}, divisors {divisors(n)}")

for node in graph.nodes:
    targets = [t for t, _ in node.out_targets]
    print(f"  layer {node.k:2d}  from {list(node.in_sources)!s:12}  to {targets!s:12}"
          f"  c_in {node.c_in:3d}  c_out {node.c_out:3d}  routed out {node.output_routed_shares}")

# layers fed straight from the block input
print("shortcuts from input:", [k for k in range(1, n + 1) if 0 in graph.sources(k)])
print("block output channels:", graph.block_out_channels)

# the original HarDNet pattern for comparison
v1 = build_block(BlockSpec("v1", 8, 14, 1.7), in_channels=64)
for node in v1.nodes[1:]:
    print(f"  v1 layer {node.k}  from {list(node.in_sources)}  c_in {node.c_in}  c_out {node.c_out}")
print("v1 output layers:", [k for k, _ in v1.block_out_concat_order])

# half the input bypasses the block and is concatenated afterwards
wrapped = wrap_csp(build_block(BlockSpec("v2", 3, 48), in_channels=64), 0.5)
print(f"CSP: {wrapped.in_channels} in -> {wrapped.csp.block_channels} through the block, "
      f"{wrapped.csp.bypass_channels} bypass, {wrapped.out_channels} out")
