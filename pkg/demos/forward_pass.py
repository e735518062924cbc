"""Run the full network on a random image with seeded weights."""

import time

import numpy as np

from hardnet_dfus import forward, init_weights, load_config

net, _ = load_config("hardnetv2-53")
weights = init_weights(net, seed=0)
print(f"{len(weights)} tensors, {weights.num_params:,} parameters")

image = np.random.default_rng(0).random((1, 3, 512, 512), dtype=np.float32)
start = time.perf_counter()
out = forward(net, weights, image)
print(f"forward took {time.perf_counter() - start:.2f}s")

for stage, feat in out.pyramid.items():
    print(f"  stage {stage}: stride {out.strides[stage]:2d}  {feat.shape}")
print("main", out.main.shape, "deep", [d.shape for d in out.deep], "boundary", out.boundary.shape)
print("main logits range", float(out.main.min()), float(out.main.max()))

again = forward(net, weights, image)
print("bit-identical rerun:", again.main.tobytes() == out.main.tobytes())
