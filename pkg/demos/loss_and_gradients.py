"""The composite loss on a toy mask, and a finite-difference check of its gradients."""

import numpy as np

from hardnet_dfus import LossInputs, boundary_target, composite_loss, grad_check, pixel_weight_map
from hardnet_dfus.loss import ABLATION_GRID

G = np.zeros((32, 32))
G[8:24, 10:22] = 1
W = pixel_weight_map(G)
print("weight map range", W.min(), W.max())
print("boundary pixels", int(boundary_target(G).sum()))

rng = np.random.default_rng(0)
O = 4 * (G - 0.5) + rng.normal(0, 1, G.shape)
D1 = 2 * (G - 0.5) + rng.normal(0, 1, G.shape)
D2 = 3 * (G - 0.5) + rng.normal(0, 1, G.shape)
B = 4 * (boundary_target(G) - 0.5)

for flags in ABLATION_GRID:
    out = composite_loss(LossInputs(O, G, [D1, D2], B), flags)
    print(f"{sorted(flags)!s:32} L = {out.total:.5f}")

for flags in ABLATION_GRID:
    report = grad_check(seed=0, shape=(8, 8), enable=flags)
    print(f"{sorted(flags)!s:32} max rel err {report['max_rel_err']:.2e}")
