"""Compression, thresholding, hole filling and TTA on synthetic predictions."""

import numpy as np

from hardnet_dfus import compress, dice, fill_holes, tta_ensemble
from hardnet_dfus.postproc import threshold

# all-positive logits: sigmoid keeps everything, tanh + min-max does not
logits = np.linspace(0.5, 3.0, 36).reshape(6, 6)
print("sigmoid mask\n", threshold(compress(logits, "sigmoid")))
print("tanh mask\n", threshold(compress(logits, "tanh")))

ring = np.zeros((9, 9), np.uint8)
ring[1:8, 1:8] = 1
ring[3:6, 3:6] = 0
print("ring\n", ring)
print("filled\n", fill_holes(ring))


def model(x):
    # a lopsided predictor, so the flipped runs disagree
    ramp = np.linspace(-2, 2, x.shape[-1])
    return x.mean(axis=1, keepdims=True) * 4 - 2 + ramp


image = np.zeros((1, 3, 16, 16))
image[..., 4:12, 4:12] = 1
gt = image[0, 0].astype(np.uint8)
for mode in ("none", "h", "v", "hv"):
    prob = tta_ensemble(model, image, mode, "sigmoid")[0, 0]
    print(f"tta {mode:4} dice {dice(threshold(prob), gt):.4f}")
