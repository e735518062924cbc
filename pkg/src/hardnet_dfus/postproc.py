"""Prediction compression, thresholding, hole filling, Dice and TTA ensembling."""

from __future__ import annotations

import enum

import numpy as np
from scipy import ndimage
from scipy.special import expit

_CROSS = ndimage.generate_binary_structure(2, 1)


class TTAMode(str, enum.Enum):
    NONE = "none"
    HFLIP = "hflip"
    VFLIP = "vflip"
    HVFLIP = "hvflip"

    @classmethod
    def parse(cls, text):
        aliases = {"none": cls.NONE, "h": cls.HFLIP, "hflip": cls.HFLIP,
                   "v": cls.VFLIP, "vflip": cls.VFLIP, "hv": cls.HVFLIP, "vh": cls.HVFLIP,
                   "hvflip": cls.HVFLIP}
        if isinstance(text, cls):
            return text
        try:
            return aliases[text]
        except KeyError:
            raise ValueError(f"unknown TTA mode {text!r}; expected none, h, v or hv") from None


def _flip_h(x):
    return x[..., ::-1]


def _flip_v(x):
    return x[..., ::-1, :]


def _flip_hv(x):
    return x[..., ::-1, ::-1]


# Each mode adds at most one extra flipped copy of the input; every flip is
# its own inverse.
TTA_VARIANTS = {
    TTAMode.NONE: (("identity", None),),
    TTAMode.HFLIP: (("identity", None), ("hflip", _flip_h)),
    TTAMode.VFLIP: (("identity", None), ("vflip", _flip_v)),
    TTAMode.HVFLIP: (("identity", None), ("hvflip", _flip_hv)),
}


def compress(logits, method="tanh"):
    """Map logits to [0, 1].

    ``sigmoid``: elementwise.  ``tanh``: ``tanh`` then per-map min-max
    normalisation over the last two axes; a constant map becomes all zeros.
    """
    x = np.asarray(logits, dtype=np.float64)
    if method == "sigmoid":
        return expit(x)
    if method != "tanh":
        raise ValueError(f"unknown compression {method!r}; expected tanh or sigmoid")
    t = np.tanh(x)
    lo = t.min(axis=(-2, -1), keepdims=True)
    hi = t.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    out = np.divide(t - lo, span, out=np.zeros_like(t), where=span > 0)
    return np.clip(out, 0.0, 1.0)


def threshold(prob, level=0.5):
    """Round to {0, 1}; values equal to ``level`` round up."""
    return (np.asarray(prob) >= level).astype(np.uint8)


def fill_holes(mask, border_pad=True):
    """Hole filling by flood fill from (0, 0), inversion and OR.

    With ``border_pad`` the mask is first framed by one background pixel, so
    the flood from the corner reaches every background region that touches
    the image border.  ``border_pad=False`` floods the raw mask from pixel
    (0, 0) only; if that pixel is foreground every background pixel is
    treated as a hole.  Connectivity is 4-neighbour.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim != 2:
        raise ValueError(f"fill_holes expects a 2-D mask, got shape {m.shape}")
    work = np.pad(m, 1, constant_values=False) if border_pad else m
    labels, _ = ndimage.label(~work, structure=_CROSS)
    seed = labels[0, 0]
    flooded = (labels == seed) if seed else np.zeros_like(work)
    if border_pad:
        flooded = flooded[1:-1, 1:-1]
    return (m | ~flooded).astype(np.uint8)


def dice(pred, gt):
    """``2 |A & B| / (|A| + |B|)``; two empty masks score 1."""
    a = np.asarray(pred).astype(bool)
    b = np.asarray(gt).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def tta_ensemble(models, image, mode="none", method="tanh"):
    """Average compressed predictions over models (folds) and flip variants.

    ``models`` is a callable or a sequence of callables mapping an
    ``N x C x H x W`` image to ``N x 1 x H x W`` logits.  Each run sees the
    flipped image, its logits are flipped back, compressed, and all
    probability maps are averaged in float64.
    """
    if callable(models):
        models = [models]
    models = list(models)
    if not models:
        raise ValueError("tta_ensemble needs at least one model")
    variants = TTA_VARIANTS[TTAMode.parse(mode)]
    acc = None
    count = 0
    for model in models:
        for _, flip in variants:
            x = image if flip is None else np.ascontiguousarray(flip(image))
            logits = np.asarray(model(x))
            if flip is not None:
                logits = flip(logits)
            prob = compress(logits, method)
            acc = prob if acc is None else acc + prob
            count += 1
    return acc / count


def predict_mask(prob, fill=True):
    """Threshold an ``H x W`` probability map and optionally fill holes."""
    mask = threshold(prob)
    return fill_holes(mask) if fill else mask
