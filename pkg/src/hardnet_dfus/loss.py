"""Composite segmentation loss with analytic logit gradients.

    L = l(G, O) + sum_i l(G, D_i) + bce(G_B, B),   l = wbce + wiou

The weighted terms follow the F3Net structure loss: a pixel weight map
``W = 1 + 5 |avgpool31(G) - G|`` emphasises pixels near mask edges.
Everything here runs in float64.  Maps are ``(..., H, W)``; per-map values
are averaged over the leading axes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.special import expit

FLAG_NAMES = ("deep1", "deep2", "boundary")
_FLAG_ALIASES = {"d1": "deep1", "d2": "deep2", "b": "boundary",
                 "deep1": "deep1", "deep2": "deep2", "boundary": "boundary"}

# Loss-weight ablation grid: none, deep1, deep1+deep2, deep1+boundary, all.
ABLATION_GRID = (
    frozenset(),
    frozenset({"deep1"}),
    frozenset({"deep1", "deep2"}),
    frozenset({"deep1", "boundary"}),
    frozenset({"deep1", "deep2", "boundary"}),
)


def parse_flags(text):
    """``"d1,d2,b"`` -> ``frozenset({"deep1", "deep2", "boundary"})``."""
    if isinstance(text, (set, frozenset, list, tuple)):
        items = text
    else:
        items = [t.strip() for t in text.split(",") if t.strip()]
    out = set()
    for item in items:
        if item not in _FLAG_ALIASES:
            raise ValueError(f"unknown loss flag {item!r}; expected d1, d2 or b")
        out.add(_FLAG_ALIASES[item])
    return frozenset(out)


def _binary(G, what="G"):
    G = np.asarray(G)
    if not np.isin(G, (0, 1)).all():
        raise ValueError(f"{what} must be binary (values in {{0, 1}})")
    return G.astype(np.float64)


def _check_shapes(*arrays):
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def pixel_weight_map(G, include_pad=True):
    """``1 + 5 |avgpool_31x31(G) - G|`` with stride 1 and 15 pixels of zero padding.

    With ``include_pad`` the window mean always divides by 961 (padding counts
    as background); otherwise only in-image pixels are averaged.
    """
    G = _binary(G)
    size = (1,) * (G.ndim - 2) + (31, 31)
    pooled = ndimage.uniform_filter(G, size=size, mode="constant", cval=0.0)
    if not include_pad:
        valid = ndimage.uniform_filter(np.ones_like(G), size=size, mode="constant", cval=0.0)
        pooled = pooled / valid
    return 1.0 + 5.0 * np.abs(pooled - G)


def _softplus_bce(x, g):
    # max(x, 0) - x g + log(1 + exp(-|x|))
    return np.maximum(x, 0.0) - x * g + np.log1p(np.exp(-np.abs(x)))


def _wbce_maps(x, g, w):
    return (w * _softplus_bce(x, g)).sum(axis=(-2, -1)) / w.sum(axis=(-2, -1))


def _wiou_maps(x, g, w):
    p = expit(x)
    inter = (w * p * g).sum(axis=(-2, -1))
    union = (w * (p + g)).sum(axis=(-2, -1))
    return 1.0 - (inter + 1.0) / (union - inter + 1.0)


def _bce_maps(x, g):
    return _softplus_bce(x, g).mean(axis=(-2, -1))


def _batch_mean(v):
    return float(np.mean(v))


def weighted_bce(logits, G, W):
    """Weighted BCE: ``sum W * bce(sigmoid(x), G) / sum W``."""
    _check_shapes(logits, G, W)
    x = np.asarray(logits, dtype=np.float64)
    return _batch_mean(_wbce_maps(x, _binary(G), np.asarray(W, dtype=np.float64)))


def weighted_iou(logits, G, W):
    """Weighted soft IoU loss ``1 - (inter + 1) / (union - inter + 1)``."""
    _check_shapes(logits, G, W)
    x = np.asarray(logits, dtype=np.float64)
    return _batch_mean(_wiou_maps(x, _binary(G), np.asarray(W, dtype=np.float64)))


def bce(logits, target):
    _check_shapes(logits, target)
    return _batch_mean(_bce_maps(np.asarray(logits, dtype=np.float64), _binary(target, "target")))


def boundary_target(G):
    """One-pixel-wide morphological gradient: dilate3x3(G) XOR erode3x3(G), zero padded."""
    G = np.asarray(G)
    mask = _binary(G).astype(bool)
    structure = np.ones((1,) * (G.ndim - 2) + (3, 3), dtype=bool)
    dil = ndimage.binary_dilation(mask, structure=structure, border_value=0)
    ero = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    return (dil ^ ero).astype(np.uint8)


# -- gradients -------------------------------------------------------------

def _grad_wbce(x, g, w):
    sw = w.sum(axis=(-2, -1), keepdims=True)
    return w * (expit(x) - g) / sw


def _grad_wiou(x, g, w):
    p = expit(x)
    inter = (w * p * g).sum(axis=(-2, -1), keepdims=True)
    union = (w * (p + g)).sum(axis=(-2, -1), keepdims=True)
    a, b = inter + 1.0, union - inter + 1.0
    dp = -(w * g * b - a * w * (1.0 - g)) / (b * b)
    return dp * p * (1.0 - p)


def _grad_bce(x, g):
    return (expit(x) - g) / (x.shape[-1] * x.shape[-2])


def _batch_count(x):
    return int(np.prod(x.shape[:-2])) if x.ndim > 2 else 1


@dataclass
class LossInputs:
    O: np.ndarray
    G: np.ndarray
    D: list = field(default_factory=list)
    B: np.ndarray | None = None
    G_B: np.ndarray | None = None


@dataclass
class LossBreakdown:
    total: float
    main: dict
    deep: list
    boundary_bce: float | None
    grads: dict

    def terms(self):
        """Flat list of enabled term values, in evaluation order."""
        out = [self.main["wbce"], self.main["wiou"]]
        for d in self.deep:
            if d is not None:
                out += [d["wbce"], d["wiou"]]
        if self.boundary_bce is not None:
            out.append(self.boundary_bce)
        return out


def _structure_terms(x, g, w):
    n = _batch_count(x)
    wbce = _batch_mean(_wbce_maps(x, g, w))
    wiou = _batch_mean(_wiou_maps(x, g, w))
    grad = (_grad_wbce(x, g, w) + _grad_wiou(x, g, w)) / n
    return {"wbce": wbce, "wiou": wiou}, grad


def composite_loss(inputs, enable=frozenset(), W=None):
    """Evaluate the composite loss and its gradients w.r.t. every enabled logit map.

    ``enable`` holds any of ``"deep1"``, ``"deep2"``, ``"boundary"``.  Gradient
    keys are ``"O"``, ``"D1"``, ``"D2"`` and ``"B"``.
    """
    enable = parse_flags(enable)
    G = _binary(inputs.G)
    x = np.asarray(inputs.O, dtype=np.float64)
    _check_shapes(x, G)
    if W is None:
        W = pixel_weight_map(G)

    main, grad_o = _structure_terms(x, G, W)
    grads = {"O": grad_o}
    total = main["wbce"] + main["wiou"]

    deep = []
    for i, flag in enumerate(("deep1", "deep2")):
        if flag not in enable:
            deep.append(None)
            continue
        if len(inputs.D) <= i or inputs.D[i] is None:
            raise ValueError(f"loss flag {flag} is enabled but deep output D{i + 1} is missing")
        d = np.asarray(inputs.D[i], dtype=np.float64)
        _check_shapes(d, G)
        terms, grads[f"D{i + 1}"] = _structure_terms(d, G, W)
        deep.append(terms)
        total += terms["wbce"] + terms["wiou"]

    boundary = None
    if "boundary" in enable:
        if inputs.B is None:
            raise ValueError("loss flag boundary is enabled but boundary output B is missing")
        b = np.asarray(inputs.B, dtype=np.float64)
        gb = _binary(boundary_target(G) if inputs.G_B is None else inputs.G_B, "G_B")
        _check_shapes(b, gb)
        boundary = bce(b, gb)
        grads["B"] = _grad_bce(b, gb) / _batch_count(b)
        total += boundary

    return LossBreakdown(total, main, deep, boundary, grads)


# -- finite-difference verification ------------------------------------------

def _random_inputs(rng, shape):
    G = (rng.random(shape) < 0.5).astype(np.float64)
    maps = {name: rng.normal(0.0, 1.0, size=shape) for name in ("O", "D1", "D2", "B")}
    return G, maps


def grad_check(seed=0, shape=(8, 8), enable=ABLATION_GRID[-1], h=1e-5, max_coords=256):
    """Compare analytic logit gradients with central differences.

    Inputs are drawn from ``numpy.random.default_rng(seed)``.  Every coordinate
    is checked when a map has at most ``max_coords`` pixels, otherwise a
    random subset of that size.  Relative error per coordinate is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-300)``.
    """
    enable = parse_flags(enable)
    rng = np.random.default_rng(seed)
    G, maps = _random_inputs(rng, shape)
    GB = boundary_target(G).astype(np.float64)
    W = pixel_weight_map(G)
    inputs = LossInputs(maps["O"], G, [maps["D1"], maps["D2"]], maps["B"], GB)
    result = composite_loss(inputs, enable, W=W)

    # each term of L depends on exactly one logit map
    term_fns = {
        "O": lambda x: _wbce_maps(x, G, W) + _wiou_maps(x, G, W),
        "D1": lambda x: _wbce_maps(x, G, W) + _wiou_maps(x, G, W),
        "D2": lambda x: _wbce_maps(x, G, W) + _wiou_maps(x, G, W),
        "B": lambda x: _bce_maps(x, GB),
    }
    report = {"seed": seed, "shape": list(shape), "h": h,
              "flags": sorted(enable), "loss": result.total, "per_term": {}}
    worst = 0.0
    size = int(np.prod(shape))
    for name, analytic in result.grads.items():
        x0 = maps[name]
        fn = term_fns[name]
        coords = np.arange(size) if size <= max_coords else rng.choice(size, max_coords, replace=False)
        k = len(coords)
        stack = np.repeat(x0[None], 2 * k, axis=0).reshape(2 * k, -1)
        stack[np.arange(k), coords] += h
        stack[k + np.arange(k), coords] -= h
        # L(x +- h e_i) - L(x -+ h e_i) reduces to the difference of this term
        values = fn(stack.reshape((2 * k,) + tuple(shape)))
        numeric = (values[:k] - values[k:]) / (2 * h)
        a = analytic.reshape(-1)[coords]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-300)
        rel = np.abs(a - numeric) / denom
        err = float(rel.max())
        report["per_term"][name] = {"max_rel_err": err, "coords": k}
        worst = max(worst, err)
    report["max_rel_err"] = worst
    return report


def report_json(report):
    return json.dumps(report, indent=2, sort_keys=True)
