"""Declarative network descriptions and their JSON file format."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from importlib import resources

from .blockgraph import BlockSpec, build_block, wrap_csp

log = logging.getLogger(__name__)

HEAD_TAPS = ("pre_attention", "post_attention")


class NetSpecError(ValueError):
    """Raised for unparsable or semantically invalid network specs."""


@dataclass(frozen=True)
class ConvSpec:
    out: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class TransitionSpec:
    compress_ratio: float = 0.75
    se_reduction: int = 16
    downsample: bool = True


@dataclass(frozen=True)
class StageSpec:
    block: BlockSpec
    transition: TransitionSpec


@dataclass(frozen=True)
class DecoderSpec:
    taps: tuple[int, ...] = (3, 4, 5)
    embed_dim: int = 128
    patch_size: int = 8
    window_ratios: tuple[int, ...] = (2, 4, 8)
    heads: int = 4
    pool_sizes: tuple[int, ...] = (1,)


@dataclass(frozen=True)
class HeadsSpec:
    deep: tuple[str, ...] = HEAD_TAPS
    boundary: bool = True


@dataclass(frozen=True)
class NetSpec:
    name: str
    input_channels: int
    stem: tuple[ConvSpec, ...]
    stages: tuple[StageSpec, ...]
    decoder: DecoderSpec
    heads: HeadsSpec
    csp_ratio: float = 0.5

    def stage_strides(self):
        """Stride at which each stage's block and transition run."""
        s = 1
        for c in self.stem:
            s *= c.stride
        out = []
        for st in self.stages:
            out.append(s)
            if st.transition.downsample:
                s *= 2
        return out

    def to_dict(self):
        return asdict(self)

    def plan(self):
        """Compile every stage into a :class:`StagePlan` (channel bookkeeping)."""
        c = self.stem[-1].out if self.stem else self.input_channels
        plans = []
        for st in self.stages:
            graph = build_block(st.block, c)
            if st.block.csp_wrap:
                graph = wrap_csp(graph, self.csp_ratio)
            t_out = max(1, int(graph.out_channels * st.transition.compress_ratio))
            se_hidden = -(-t_out // st.transition.se_reduction)
            plans.append(StagePlan(c, graph, t_out, se_hidden))
            c = t_out
        return plans


@dataclass(frozen=True)
class StagePlan:
    in_channels: int
    graph: object
    trans_channels: int
    se_hidden: int


_TOP = {"name", "input_channels", "stem", "stages", "decoder", "heads", "csp_ratio"}
_REQUIRED_TOP = {"name", "input_channels", "stem", "stages"}
_CONV = {"out", "kernel", "stride"}
_STAGE = {"block", "transition"}
_BLOCK = {"version", "n", "g", "m", "csp_wrap"}
_TRANS = {"compress_ratio", "se_reduction", "downsample"}
_DECODER = {"taps", "embed_dim", "patch_size", "window_ratios", "heads", "pool_sizes"}
_HEADS = {"deep", "boundary"}


def _check_keys(obj, allowed, where, required=()):
    if not isinstance(obj, dict):
        raise NetSpecError(f"{where}: expected an object, got {type(obj).__name__}")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise NetSpecError(f"{where}: unknown field(s) {', '.join(unknown)}")
    missing = sorted(set(required) - set(obj))
    if missing:
        raise NetSpecError(f"{where}: missing required field(s) {', '.join(missing)}")


def _pos_int(value, where):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise NetSpecError(f"{where}: expected a positive integer, got {value!r}")
    return value


def _fill(obj, key, default, where):
    if key not in obj:
        log.info("netspec default %s.%s = %r", where, key, default)
        return default
    return obj[key]


def _int_list(value, where):
    if not isinstance(value, list) or not value:
        raise NetSpecError(f"{where}: expected a non-empty list of integers")
    return tuple(_pos_int(v, f"{where}[{i}]") for i, v in enumerate(value))


def parse_netspec(data):
    """Validate a decoded JSON object and build a :class:`NetSpec`."""
    _check_keys(data, _TOP, "netspec", _REQUIRED_TOP)
    name = data["name"]
    if not isinstance(name, str) or not name:
        raise NetSpecError("name: expected a non-empty string")
    in_ch = _pos_int(data["input_channels"], "input_channels")

    if not isinstance(data["stem"], list):
        raise NetSpecError("stem: expected a list")
    stem = []
    for i, c in enumerate(data["stem"]):
        where = f"stem[{i}]"
        _check_keys(c, _CONV, where, {"out"})
        stem.append(ConvSpec(_pos_int(c["out"], f"{where}.out"),
                             _pos_int(c.get("kernel", 3), f"{where}.kernel"),
                             _pos_int(c.get("stride", 1), f"{where}.stride")))

    if not isinstance(data["stages"], list) or not data["stages"]:
        raise NetSpecError("stages: at least one stage is required")
    stages = []
    for i, st in enumerate(data["stages"]):
        where = f"stages[{i}]"
        _check_keys(st, _STAGE, where, {"block"})
        b = st["block"]
        _check_keys(b, _BLOCK, f"{where}.block", {"n", "g"})
        try:
            block = BlockSpec(version=b.get("version", "v2"),
                              n=_pos_int(b["n"], f"{where}.block.n"),
                              g=_pos_int(b["g"], f"{where}.block.g"),
                              m=float(b.get("m", 1.7)),
                              csp_wrap=bool(b.get("csp_wrap", False)))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, NetSpecError):
                raise
            raise NetSpecError(f"{where}.block: {exc}") from None
        t = st.get("transition", {})
        _check_keys(t, _TRANS, f"{where}.transition")
        ratio = _fill(t, "compress_ratio", 0.75, f"{where}.transition")
        if not isinstance(ratio, (int, float)) or not 0 < ratio <= 1:
            raise NetSpecError(f"{where}.transition.compress_ratio: expected (0, 1], got {ratio!r}")
        trans = TransitionSpec(
            float(ratio),
            _pos_int(_fill(t, "se_reduction", 16, f"{where}.transition"),
                     f"{where}.transition.se_reduction"),
            bool(_fill(t, "downsample", True, f"{where}.transition")))
        stages.append(StageSpec(block, trans))

    d = _fill(data, "decoder", {}, "netspec")
    _check_keys(d, _DECODER, "decoder")
    dflt = DecoderSpec()
    taps = _int_list(_fill(d, "taps", list(dflt.taps), "decoder"), "decoder.taps")
    for i, tap in enumerate(taps):
        if tap > len(stages):
            raise NetSpecError(
                f"decoder.taps[{i}]: tap references stage {tap}, "
                f"but only {len(stages)} stage(s) exist")
    decoder = DecoderSpec(
        taps=taps,
        embed_dim=_pos_int(_fill(d, "embed_dim", dflt.embed_dim, "decoder"), "decoder.embed_dim"),
        patch_size=_pos_int(_fill(d, "patch_size", dflt.patch_size, "decoder"), "decoder.patch_size"),
        window_ratios=_int_list(_fill(d, "window_ratios", list(dflt.window_ratios), "decoder"),
                                "decoder.window_ratios"),
        heads=_pos_int(_fill(d, "heads", dflt.heads, "decoder"), "decoder.heads"),
        pool_sizes=_int_list(_fill(d, "pool_sizes", list(dflt.pool_sizes), "decoder"),
                             "decoder.pool_sizes"),
    )
    if decoder.embed_dim % decoder.heads:
        raise NetSpecError("decoder.heads: embed_dim must be divisible by heads")
    for i, r in enumerate(decoder.window_ratios):
        if decoder.patch_size % r:
            raise NetSpecError(
                f"decoder.window_ratios[{i}]: ratio {r} must divide patch_size {decoder.patch_size}")

    h = _fill(data, "heads", {}, "netspec")
    _check_keys(h, _HEADS, "heads")
    deep = tuple(_fill(h, "deep", list(HEAD_TAPS), "heads"))
    for i, tap in enumerate(deep):
        if tap not in HEAD_TAPS:
            raise NetSpecError(f"heads.deep[{i}]: unknown tap {tap!r}; expected one of {HEAD_TAPS}")
    heads = HeadsSpec(deep=deep, boundary=bool(_fill(h, "boundary", True, "heads")))

    csp_ratio = _fill(data, "csp_ratio", 0.5, "netspec")
    if not isinstance(csp_ratio, (int, float)) or not 0 < csp_ratio < 1:
        raise NetSpecError(f"csp_ratio: expected a value in (0, 1), got {csp_ratio!r}")

    return NetSpec(name, in_ch, tuple(stem), tuple(stages), decoder, heads, float(csp_ratio))


def load_netspec(text):
    """Parse netspec JSON text.  Errors carry the line/column or field path."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetSpecError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_netspec(data)


def shipped_configs():
    root = resources.files("hardnet_dfus") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir()
                  if p.name.endswith(".json") and not p.name.endswith(".schema.json"))


def load_config(name):
    """Load a JSON file by path, or a shipped config by name (``"hardnetv2-53"``).

    Returns ``(NetSpec, raw_text)``.
    """
    if os.path.isfile(name):
        with open(name, encoding="utf-8") as fh:
            text = fh.read()
        return load_netspec(text), text
    stem = os.path.basename(name)
    if stem.endswith(".json"):
        stem = stem[:-5]
    path = resources.files("hardnet_dfus") / "configs" / f"{stem}.json"
    if not path.is_file():
        raise NetSpecError(f"no such file or shipped config {name!r}; shipped: {shipped_configs()}")
    text = path.read_text(encoding="utf-8")
    return load_netspec(text), text
