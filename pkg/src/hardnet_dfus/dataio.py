"""Image/mask I/O, square padding + resize, fold splits and the weight container."""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .model import MissingWeightError, WeightStore, param_specs


class NetPBMError(ValueError):
    pass


class WeightFileError(ValueError):
    pass


def atomic_write(path, data):
    """Write bytes to ``path`` via a temp file in the same directory + rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- NetPBM ------------------------------------------------------------------

def _header_tokens(data, count):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens, pos, n = [], 0, len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise NetPBMError(f"truncated header at byte {pos}")
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((data[start:pos], start))
    # exactly one whitespace byte separates the header from the raster
    if pos >= n or not data[pos:pos + 1].isspace():
        raise NetPBMError(f"missing whitespace after header at byte {pos}")
    return tokens, pos + 1


def decode_netpbm(data):
    """Decode binary P5/P6 bytes into an ``H x W`` or ``H x W x 3`` array and maxval."""
    if len(data) < 2 or data[:1] != b"P" or data[1:2] not in (b"5", b"6"):
        raise NetPBMError("bad magic at byte 0: expected P5 or P6")
    channels = 1 if data[1:2] == b"5" else 3
    tokens, offset = _header_tokens(data[2:], 3)
    offset += 2
    values = []
    for name, (tok, pos) in zip(("width", "height", "maxval"), tokens):
        if not tok.isdigit():
            raise NetPBMError(f"invalid {name} {tok!r} at byte {pos + 2}")
        values.append(int(tok))
    width, height, maxval = values
    if width < 1 or height < 1:
        raise NetPBMError(f"zero image dimension {width}x{height}")
    if not 1 <= maxval <= 65535:
        raise NetPBMError(f"maxval {maxval} outside 1..65535")
    depth = 1 if maxval < 256 else 2
    expected = width * height * channels * depth
    payload = data[offset:offset + expected]
    if len(payload) < expected:
        raise NetPBMError(
            f"truncated payload at byte {offset + len(payload)}: expected {expected} bytes, "
            f"got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8 if depth == 1 else ">u2")
    if (arr > maxval).any():
        raise NetPBMError(f"sample exceeds maxval {maxval}")
    shape = (height, width) if channels == 1 else (height, width, 3)
    return arr.reshape(shape), maxval


def read_netpbm(path):
    with open(path, "rb") as fh:
        return decode_netpbm(fh.read())


def read_image(path):
    """P6 -> ``1 x 3 x H x W``, P5 -> ``1 x 1 x H x W`` float32 scaled by ``1 / maxval``."""
    raster, maxval = read_netpbm(path)
    x = raster.astype(np.float32) / np.float32(maxval)
    if x.ndim == 2:
        return x[None, None]
    return np.ascontiguousarray(x.transpose(2, 0, 1)[None])


def read_mask(path):
    """Binary mask from a P5 file: scaled values >= 128/255 become 1."""
    raster, maxval = read_netpbm(path)
    if raster.ndim != 2:
        raise NetPBMError(f"{path}: masks must be P5 (grayscale)")
    return (raster.astype(np.int64) * 255 >= 128 * maxval).astype(np.uint8)


def encode_p5(mask):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    h, w = m.shape
    raster = np.where(m.astype(bool), 255, 0).astype(np.uint8)
    return f"P5\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def write_mask(path, mask):
    atomic_write(path, encode_p5(mask))


def encode_p6(image):
    """``1 x 3 x H x W`` (or ``3 x H x W``) floats in [0, 1] -> P6 bytes, maxval 255."""
    x = np.asarray(image)
    if x.ndim == 4:
        x = x[0]
    _, h, w = x.shape
    raster = np.clip(np.rint(x.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + raster.tobytes()


def write_image(path, image):
    atomic_write(path, encode_p6(image))


# -- geometry ----------------------------------------------------------------

@dataclass(frozen=True)
class Geometry:
    orig_h: int
    orig_w: int
    side: int
    pad_bottom: int
    pad_right: int
    target: int

    @property
    def scale(self):
        return self.target / self.side

    def to_dict(self):
        return asdict(self) | {"scale": self.scale}


def pad_resize(image, target=512):
    """Zero-pad right/bottom to a square, then bilinear-resize to ``target``."""
    if target % 32:
        raise ValueError(f"target size {target} must be divisible by 32")
    x = np.asarray(image, dtype=np.float32)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None, None]
    _, _, h, w = x.shape
    if h < 1 or w < 1:
        raise ValueError(f"zero-dimension image {h}x{w}")
    side = max(h, w)
    geom = Geometry(h, w, side, side - h, side - w, target)
    if side != h or side != w:
        x = np.pad(x, ((0, 0), (0, 0), (0, side - h), (0, side - w)))
    x = ops.bilinear_resize(x, target, target)
    return (x[0, 0] if squeeze else x), geom


def invert(prob, geom, level=0.5):
    """Map a ``target x target`` map back to the original image grid as a binary mask.

    The map is resized bilinearly to the padded square, thresholded at
    ``level`` and cropped to the original extent.
    """
    p = np.asarray(prob, dtype=np.float32)
    while p.ndim > 2:
        p = p[0]
    if p.shape != (geom.target, geom.target):
        raise ValueError(f"map shape {p.shape} does not match geometry target {geom.target}")
    back = ops.bilinear_resize(p[None, None], geom.side, geom.side)[0, 0]
    return (back[:geom.orig_h, :geom.orig_w] >= level).astype(np.uint8)


# -- folds -----------------------------------------------------------------

@dataclass(frozen=True)
class FoldAssignment:
    k: int
    seed: int
    assignments: dict

    def folds(self):
        out = [[] for _ in range(self.k)]
        for key, fold in self.assignments.items():
            out[fold].append(key)
        return out

    def sizes(self):
        return [len(f) for f in self.folds()]

    def to_json(self):
        return json.dumps({"seed": self.seed, "k": self.k, "assignments": self.assignments},
                          indent=2)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(int(data["k"]), int(data["seed"]), {str(k): int(v) for k, v in data["assignments"].items()})


def split_folds(ids, k=5, seed=0):
    """Seeded shuffle (numpy PCG64 permutation) then round-robin fold assignment."""
    ids = [str(i) for i in ids]
    if k < 2:
        raise ValueError(f"fold count k must be >= 2, got {k}")
    if k > len(ids):
        raise ValueError(f"cannot split {len(ids)} ids into {k} folds")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(ids))
    return FoldAssignment(k, seed, {ids[j]: pos % k for pos, j in enumerate(order)})


# -- weight container -----------------------------------------------------
#
# "HDNW" | u16 version | u32 count | entries | payload | u32 crc32(payload)
# entry: u32 name_len | name utf-8 | u8 dtype (0 = f32) | u8 rank | rank x u64 dims
#        | u64 byte offset into payload
# All integers and payload values little-endian.

MAGIC = b"HDNW"
VERSION = 1


def encode_weights(store):
    names = list(store.tensors)
    header = [MAGIC, struct.pack("<HI", VERSION, len(names))]
    payload = []
    offset = 0
    for name in names:
        t = np.asarray(store.tensors[name])
        if t.dtype != np.float32:
            raise WeightFileError(f"tensor {name} has dtype {t.dtype}; only float32 is storable")
        raw = name.encode("utf-8")
        header.append(struct.pack("<I", len(raw)) + raw + struct.pack("<BB", 0, t.ndim))
        header.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        header.append(struct.pack("<Q", offset))
        data = t.astype("<f4").tobytes()
        payload.append(data)
        offset += len(data)
    body = b"".join(payload)
    return b"".join(header) + body + struct.pack("<I", zlib.crc32(body))


def save_weights(store, path):
    atomic_write(path, encode_weights(store))


def decode_weights(data, net=None):
    def take(fmt, pos):
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise WeightFileError(f"truncated weight file at byte {pos}")
        return struct.unpack_from(fmt, data, pos), pos + size

    if data[:4] != MAGIC:
        raise WeightFileError(f"bad magic {data[:4]!r}; expected {MAGIC!r}")
    (version, count), pos = take("<HI", 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}; expected {VERSION}")
    entries = []
    for _ in range(count):
        (name_len,), pos = take("<I", pos)
        if pos + name_len > len(data):
            raise WeightFileError(f"truncated tensor name at byte {pos}")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (dtype, rank), pos = take("<BB", pos)
        if dtype != 0:
            raise WeightFileError(f"tensor {name}: unsupported dtype code {dtype}")
        dims, pos = take(f"<{rank}Q", pos)
        (offset,), pos = take("<Q", pos)
        entries.append((name, dims, offset))
    payload_start = pos
    if len(data) < payload_start + 4:
        raise WeightFileError(f"truncated weight file at byte {len(data)}")
    body = data[payload_start:-4]
    (stored,) = struct.unpack("<I", data[-4:])
    actual = zlib.crc32(body)
    if stored != actual:
        raise WeightFileError(
            f"CRC mismatch over payload at byte offset {payload_start} "
            f"(length {len(body)}): stored {stored:#010x}, computed {actual:#010x}")
    tensors = {}
    for name, dims, offset in entries:
        if name in tensors:
            raise WeightFileError(f"duplicate tensor name {name}")
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        if offset + nbytes > len(body):
            raise WeightFileError(f"tensor {name} extends past the payload (offset {offset})")
        arr = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=offset)
        tensors[name] = arr.astype(np.float32).reshape(dims)
    store = WeightStore(tensors, provenance="file")
    if net is not None:
        missing = [name for name, *_ in param_specs(net) if name not in tensors]
        if missing:
            raise MissingWeightError(missing)
        store.check(net)
    return store


def load_weights(path, net=None):
    """Read a weight container; with ``net`` also verify every required tensor exists."""
    with open(path, "rb") as fh:
        return decode_weights(fh.read(), net)
