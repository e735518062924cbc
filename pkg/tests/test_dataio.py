import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hardnet_dfus.dataio import (FoldAssignment, NetPBMError, WeightFileError, decode_netpbm,
                                 decode_weights, encode_p5, encode_weights, invert, load_weights,
                                 pad_resize, read_image, read_mask, save_weights, split_folds,
                                 write_image, write_mask)
from hardnet_dfus.model import MissingWeightError, WeightStore


# -- NetPBM ----------------------------------------------------------------------

def test_p6_all_white(tmp_path):
    path = tmp_path / "w.ppm"
    path.write_bytes(b"P6\n2 2\n255\n" + b"\xff" * 12)
    x = read_image(path)
    assert x.shape == (1, 3, 2, 2) and x.dtype == np.float32
    assert (x == 1.0).all()


def test_p6_channel_layout(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6 2 1 255\n" + bytes([10, 20, 30, 40, 50, 60]))
    x = read_image(path)[0] * 255
    np.testing.assert_allclose(x[:, 0, 0], [10, 20, 30], atol=1e-4)
    np.testing.assert_allclose(x[:, 0, 1], [40, 50, 60], atol=1e-4)


def test_maxval_scaling(tmp_path):
    path = tmp_path / "g.pgm"
    path.write_bytes(b"P5\n# comment line\n2 1\n127\n" + bytes([127, 0]))
    np.testing.assert_array_equal(read_image(path)[0, 0], [[1.0, 0.0]])


def test_sixteen_bit_big_endian():
    raster, maxval = decode_netpbm(b"P5 1 2 1000\n" + struct.pack(">HH", 1000, 256))
    assert maxval == 1000
    assert raster.tolist() == [[1000], [256]]


def test_mask_round_trip(tmp_path):
    m = (np.random.default_rng(0).random((13, 7)) < 0.5).astype(np.uint8)
    path = tmp_path / "m.pgm"
    write_mask(path, m)
    np.testing.assert_array_equal(read_mask(path), m)
    assert path.read_bytes() == encode_p5(m)
    assert set(np.unique(decode_netpbm(path.read_bytes())[0])) <= {0, 255}


def test_mask_threshold_128(tmp_path):
    path = tmp_path / "t.pgm"
    path.write_bytes(b"P5 3 1 255\n" + bytes([127, 128, 255]))
    assert read_mask(path).tolist() == [[0, 1, 1]]


def test_image_round_trip(tmp_path):
    x = np.random.default_rng(1).integers(0, 256, (1, 3, 5, 4)).astype(np.float32) / 255
    path = tmp_path / "x.ppm"
    write_image(path, x)
    np.testing.assert_array_equal(read_image(path), x)


MALFORMED = {
    "empty": b"",
    "bad magic": b"P3\n1 1\n255\n\x00",
    "lowercase magic": b"p5\n1 1\n255\n\x00",
    "magic only": b"P5",
    "missing height": b"P5\n1\n",
    "non-digit width": b"P5\nx 1\n255\n\x00",
    "negative width": b"P5\n-1 1\n255\n\x00",
    "zero width": b"P5\n0 1\n255\n",
    "zero height": b"P5\n1 0\n255\n",
    "zero maxval": b"P5\n1 1\n0\n\x00",
    "huge maxval": b"P5\n1 1\n70000\n\x00\x00",
    "float maxval": b"P5\n1 1\n25.5\n\x00",
    "no separator": b"P5\n1 1\n255",
    "truncated payload": b"P5\n2 2\n255\n\x00\x00\x00",
    "truncated p6": b"P6\n1 1\n255\n\x00\x00",
    "truncated 16-bit": b"P5\n1 1\n1000\n\x00",
    "sample over maxval": b"P5\n1 1\n100\n\xff",
    "comment eats header": b"P5\n1 1 # 255\n\x00",
}


@pytest.mark.parametrize("name", MALFORMED)
def test_malformed_corpus_rejected(name):
    with pytest.raises(NetPBMError):
        decode_netpbm(MALFORMED[name])


def test_truncation_reports_position():
    with pytest.raises(NetPBMError, match="byte 14"):
        decode_netpbm(b"P5\n2 2\n255\n\x00\x00\x00")


VALID = b"P5\n# c\n3 2\n255\n" + bytes(range(6))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, len(VALID) - 7), st.integers(0, 255))
def test_header_mutations_never_crash(pos, byte):
    data = bytearray(VALID)
    data[pos] = byte
    try:
        raster, maxval = decode_netpbm(bytes(data))
    except NetPBMError:
        return
    assert raster.ndim in (2, 3) and (raster <= maxval).all()


@settings(max_examples=200, deadline=None)
@given(st.binary(max_size=40))
def test_random_bytes_never_crash(data):
    try:
        decode_netpbm(b"P5" + data)
    except NetPBMError:
        pass


# -- geometry --------------------------------------------------------------------

def test_pad_resize_640x480():
    img = np.ones((1, 3, 480, 640), np.float32)
    out, geom = pad_resize(img, 512)
    assert out.shape == (1, 3, 512, 512)
    assert (geom.side, geom.pad_bottom, geom.pad_right) == (640, 160, 0)
    assert geom.scale == 512 / 640
    # bottom rows come from the zero padding
    assert out[0, 0, -1, 0] == 0 and out[0, 0, 0, 0] == 1


def test_pad_resize_identity():
    img = np.random.default_rng(0).random((1, 3, 512, 512), dtype=np.float32)
    out, geom = pad_resize(img, 512)
    np.testing.assert_array_equal(out, img)
    assert (geom.pad_bottom, geom.pad_right, geom.scale) == (0, 0, 1.0)


def test_round_trip_all_ones_100x60():
    out, geom = pad_resize(np.ones((100, 60), np.float32), 512)
    np.testing.assert_array_equal(invert(out, geom), np.ones((100, 60)))


@pytest.mark.parametrize("h", range(1, 65, 3))
def test_inverse_dims_exact(h):
    for w in range(1, 65):
        out, geom = pad_resize(np.ones((h, w), np.float32), 64)
        back = invert(out, geom)
        assert back.shape == (h, w)
        assert back.all()


def test_pad_resize_errors():
    with pytest.raises(ValueError, match="32"):
        pad_resize(np.ones((4, 4)), 500)
    with pytest.raises(ValueError, match="zero"):
        pad_resize(np.ones((0, 4)), 64)


def test_mask_round_trip_within_boundary_band():
    m = np.zeros((90, 70), np.float32)
    m[20:60, 10:50] = 1
    out, geom = pad_resize(m, 256)
    back = invert(out, geom)
    diff = back != m
    rows, cols = np.nonzero(diff)
    edge_rows = {19, 20, 59, 60}
    edge_cols = {9, 10, 49, 50}
    assert all(r in edge_rows or c in edge_cols for r, c in zip(rows, cols))


# -- folds -----------------------------------------------------------------------

def test_two_thousand_ids():
    a = split_folds([f"img{i:04d}" for i in range(2000)], 5, seed=0)
    assert a.sizes() == [400] * 5


def test_seven_ids():
    sizes = split_folds(list("abcdefg"), 5, seed=3).sizes()
    assert sorted(sizes, reverse=True) == [2, 2, 1, 1, 1]


def test_fold_determinism_and_json():
    ids = [str(i) for i in range(50)]
    a, b = split_folds(ids, 5, 7), split_folds(ids, 5, 7)
    assert a == b
    assert split_folds(ids, 5, 8) != a
    assert FoldAssignment.from_json(a.to_json()) == a
    assert set(json.loads(a.to_json())) == {"seed", "k", "assignments"}


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(0, 60), st.integers(0, 2**32 - 1))
def test_fold_partition_property(k, extra, seed):
    ids = [f"id{i}" for i in range(k + extra)]
    a = split_folds(ids, k, seed)
    flat = sorted(x for fold in a.folds() for x in fold)
    assert flat == sorted(ids)
    assert max(a.sizes()) - min(a.sizes()) <= 1


def test_fold_errors():
    with pytest.raises(ValueError):
        split_folds(["a", "b"], 5)
    with pytest.raises(ValueError):
        split_folds(["a", "b"], 1)
    with pytest.raises(ValueError):
        split_folds(["a", "a", "b"], 2)


# -- weight container ------------------------------------------------------------

def small_store():
    r = np.random.default_rng(0)
    return WeightStore({"a.w": r.normal(size=(3, 2, 1, 1)).astype(np.float32),
                        "b": r.normal(size=5).astype(np.float32),
                        "scalar": np.array(1.5, np.float32)})


def test_weight_round_trip(tmp_path):
    store = small_store()
    path = tmp_path / "w.hdnw"
    save_weights(store, path)
    back = load_weights(path)
    assert list(back.tensors) == list(store.tensors)
    for k in store.tensors:
        assert back[k].dtype == np.float32
        assert back[k].tobytes() == store[k].tobytes()


def test_weight_layout_bytes():
    store = WeightStore({"x": np.array([1.0, 2.0], np.float32)})
    data = encode_weights(store)
    payload = struct.pack("<2f", 1.0, 2.0)
    expected = (b"HDNW" + struct.pack("<HI", 1, 1) + struct.pack("<I", 1) + b"x"
                + struct.pack("<BB", 0, 1) + struct.pack("<Q", 2) + struct.pack("<Q", 0)
                + payload + struct.pack("<I", zlib.crc32(payload)))
    assert data == expected


def test_flipped_payload_byte_reports_offset():
    data = bytearray(encode_weights(small_store()))
    data[-10] ^= 0x01
    with pytest.raises(WeightFileError, match="CRC mismatch over payload at byte offset"):
        decode_weights(bytes(data))


@pytest.mark.parametrize("mutate, message", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<H", 2) + d[6:], "version"),
    (lambda d: d[:12], "truncated"),
])
def test_container_errors(mutate, message):
    with pytest.raises(WeightFileError, match=message):
        decode_weights(mutate(encode_weights(small_store())))


def test_missing_tensor_named(net53, weights53, tmp_path):
    tensors = dict(weights53.tensors)
    del tensors["stage3.block.conv5.w"]
    path = tmp_path / "partial.hdnw"
    save_weights(WeightStore(tensors), path)
    with pytest.raises(MissingWeightError) as info:
        load_weights(path, net53)
    assert info.value.names == ["stage3.block.conv5.w"]


def test_full_store_loads_against_net(net53, weights53, tmp_path):
    path = tmp_path / "full.hdnw"
    save_weights(weights53, path)
    back = load_weights(path, net53)
    assert back.num_params == weights53.num_params
