import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from hatbench.archive import decode, encode, load_into, load_weights, save_weights
from hatbench.errors import DimensionError, FormatError, IntegrityError
from hatbench.model import build_variant, get_variant
from hatbench.params import named_tensors

HEADER = b"HATW" + struct.pack("<IQ", 1, 0)


def test_empty_archive():
    assert encode({}) == HEADER
    assert decode(HEADER) == {}


def test_single_f32_tensor_layout():
    blob = encode({"w": np.array([1.0, 2.0], dtype=np.float32)})
    table = struct.pack("<I", 1) + b"w" + bytes([0, 1]) + struct.pack("<QQ", 2, 0)
    assert blob == b"HATW" + struct.pack("<IQ", 1, 1) + table + bytes.fromhex("0000803f00000040")
    assert blob[-8:] == bytes.fromhex("0000803F00000040")


def test_f64_and_rank0():
    t = {"a": np.array(3.5), "b": np.arange(6, dtype=np.float64).reshape(2, 3)}
    out = decode(encode(t))
    assert out["a"].shape == () and out["a"] == 3.5
    np.testing.assert_array_equal(out["b"], t["b"])
    assert out["b"].dtype == np.float64


def test_reduced_variant_roundtrip_bit_exact(tmp_path):
    model = build_variant(get_variant("faster_vit_1").scaled(8), seed=3)
    path = tmp_path / "m.hatw"
    save_weights(model, path)
    first = path.read_bytes()
    loaded = load_weights(path)
    for name, t in named_tensors(model):
        assert loaded[name].tobytes() == t.data.tobytes()
    save_weights(loaded, path)
    assert path.read_bytes() == first
    names = list(loaded)
    assert "stage3/hat/block0/win_attn/attn/wq" in names


def test_load_into_restores_and_validates(tmp_path):
    a = build_variant(get_variant("faster_vit_1").scaled(16), seed=1)
    b = build_variant(get_variant("faster_vit_1").scaled(16), seed=2)
    load_into(b, decode(encode(a)))
    for (_, x), (_, y) in zip(named_tensors(a), named_tensors(b)):
        assert np.array_equal(x.data, y.data)
    w = decode(encode(a))
    w["head/w"] = w["head/w"][:1]
    with pytest.raises(DimensionError):
        load_into(b, w)
    del w["head/w"]
    with pytest.raises(IntegrityError):
        load_into(b, w)


def test_bad_magic_and_version():
    with pytest.raises(FormatError):
        decode(b"HATX" + HEADER[4:])
    with pytest.raises(FormatError):
        decode(b"HATW" + struct.pack("<IQ", 2, 0))
    with pytest.raises(FormatError):
        decode(b"HA")


def test_truncation_and_inconsistency():
    blob = encode({"w": np.ones((3, 4)), "v": np.zeros(2, np.float32)})
    for cut in (10, 20, len(blob) - 1):
        with pytest.raises(IntegrityError):
            decode(blob[:cut])
    with pytest.raises(IntegrityError):
        decode(blob + b"\0")
    # bump the first tensor's first dim: dims no longer match the data length
    pos = 4 + 12 + 4 + 1 + 2
    bad = blob[:pos] + struct.pack("<Q", 4) + blob[pos + 8:]
    with pytest.raises(IntegrityError):
        decode(bad)


def test_unknown_dtype_code():
    blob = bytearray(encode({"w": np.ones(1)}))
    blob[4 + 12 + 4 + 1] = 7
    with pytest.raises(FormatError):
        decode(bytes(blob))


def test_meta_tensors_cannot_be_saved():
    with pytest.raises(FormatError):
        encode(build_variant("faster_vit_1", meta=True))


@given(st.dictionaries(
    st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12),
    hnp.arrays(st.sampled_from([np.float32, np.float64]),
               hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
    max_size=5))
def test_roundtrip_property(tensors):
    blob = encode(tensors)
    out = decode(blob)
    assert list(out) == list(tensors)
    for k, v in tensors.items():
        assert out[k].dtype == v.dtype and out[k].shape == v.shape
        assert out[k].tobytes() == v.tobytes()
    assert encode(out) == blob
