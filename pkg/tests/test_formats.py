import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tcavlab.cav import Cav
from tcavlab.diffmodel import ImageSample, reference_model
from tcavlab.formats import (
    ActivationDump,
    FormatError,
    atomic_write,
    cavs_from_bytes,
    cavs_to_bytes,
    dump_from_bytes,
    dump_to_bytes,
    load_dump,
    load_model,
    model_from_bytes,
    model_to_bytes,
    save_dump,
    save_model,
)


def test_model_round_trip_is_exact(tmp_path):
    model = reference_model(3, (10, 12, 3), seed=4)
    save_model(tmp_path / "m.cvkm", model)
    back = load_model(tmp_path / "m.cvkm")
    assert back.layer_names == model.layer_names and back.class_count == 3
    assert back.input_shape == (10, 12, 3)
    for (n1, k1, a), (n2, k2, b) in zip(model.parameters(), back.parameters()):
        assert (n1, k1) == (n2, k2) and a.dtype == np.float32 and a.tobytes() == b.tobytes()
    assert model_to_bytes(back) == model_to_bytes(model)
    x = np.random.default_rng(0).random((2, 10, 12, 3))
    assert model.logits(x).tobytes() == back.logits(x).tobytes()


def test_model_header_layout():
    data = model_to_bytes(reference_model(2, (8, 8, 3), seed=0))
    assert data[:4] == b"CVKM"
    assert struct.unpack("<HII", data[4:14]) == (1, 2, 8)


def test_model_corruptions_rejected():
    data = model_to_bytes(reference_model(2, (8, 8, 3), seed=0))
    with pytest.raises(FormatError):
        model_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        model_from_bytes(data[:-3])
    with pytest.raises(FormatError):
        model_from_bytes(data + b"\0")
    with pytest.raises(FormatError):
        model_from_bytes(data[:4] + struct.pack("<H", 9) + data[6:])


def test_cav_round_trip():
    rng = np.random.default_rng(0)
    cavs = [
        Cav("brown", "relu3", rng.normal(size=32).astype(np.float32), 0.25, 0.875, run_id=i, is_random=i % 2 == 1)
        for i in range(4)
    ]
    back = cavs_from_bytes(cavs_to_bytes(cavs))
    for a, b in zip(cavs, back):
        assert (a.concept_name, a.layer_name, a.run_id, a.is_random) == (b.concept_name, b.layer_name, b.run_id, b.is_random)
        assert a.direction.astype(np.float32).tobytes() == b.direction.astype(np.float32).tobytes()
        assert np.float32(a.bias) == np.float32(b.bias) and np.float32(a.holdout_accuracy) == np.float32(b.holdout_accuracy)
    assert cavs_to_bytes(back) == cavs_to_bytes(cavs)
    with pytest.raises(FormatError):
        cavs_from_bytes(cavs_to_bytes(cavs)[:-1])


def test_dump_shape_and_round_trip(tmp_path):
    payload = np.random.default_rng(1).normal(size=(100, 512)).astype(np.float32)
    dump = ActivationDump("dense1", payload)
    assert (dump.sample_count, dump.vector_length) == (100, 512)
    save_dump(tmp_path / "a.actv", dump)
    back = load_dump(tmp_path / "a.actv")
    assert back.layer_name == "dense1" and back.payload.dtype == np.float32
    assert back.payload.tobytes() == payload.tobytes()
    raw = (tmp_path / "a.actv").read_bytes()
    assert raw[:4] == b"ACTV" and len(raw) == 4 + 2 + 2 + 6 + 8 + 100 * 512 * 4


def test_dump_gradient_blocks():
    p = np.arange(6, dtype=np.float32).reshape(2, 3)
    dump = ActivationDump("relu3", p, {1: -p, 0: p * 2})
    back = dump_from_bytes(dump_to_bytes(dump))
    assert sorted(back.gradients) == [0, 1]
    assert back.gradients[1].tobytes() == (-p).tobytes()
    with pytest.raises(ValueError):
        ActivationDump("x", p, {0: np.zeros((3, 2))})
    with pytest.raises(ValueError):
        ActivationDump("x", np.array([[np.nan]]))
    with pytest.raises(FormatError):
        dump_from_bytes(dump_to_bytes(dump) + b"Z")


finite32 = st.floats(width=32, allow_nan=False, allow_infinity=False)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite32), st.text(max_size=12))
def test_dump_round_trip_lossless(payload, name):
    back = dump_from_bytes(dump_to_bytes(ActivationDump(name, payload, {3: payload})))
    assert back.layer_name == name
    assert back.payload.tobytes() == payload.tobytes()
    assert back.gradients[3].tobytes() == payload.tobytes()


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write(tmp_path / "sub" / "f.bin", b"abc")
    atomic_write(tmp_path / "sub" / "f.bin", b"xyz")
    assert (tmp_path / "sub" / "f.bin").read_bytes() == b"xyz"
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["f.bin"]
