import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from sitmlp.checkpoint import load_checkpoint, read_index, save_checkpoint
from sitmlp.engine import Tensor, load_tensor, save_tensor, tensor_from_bytes, tensor_to_bytes
from sitmlp.engine.serialize import read_tensor
from sitmlp.exceptions import FormatError
from sitmlp.train import load_model, save_model


@given(arrays(st.sampled_from([np.float32, np.float64]), array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(-1e6, 1e6, allow_nan=False, width=32)))
@settings(max_examples=60, deadline=None)
def test_tensor_bytes_roundtrip_is_exact(arr):
    back = tensor_from_bytes(tensor_to_bytes(arr)).data
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_tensor_header_layout():
    blob = tensor_to_bytes(np.zeros((2, 3), dtype=np.float32))
    assert blob[:4] == b"SITT"
    assert struct.unpack("<II", blob[4:12]) == (1, 2)
    assert struct.unpack("<2Q", blob[12:28]) == (2, 3)
    assert blob[28] == 1
    assert len(blob) == 29 + 6 * 4


def test_tensor_file_roundtrip(tmp_path, rng):
    x = rng.normal(size=(3, 4))
    save_tensor(tmp_path / "x.bin", Tensor(x))
    assert load_tensor(tmp_path / "x.bin").data.tobytes() == x.tobytes()


@pytest.mark.parametrize("blob", [b"NOPE" + bytes(20), tensor_to_bytes(np.ones(4))[:-3], b"SITT" + struct.pack("<II", 9, 0)])
def test_corrupt_tensor_rejected(blob):
    with pytest.raises(FormatError):
        tensor_from_bytes(blob)


def test_unsupported_dtype_rejected():
    with pytest.raises(FormatError):
        tensor_to_bytes(np.ones(3, dtype=np.int32))


def test_sequential_tensors_in_one_stream(rng):
    a, b = rng.normal(size=3), rng.normal(size=(2, 2)).astype(np.float32)
    stream = io.BytesIO(tensor_to_bytes(a) + tensor_to_bytes(b))
    np.testing.assert_array_equal(read_tensor(stream).data, a)
    np.testing.assert_array_equal(read_tensor(stream).data, b)


def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {"w": rng.normal(size=(3, 2)), "b": np.arange(4, dtype=np.float32)}
    save_checkpoint(tmp_path / "c.ckpt", tensors, {"epoch": 3})
    loaded, meta = load_checkpoint(tmp_path / "c.ckpt")
    assert list(loaded) == ["w", "b"] and meta == {"epoch": 3}
    for k in tensors:
        assert loaded[k].tobytes() == tensors[k].tobytes()
    index, start = read_index(tmp_path / "c.ckpt")
    assert [e["name"] for e in index["tensors"]] == ["w", "b"]
    assert start > 16


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + bytes(30))
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_model_checkpoint_reproduces_logits(tmp_path, tiny_model, rng):
    x = Tensor(rng.normal(size=(3, 1, 8, 4, 3)))
    tiny_model.eval()
    before = tiny_model(x).data
    save_model(tmp_path / "m.ckpt", tiny_model, {"modality": "bone"})
    model, meta = load_model(tmp_path / "m.ckpt")
    assert meta["modality"] == "bone"
    assert model(x).data.tobytes() == before.tobytes()
