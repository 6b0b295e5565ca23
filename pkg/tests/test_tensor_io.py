import struct

import hypothesis.extra.numpy as npst
import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given

from errors import TensorFormatError
from tensor_core import Tensor
from tensor_io import decode_tensor, encode_tensor, load_tensor, save_tensor


@given(npst.arrays(dtype=st.sampled_from([np.float32, np.float64]),
                   shape=npst.array_shapes(min_dims=0, max_dims=4, min_side=1, max_side=5),
                   elements=st.floats(allow_nan=False, width=32)))
def test_round_trip_is_exact(array):
    back = decode_tensor(encode_tensor(array))
    assert back.dtype == array.dtype
    assert back.shape == array.shape
    np.testing.assert_array_equal(back.data, array)


def test_header_layout():
    blob = encode_tensor(np.zeros((2, 3), dtype=np.float32))
    assert blob[:4] == b"STNS"
    assert blob[4:7] == bytes([0x01, 0x01, 2])
    assert struct.unpack("<2I", blob[7:15]) == (2, 3)
    assert len(blob) == 15 + 6 * 4


def test_bad_magic():
    blob = bytearray(encode_tensor(np.ones(3)))
    blob[0:4] = b"NOPE"
    with pytest.raises(TensorFormatError):
        decode_tensor(bytes(blob))


def test_unknown_version():
    blob = bytearray(encode_tensor(np.ones(3)))
    blob[4] = 9
    with pytest.raises(TensorFormatError):
        decode_tensor(bytes(blob))


def test_truncated_payload():
    with pytest.raises(TensorFormatError):
        decode_tensor(encode_tensor(np.ones((4, 4)))[:-1])


def test_integer_arrays_are_rejected():
    with pytest.raises(TensorFormatError):
        encode_tensor(np.ones(3, dtype=np.int64))


def test_save_and_load(tmp_path):
    value = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    path = save_tensor(value, tmp_path / "nested" / "t.stns")
    np.testing.assert_array_equal(load_tensor(path).data, value.data)


def test_load_reports_the_path(tmp_path):
    path = tmp_path / "broken.stns"
    path.write_bytes(b"garbage")
    with pytest.raises(TensorFormatError, match="broken.stns"):
        load_tensor(path)
