import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from epl import volume_io
from epl.errors import FormatError, IoError

dtypes = st.sampled_from([np.float32, np.float64, np.uint8])


@given(dtypes.flatmap(lambda dt: arrays(dt, array_shapes(min_dims=0, max_dims=5, min_side=0, max_side=4))))
def test_round_trip_bit_exact(arr):
    back, end = volume_io.decode(volume_io.encode(arr))
    assert end == len(volume_io.encode(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_file_size_and_errors(tmp_path):
    p = tmp_path / "a.eplv"
    volume_io.write(p, np.ones((2, 2), np.float32))
    assert p.stat().st_size == 32
    raw = p.read_bytes()
    (tmp_path / "m").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        volume_io.read(tmp_path / "m")
    (tmp_path / "v").write_bytes(raw[:4] + struct.pack("<H", 2) + raw[6:])
    with pytest.raises(FormatError):
        volume_io.read(tmp_path / "v")
    (tmp_path / "t").write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        volume_io.read(tmp_path / "t")
    with pytest.raises(FormatError):
        volume_io.encode(np.ones(2, np.int32))
    with pytest.raises(IoError):
        volume_io.read(tmp_path / "missing")


def test_empty_payload():
    arr = np.zeros((3, 0), np.float64)
    buf = volume_io.encode(arr)
    assert len(buf) == 8 + 8
    assert volume_io.decode(buf)[0].shape == (3, 0)
