import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from otfwi.gridio import GridFormatError, read_grid, write_grid


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 9)),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_round_trip(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("g") / "a.bin"
    write_grid(p, a)
    np.testing.assert_array_equal(read_grid(p), a)


def test_header_layout(tmp_path):
    a = np.arange(6.0).reshape(2, 3)
    p = write_grid(tmp_path / "a.bin", a)
    raw = p.read_bytes()
    assert raw[:4] == b"OTF1"
    assert struct.unpack("<III", raw[4:16]) == (2, 3, 0)
    assert np.frombuffer(raw[16:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]


def test_rejects_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "bad.bin"
    p.write_bytes(b"XXXX" + bytes(12))
    with pytest.raises(GridFormatError):
        read_grid(p)
    write_grid(p, np.ones((3, 3)))
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(GridFormatError):
        read_grid(p)
