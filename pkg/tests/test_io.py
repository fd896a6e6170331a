"""MTSR1 tensor-file format tests."""

import io
import struct

import numpy as np
import pytest

from ctmar.io import FormatError, load_tensor, read_tensor, save_tensor, write_tensor


def roundtrip(arr):
    buf = io.BytesIO()
    write_tensor(buf, arr)
    buf.seek(0)
    return read_tensor(buf)


def test_roundtrip_f32_and_f64():
    rng = np.random.default_rng(0)
    for dtype in (np.float32, np.float64):
        arr = rng.normal(size=(3, 4, 5)).astype(dtype)
        back = roundtrip(arr)
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, arr)


def test_scalar_and_vector():
    np.testing.assert_array_equal(roundtrip(np.float32(3.5)), np.float32(3.5))
    np.testing.assert_array_equal(roundtrip(np.arange(7, dtype=np.float64)),
                                  np.arange(7, dtype=np.float64))


def test_header_layout():
    buf = io.BytesIO()
    write_tensor(buf, np.zeros((2, 3), dtype=np.float32))
    raw = buf.getvalue()
    assert raw[:4] == b"MTSR"
    assert raw[4] == 1              # version
    assert raw[5] == 0              # f32
    assert raw[6] == 2              # rank
    assert struct.unpack("<2I", raw[7:15]) == (2, 3)
    assert len(raw) == 15 + 2 * 3 * 4


def test_little_endian_values():
    buf = io.BytesIO()
    write_tensor(buf, np.array([1.0], dtype=np.float32))
    assert buf.getvalue()[-4:] == struct.pack("<f", 1.0)


def test_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        read_tensor(io.BytesIO(b"XXXX" + bytes(10)))


def test_bad_version():
    buf = io.BytesIO()
    write_tensor(buf, np.zeros(2, dtype=np.float32))
    raw = bytearray(buf.getvalue())
    raw[4] = 9
    with pytest.raises(FormatError, match="version"):
        read_tensor(io.BytesIO(bytes(raw)))


def test_bad_dtype_code():
    buf = io.BytesIO()
    write_tensor(buf, np.zeros(2, dtype=np.float32))
    raw = bytearray(buf.getvalue())
    raw[5] = 7
    with pytest.raises(FormatError, match="dtype"):
        read_tensor(io.BytesIO(bytes(raw)))


def test_truncated_payload():
    buf = io.BytesIO()
    write_tensor(buf, np.zeros(8, dtype=np.float64))
    with pytest.raises(FormatError, match="truncated"):
        read_tensor(io.BytesIO(buf.getvalue()[:-3]))


def test_int_dtype_rejected():
    with pytest.raises(FormatError):
        write_tensor(io.BytesIO(), np.zeros(3, dtype=np.int32))


def test_file_roundtrip(tmp_path):
    arr = np.linspace(0, 1, 24, dtype=np.float32).reshape(2, 3, 4)
    path = tmp_path / "t.mtsr"
    save_tensor(path, arr)
    np.testing.assert_array_equal(load_tensor(path), arr)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "t.mtsr"
    save_tensor(path, np.zeros(2, dtype=np.float32))
    with open(path, "ab") as fh:
        fh.write(b"junk")
    with pytest.raises(FormatError, match="trailing"):
        load_tensor(path)
