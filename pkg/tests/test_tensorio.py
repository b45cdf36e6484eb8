import struct

import numpy as np
import pytest

from ppf.tensorio import (FormatError, Reader, load_tensor, pack_string, pack_tensor,
                          pack_u32_array, read_tensor, read_u32_array, save_tensor)


@pytest.mark.parametrize("shape", [(), (3,), (2, 3), (1, 4, 2)])
def test_tensor_round_trip(tmp_path, rng, shape):
    arr = rng.normal(size=shape)
    save_tensor(tmp_path / "t.bin", arr)
    back = load_tensor(tmp_path / "t.bin")
    assert back.shape == arr.shape and np.array_equal(back, arr)


def test_layout_is_little_endian():
    buf = pack_tensor(np.array([[1.5, -2.0]]))
    assert buf[:4] == b"PTNS"
    assert struct.unpack("<IIQQ", buf[4:28]) == (1, 2, 1, 2)
    assert struct.unpack("<2d", buf[28:]) == (1.5, -2.0)


def test_bad_magic_offset():
    buf = b"XXXX" + pack_tensor(np.zeros(2))[4:]
    with pytest.raises(FormatError) as e:
        read_tensor(Reader(buf))
    assert e.value.offset == 0


def test_bad_version_offset():
    buf = bytearray(pack_tensor(np.zeros(2)))
    buf[4] = 9
    with pytest.raises(FormatError) as e:
        read_tensor(Reader(bytes(buf)))
    assert e.value.offset == 4


def test_truncation_reports_offset(tmp_path):
    buf = pack_tensor(np.arange(4.0))
    (tmp_path / "t.bin").write_bytes(buf[:-3])
    with pytest.raises(FormatError) as e:
        load_tensor(tmp_path / "t.bin")
    assert e.value.offset == len(buf) - 32
    assert "offset" in str(e.value)


def test_trailing_bytes(tmp_path):
    (tmp_path / "t.bin").write_bytes(pack_tensor(np.zeros(1)) + b"\0")
    with pytest.raises(FormatError):
        load_tensor(tmp_path / "t.bin")


def test_strings_and_u32_arrays():
    r = Reader(pack_string("héllo") + pack_u32_array([3, 0, 7]))
    assert r.string() == "héllo"
    assert read_u32_array(r).tolist() == [3, 0, 7]
    assert r.at_end()
    with pytest.raises(FormatError):
        Reader(struct.pack("<I", 2) + b"\xff\xfe").string()
