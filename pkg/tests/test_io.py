import numpy as np
import pytest

from lanoboed import io


def test_sbf_roundtrip_shapes(tmp_path, rng):
    for shape in [(), (5,), (3, 4), (2, 3, 4)]:
        a = rng.standard_normal(shape)
        io.write_sbf(tmp_path / "a.sbf", a)
        b = io.read_sbf(tmp_path / "a.sbf")
        assert b.shape == np.shape(a)
        assert np.array_equal(a, b)


def test_sbf_layout_is_little_endian_row_major(tmp_path):
    a = np.arange(6.0).reshape(2, 3)
    io.write_sbf(tmp_path / "a.sbf", a)
    raw = (tmp_path / "a.sbf").read_bytes()
    assert raw[:4] == b"SBF1"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [2, 2, 3]
    assert np.array_equal(np.frombuffer(raw[16:], "<f8"), np.arange(6.0))


def test_sbf_rejects_bad_magic_and_truncation(tmp_path):
    io.write_sbf(tmp_path / "a.sbf", np.ones(4))
    raw = (tmp_path / "a.sbf").read_bytes()
    (tmp_path / "b.sbf").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(io.FormatError):
        io.read_sbf(tmp_path / "b.sbf")
    (tmp_path / "c.sbf").write_bytes(raw[:-8])
    with pytest.raises(io.FormatError):
        io.read_sbf(tmp_path / "c.sbf")


def test_pgm_minmax_scaling(tmp_path):
    img = np.array([[0.0, 1.0], [2.0, 4.0]])
    io.write_pgm(tmp_path / "i.pgm", img)
    px = io.read_pgm(tmp_path / "i.pgm")
    assert px.shape == (2, 2)
    assert px.min() == 0 and px.max() == 255
    assert px[0, 1] == round(255 / 4)


def test_manifest_and_csv(tmp_path):
    io.write_manifest(tmp_path / "m.manifest", {"a": 1, "b": 0.5, "c": "x"})
    m = io.read_manifest(tmp_path / "m.manifest")
    assert m["a"] == "1" and m["c"] == "x" and float(m["b"]) == 0.5
    io.write_csv(tmp_path / "t.csv", ["x", "y"], [[1, 2.5], [3, "z"]])
    raw = (tmp_path / "t.csv").read_bytes()
    assert b"\r\n" not in raw and raw.startswith(b"x,y\n")
    header, rows = io.read_csv(tmp_path / "t.csv")
    assert header == ["x", "y"] and rows[1] == ["3", "z"]


def test_hashes_are_content_based(tmp_path, rng):
    a = rng.standard_normal(10)
    assert io.array_hash(a) == io.array_hash(a.copy())
    assert io.array_hash(a) != io.array_hash(a + 1.0)
