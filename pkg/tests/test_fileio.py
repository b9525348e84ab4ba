import numpy as np
import pytest

from handmesh.fileio import FormatError, load_arrays, read_obj, read_pfm, save_arrays, write_obj, write_pfm


def test_obj_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    v = rng.normal(size=(7, 3)) * 100
    f = np.array([[0, 1, 2], [2, 3, 4], [4, 5, 6]])
    write_obj(tmp_path / "m.obj", v, f)
    v2, f2 = read_obj(tmp_path / "m.obj")
    assert np.array_equal(v, v2) and np.array_equal(f, f2)


def test_obj_rejects_quads(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(FormatError, match="q.obj:5"):
        read_obj(tmp_path / "q.obj")


def test_pfm_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    d = rng.uniform(100, 900, (5, 7)).astype(np.float32)
    d[0, 0] = np.inf
    write_pfm(tmp_path / "d.pfm", d)
    back = read_pfm(tmp_path / "d.pfm")
    assert back.dtype == np.float32
    assert np.array_equal(back, d)


def test_pfm_header(tmp_path):
    write_pfm(tmp_path / "d.pfm", np.ones((2, 3)))
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    assert len(raw) == len(b"Pf\n3 2\n-1.0\n") + 4 * 6


def test_pfm_rows_bottom_up(tmp_path):
    d = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
    write_pfm(tmp_path / "d.pfm", d)
    payload = (tmp_path / "d.pfm").read_bytes()[-16:]
    assert np.frombuffer(payload, "<f4").tolist() == [3.0, 4.0, 1.0, 2.0]


def test_pfm_rejects_colour(tmp_path):
    (tmp_path / "c.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + b"\0" * 12)
    with pytest.raises(FormatError, match="grayscale"):
        read_pfm(tmp_path / "c.pfm")


def test_pfm_truncated(tmp_path):
    (tmp_path / "t.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + b"\0" * 8)
    with pytest.raises(FormatError):
        read_pfm(tmp_path / "t.pfm")


def test_arrays_round_trip_and_determinism(tmp_path):
    arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([1, 2], dtype=np.int64)}
    save_arrays(tmp_path / "x.bin", arrays, {"k": 1})
    save_arrays(tmp_path / "y.bin", dict(reversed(list(arrays.items()))), {"k": 1})
    assert (tmp_path / "x.bin").read_bytes() == (tmp_path / "y.bin").read_bytes()
    back, meta = load_arrays(tmp_path / "x.bin")
    assert meta == {"k": 1}
    assert all(np.array_equal(back[k], arrays[k]) and back[k].dtype == arrays[k].dtype for k in arrays)


def test_arrays_bad_magic(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"nope")
    with pytest.raises(FormatError):
        load_arrays(tmp_path / "x.bin")
