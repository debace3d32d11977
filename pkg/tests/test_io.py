import struct

import numpy as np
import pytest

from nrreg import io as mio
from nrreg.geometry import Surface
from nrreg.synth import strip_mesh


def test_minimal_obj(tmp_path):
    p = tmp_path / "t.obj"
    p.write_text("# tri\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    s = mio.load_surface(p)
    assert len(s.points) == 3 and len(s.edges) == 3


def test_obj_polygon_and_slash_forms(tmp_path):
    p = tmp_path / "q.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1/1/1 2//1 3/3 -1\n")
    s = mio.load_surface(p)
    assert s.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


@pytest.mark.parametrize(
    "text,line",
    [("v 0 0\n", 1), ("v 0 0 0\nv 1 1 1\nf 1 x 2\n", 3), ("v 0 0 0\nf 1 2\n", 2)],
)
def test_obj_malformed_reports_line(tmp_path, text, line):
    p = tmp_path / "bad.obj"
    p.write_text(text)
    with pytest.raises(mio.MeshFormatError, match=f":{line}:"):
        mio.load_surface(p)


def test_obj_face_out_of_range(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nf 1 2 3\n")
    with pytest.raises(mio.MeshFormatError):
        mio.load_surface(p)


def test_ply_point_cloud_knn(tmp_path):
    pts = np.random.default_rng(0).normal(size=(10, 3))
    p = tmp_path / "c.ply"
    mio.save_surface(Surface(pts), p)
    s = mio.load_surface(p)
    assert s.faces is None
    assert (np.bincount(s.edges.ravel(), minlength=10) >= 6).all()


@pytest.mark.parametrize("name,binary", [("m.obj", False), ("m.ply", False), ("m.ply", True)])
def test_roundtrip_full_precision(tmp_path, name, binary):
    rng = np.random.default_rng(1)
    s = strip_mesh(6, 4)
    s = Surface(s.points + rng.normal(size=s.points.shape) * 1e-3 + np.pi, s.faces)
    p = tmp_path / name
    mio.save_surface(s, p, binary=binary)
    t = mio.load_surface(p)
    assert t.points.tobytes() == s.points.tobytes()
    assert np.array_equal(t.faces, s.faces)


def test_ply_binary_big_endian_and_float(tmp_path):
    pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]], dtype=">f4")
    header = (
        "ply\nformat binary_big_endian 1.0\ncomment x\nelement vertex 3\n"
        "property float x\nproperty float y\nproperty float z\n"
        "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
    )
    p = tmp_path / "be.ply"
    p.write_bytes(header.encode() + pts.tobytes() + struct.pack(">Biii", 3, 0, 1, 2))
    s = mio.load_surface(p)
    np.testing.assert_array_equal(s.points, pts.astype(float))
    assert s.faces.tolist() == [[0, 1, 2]]


def test_ply_extra_properties(tmp_path):
    p = tmp_path / "extra.ply"
    p.write_text(
        "ply\nformat ascii 1.0\nelement vertex 3\nproperty float nx\nproperty float x\n"
        "property float y\nproperty float z\nproperty uchar red\n"
        "element face 1\nproperty list uchar int vertex_indices\nend_header\n"
        "9 0 0 0 255\n9 1 0 0 0\n9 0 1 0 1\n3 0 1 2\n"
    )
    s = mio.load_surface(p)
    np.testing.assert_array_equal(s.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])


def test_ply_not_ply(tmp_path):
    p = tmp_path / "x.ply"
    p.write_text("hello\n")
    with pytest.raises(mio.MeshFormatError):
        mio.load_surface(p)


def test_unknown_extension(tmp_path):
    with pytest.raises(mio.MeshFormatError):
        mio.load_surface(tmp_path / "x.stl")


def test_scalar_channel(tmp_path):
    s = strip_mesh(3, 3)
    q = np.arange(9, dtype=float)
    mio.save_surface(s, tmp_path / "a.ply", scalar=q)
    assert b"property double quality" in (tmp_path / "a.ply").read_bytes()
    assert mio.load_surface(tmp_path / "a.ply").points.tobytes() == s.points.tobytes()
    mio.save_surface(s, tmp_path / "a.obj", scalar=q)
    first = [l for l in (tmp_path / "a.obj").read_text().splitlines() if l.startswith("v ")][0]
    assert len(first.split()) == 7
    mio.save_surface(s, tmp_path / "b.ply")
    assert b"quality" not in (tmp_path / "b.ply").read_bytes()
    with pytest.raises(ValueError):
        mio.save_surface(s, tmp_path / "c.ply", scalar=q[:-1])


def test_colormap_ends():
    c = mio.scalar_colors([0.0, 1.0, 0.5])
    np.testing.assert_allclose(c[0], [0, 0, 1])
    np.testing.assert_allclose(c[1], [1, 0, 0])


def test_text_formats(tmp_path):
    idx = np.array([0, 5, 7])
    vec = np.random.default_rng(2).normal(size=(3, 3))
    mio.save_flows(tmp_path / "f.txt", idx, vec)
    i2, v2 = mio.load_flows(tmp_path / "f.txt")
    assert np.array_equal(i2, idx) and v2.tobytes() == vec.tobytes()

    (tmp_path / "l.txt").write_text("# src tgt\n1 4\n2 9\n")
    a, b = mio.load_landmarks(tmp_path / "l.txt")
    assert a.tolist() == [1, 2] and b.tolist() == [4, 9]

    m = np.array([True, False, True])
    mio.save_mask(tmp_path / "m.mask", m)
    assert np.array_equal(mio.load_mask(tmp_path / "m.mask"), m)

    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(mio.MeshFormatError, match=":1:"):
        mio.load_flows(tmp_path / "bad.txt")
