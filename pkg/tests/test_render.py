import numpy as np
import pytest

from handmesh import autodiff as ad
from handmesh.fileio import FormatError, read_pfm, write_pfm
from handmesh.render import (Camera, foreground_mask, load_cameras, rasterize, render_depth,
                             render_depth_map, save_cameras)


def cam(size=32, f=40.0):
    return Camera(f, f, size / 2, size / 2, np.eye(3), np.zeros(3), size, size)


BIG = np.array([[-1000.0, -1000, 0], [1000, -1000, 0], [0, 1000, 0]])


def test_fronto_parallel_triangle():
    d = render_depth_map(BIG + [0, 0, 500.0], np.array([[0, 1, 2]]), cam())
    fg = np.isfinite(d)
    assert fg.sum() > 100 and np.all(d[fg] == 500.0)


def test_z_buffer_keeps_nearest():
    v = np.concatenate([BIG + [0, 0, 700.0], BIG + [0, 0, 300.0]])
    d = render_depth_map(v, np.array([[0, 1, 2], [3, 4, 5]]), cam())
    fg = np.isfinite(d)
    assert fg.sum() > 100 and np.all(d[fg] == 300.0)
    v = np.concatenate([BIG + [0, 0, 300.0], BIG + [0, 0, 700.0]])
    assert np.array_equal(render_depth_map(v, np.array([[0, 1, 2], [3, 4, 5]]), cam()), d)


def moller_trumbore(orig, d, a, b, c):
    e1, e2 = b - a, c - a
    p = np.cross(d, e2)
    det = e1 @ p
    if abs(det) < 1e-15:
        return None
    s = orig - a
    u = (s @ p) / det
    q = np.cross(s, e1)
    v = (d @ q) / det
    if u < 0 or v < 0 or u + v > 1:
        return None
    return (e2 @ q) / det


def test_slanted_triangle_vs_ray_cast():
    rng = np.random.default_rng(0)
    c = cam(48, 60.0)
    for _ in range(5):
        v = rng.uniform(-150, 150, (3, 3)) + [0, 0, 600.0]
        v[:, 2] += rng.uniform(-200, 200, 3)
        d = render_depth_map(v, np.array([[0, 1, 2]]), c)
        ys, xs = np.nonzero(np.isfinite(d))
        assert len(xs) > 0
        for y, x in zip(ys, xs):
            ray = c.rays(np.array([x]), np.array([y]))[0]
            t = moller_trumbore(np.zeros(3), ray, *v)
            if t is None:       # pixel centre on an edge owned by this triangle
                continue
            assert abs(d[y, x] - t * ray[2]) < 1e-9


def test_vertex_order_invariance(hand):
    c = Camera.look_at([0, 80, 600], [0, 80, 0], [0, 1, 0], 300.0, width=64, height=64)
    base = render_depth_map(hand.template_vertices, hand.faces, c)
    for perm in ([1, 2, 0], [2, 0, 1], [0, 2, 1]):
        other = render_depth_map(hand.template_vertices, hand.faces[:, perm], c)
        fg = np.isfinite(base)
        assert np.array_equal(fg, np.isfinite(other))
        assert np.max(np.abs(base[fg] - other[fg])) < 1e-12


def test_behind_camera_is_background():
    d = render_depth_map(BIG + [0, 0, -500.0], np.array([[0, 1, 2]]), cam())
    assert np.all(np.isinf(d))


def test_rasterize_agrees_with_plane_depth(hand):
    c = Camera.look_at([0, 80, 600], [0, 80, 0], [0, 1, 0], 300.0, width=64, height=64)
    zbuf, fmap = rasterize(c.to_camera(hand.template_vertices), hand.faces, c)
    d = render_depth_map(hand.template_vertices, hand.faces, c)
    fg = fmap >= 0
    assert np.array_equal(fg, np.isfinite(d)) and fg.sum() > 50
    assert np.max(np.abs(zbuf[fg] - d[fg])) < 1e-9


def test_depth_gradient_vs_finite_difference(hand):
    c = Camera.look_at([100, 80, 600], [0, 80, 0], [0, 1, 0], 300.0, width=64, height=64)
    rng = np.random.default_rng(1)
    v0 = hand.template_vertices
    _, fmap = rasterize(c.to_camera(v0), hand.faces, c)
    p = ad.Param(v0.copy())
    t = ad.Tape()
    r = render_depth(t.watch(p), hand.faces, c, t, fmap)
    w = rng.normal(size=r.depth.shape)
    t.backward(ad.sum(r.depth * w))

    def f(v):
        return float((render_depth(v, hand.faces, c, None, fmap).depth.value * w).sum())

    for _ in range(10):
        i, k = rng.integers(hand.n_vertices), rng.integers(3)
        e = np.zeros_like(v0)
        e[i, k] = 1e-4
        num = (f(v0 + e) - f(v0 - e)) / 2e-4
        assert abs(p.grad[i, k] - num) <= 1e-3 * max(abs(num), 1e-6)


def test_foreground_mask():
    a = np.array([[1.0, np.inf], [2.0, 3.0]])
    b = np.array([[1.0, 2.0], [np.inf, 3.0]])
    assert np.array_equal(foreground_mask(a, b), [[1, 0], [0, 1]])
    assert np.all(foreground_mask(a[:1, :1], b[:1, :1]) == 1)
    assert np.all(foreground_mask(np.array([[1.0, np.inf]]), np.array([[np.inf, 1.0]])) == 0)
    with pytest.raises(ValueError):
        foreground_mask(a, b[:1])


def test_rendered_map_pfm_round_trip(tmp_path, hand):
    c = Camera.look_at([0, 80, 600], [0, 80, 0], [0, 1, 0], 300.0, width=40, height=30)
    d = render_depth_map(hand.template_vertices, hand.faces, c).astype(np.float32)
    write_pfm(tmp_path / "v.pfm", d)
    assert np.array_equal(read_pfm(tmp_path / "v.pfm"), d)
    (tmp_path / "rgb.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + b"\0" * 12)
    with pytest.raises(FormatError):
        read_pfm(tmp_path / "rgb.pfm")


def test_camera_round_trip_and_validation(tmp_path):
    c = Camera.look_at([300, 80, 600], [0, 80, 0], [0, 1, 0], 250.0, width=64, height=48)
    save_cameras(tmp_path / "c.json", [c])
    (back,) = load_cameras(tmp_path / "c.json")
    assert np.array_equal(back.rotation, c.rotation) and back.width == 64 and back.height == 48
    with pytest.raises(ValueError):
        Camera(-1.0, 1.0, 0, 0, np.eye(3), np.zeros(3))
    with pytest.raises(ValueError):
        Camera(1.0, 1.0, 0, 0, 2 * np.eye(3), np.zeros(3))
    # look_at puts the target on the optical axis in front of the camera
    p = c.to_camera(np.array([[0.0, 80, 0]]))
    assert np.allclose(p[0, :2], 0, atol=1e-9) and p[0, 2] > 0
