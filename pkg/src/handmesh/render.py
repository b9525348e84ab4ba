"""Pinhole cameras and a z-buffered depth rasteriser.

Visibility (which triangle covers which pixel) is decided by a compiled
scanline kernel and is frozen for the pass.  Foreground depth is then
recomputed on the tape as the exact intersection of the pixel-centre ray with
the plane of the covering triangle, which is the perspective-correct
interpolated camera-space z and is differentiable in the three vertices.

Pixel (x, y) has its centre at (x + 0.5, y + 0.5).  Pixels exactly on a shared
edge belong to one triangle only (top-left style ownership).  Triangles with a
vertex at or behind the camera plane are skipped; there is no far plane.
Depths are millimetres; background is +inf in memory and 0 in PFM files.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numba
import numpy as np

from . import autodiff as ad

NEAR = 1e-6


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray      # world -> camera
    translation: np.ndarray
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        r = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9):
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    @classmethod
    def look_at(cls, eye, target, up, fx, fy=None, width=256, height=256):
        eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, -up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        rot = np.stack([x, y, z])
        return cls(fx, fx if fy is None else fy, width / 2.0, height / 2.0,
                   rot, -rot @ eye, width, height)

    def to_camera(self, pts):
        if isinstance(pts, ad.Var):
            return ad.einsum("ab,nb->na", self.rotation, pts) + self.translation
        return np.asarray(pts) @ self.rotation.T + self.translation

    def project(self, pts_cam) -> np.ndarray:
        p = np.asarray(pts_cam)
        return np.stack([self.fx * p[:, 0] / p[:, 2] + self.cx,
                         self.fy * p[:, 1] / p[:, 2] + self.cy], axis=1)

    def rays(self, pix_x, pix_y) -> np.ndarray:
        """Camera-space ray directions (z = 1) through pixel centres."""
        return np.stack([(pix_x + 0.5 - self.cx) / self.fx,
                         (pix_y + 0.5 - self.cy) / self.fy,
                         np.ones(len(pix_x))], axis=1)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": self.rotation.tolist(), "t": self.translation.tolist(),
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], np.array(d["R"]), np.array(d["t"]),
                   int(d["width"]), int(d["height"]))


def save_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1), encoding="utf-8")


def load_cameras(path) -> list[Camera]:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


@numba.njit(cache=True)
def _owns(ex, ey, w):
    # Edge ownership for w == 0; a shared edge is walked in opposite directions
    # by its two triangles so exactly one of them owns it.
    if w > 0.0:
        return True
    if w < 0.0:
        return False
    return ey > 0.0 or (ey == 0.0 and ex > 0.0)


@numba.njit(cache=True)
def _rasterize(xy, z, faces, width, height, near):
    zbuf = np.full((height, width), np.inf)
    fid = np.full((height, width), -1, dtype=np.int64)
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        if z[i0] <= near or z[i1] <= near or z[i2] <= near:
            continue
        x0, y0 = xy[i0, 0], xy[i0, 1]
        x1, y1 = xy[i1, 0], xy[i1, 1]
        x2, y2 = xy[i2, 0], xy[i2, 1]
        z0, z1, z2 = z[i0], z[i1], z[i2]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        if area < 0.0:
            x1, y1, x2, y2 = x2, y2, x1, y1
            z1, z2 = z2, z1
            area = -area
        xmin = max(int(np.floor(min(x0, min(x1, x2)) - 0.5)), 0)
        xmax = min(int(np.ceil(max(x0, max(x1, x2)) - 0.5)), width - 1)
        ymin = max(int(np.floor(min(y0, min(y1, y2)) - 0.5)), 0)
        ymax = min(int(np.ceil(max(y0, max(y1, y2)) - 0.5)), height - 1)
        for py in range(ymin, ymax + 1):
            cy = py + 0.5
            for px in range(xmin, xmax + 1):
                cx = px + 0.5
                w0 = (x2 - x1) * (cy - y1) - (y2 - y1) * (cx - x1)
                w1 = (x0 - x2) * (cy - y2) - (y0 - y2) * (cx - x2)
                w2 = (x1 - x0) * (cy - y0) - (y1 - y0) * (cx - x0)
                if not (_owns(x2 - x1, y2 - y1, w0) and _owns(x0 - x2, y0 - y2, w1)
                        and _owns(x1 - x0, y1 - y0, w2)):
                    continue
                inv = (w0 / z0 + w1 / z1 + w2 / z2) / area
                d = 1.0 / inv
                if d < zbuf[py, px]:
                    zbuf[py, px] = d
                    fid[py, px] = f
    return zbuf, fid


def rasterize(vertices_cam, faces, camera: Camera):
    """(interpolated depth map, covering face id map with -1 for background)."""
    v = np.ascontiguousarray(vertices_cam, dtype=np.float64)
    z = v[:, 2].copy()
    safe = np.where(z > NEAR, z, 1.0)
    xy = np.stack([camera.fx * v[:, 0] / safe + camera.cx,
                   camera.fy * v[:, 1] / safe + camera.cy], axis=1)
    return _rasterize(xy, z, np.ascontiguousarray(faces, dtype=np.int64),
                      camera.width, camera.height, NEAR)


def _plane_depth_values(a, b, c, d):
    n = np.cross(b - a, c - a)
    return np.einsum("ij,ij->i", n, a) / np.einsum("ij,ij->i", n, d)


def plane_depth(vertices_cam: ad.Var, faces, face_ids, rays) -> ad.Var:
    """Depth along each ray (z = 1 normalised) of the plane of its face.

    With e1 = b - a, e2 = c - a, n = e1 x e2 and q = a - z d:
    dz/db = (e2 x q) / (n.d), dz/dc = (q x e1) / (n.d), dz/da = n/(n.d) - dz/db - dz/dc.
    """
    V = vertices_cam.shape[0]
    f = np.asarray(faces)[face_ids]
    vv = vertices_cam.value
    a, b, c = vv[f[:, 0]], vv[f[:, 1]], vv[f[:, 2]]
    e1, e2 = b - a, c - a
    n = np.cross(e1, e2)
    nd = np.einsum("ij,ij->i", n, rays)
    z = np.einsum("ij,ij->i", n, a) / nd
    q = a - z[:, None] * rays
    gb = np.cross(e2, q) / nd[:, None]
    gc = np.cross(q, e1) / nd[:, None]
    ga = n / nd[:, None] - gb - gc

    def vjp(g):
        out = np.zeros((V, 3))
        for col, gv in ((0, ga), (1, gb), (2, gc)):
            contrib = gv * g[:, None]
            for k in range(3):
                out[:, k] += np.bincount(f[:, col], weights=contrib[:, k], minlength=V)
        return (out,)
    return vertices_cam.tape.record("plane_depth", (vertices_cam,), z, vjp)


@dataclass
class Rendered:
    """Foreground pixels of one view and their depths on the tape."""
    camera: Camera
    pixels: np.ndarray        # flat pixel indices, row-major
    face_ids: np.ndarray
    depth: ad.Var             # (P,)

    def depth_map(self) -> np.ndarray:
        out = np.full(self.camera.height * self.camera.width, np.inf)
        out[self.pixels] = self.depth.value
        return out.reshape(self.camera.height, self.camera.width)


def render_depth(vertices_world, faces, camera: Camera, tape: ad.Tape | None = None,
                 face_map=None) -> Rendered:
    """Render a depth map; foreground depths stay differentiable.

    ``face_map`` (H x W covering face ids) skips rasterisation and reuses a
    known visibility, e.g. for finite-difference checks.
    """
    if tape is None:
        tape = vertices_world.tape if isinstance(vertices_world, ad.Var) else ad.Tape()
    vw = ad._lift(tape, vertices_world)
    cam = camera.to_camera(vw)
    if face_map is None:
        _, face_map = rasterize(cam.value, faces, camera)
    flat = np.asarray(face_map).reshape(-1)
    pix = np.flatnonzero(flat >= 0)
    py, px = np.divmod(pix, camera.width)
    depth = plane_depth(cam, faces, flat[pix], camera.rays(px, py))
    return Rendered(camera, pix, flat[pix], depth)


def render_depth_map(vertices_world, faces, camera: Camera) -> np.ndarray:
    """Plain-array convenience wrapper."""
    return render_depth(np.asarray(vertices_world, dtype=np.float64), faces, camera).depth_map()


def foreground_mask(rendered, target) -> np.ndarray:
    """1 where both maps hold a finite positive depth."""
    r, t = np.asarray(rendered), np.asarray(target)
    if r.shape != t.shape:
        raise ValueError(f"depth map sizes differ: {r.shape} vs {t.shape}")
    ok = lambda m: np.isfinite(m) & (m > 0)  # noqa: E731
    return (ok(r) & ok(t)).astype(np.uint8)
