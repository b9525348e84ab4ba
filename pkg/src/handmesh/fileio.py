"""OBJ meshes, PFM depth maps and the named-array container used for checkpoints.

Array container layout (version 1)::

    b"HMARRAYS\\n"                      magic line
    uint64 little-endian                byte length N of the JSON header
    N bytes UTF-8 JSON                  {"version": 1, "meta": {...},
                                         "arrays": [{"name", "dtype", "shape",
                                                     "offset", "nbytes"}, ...]}
    raw little-endian array payloads    C order, offsets relative to payload start

Everything is written in a fixed order with sorted JSON keys so equal inputs
give equal bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """A file could not be parsed; the message names the line or field."""


# --- OBJ --------------------------------------------------------------------

def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    if len(idx) != 3:
                        raise ValueError(f"only triangles supported, got {len(idx)} indices")
                    faces.append([i - 1 for i in idx])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return (np.array(verts, dtype=np.float64).reshape(-1, 3),
            np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, vertices, faces) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in np.asarray(vertices, dtype=np.float64).tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces).tolist()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


# --- PFM --------------------------------------------------------------------

def write_pfm(path, depth) -> None:
    """Grayscale little-endian PFM.  Non-finite (background) pixels become 0."""
    d = np.asarray(depth, dtype=np.float64)
    if d.ndim != 2:
        raise ValueError(f"depth map must be 2-D, got shape {d.shape}")
    data = np.where(np.isfinite(d), d, 0.0).astype("<f4")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        # PFM stores rows bottom to top.
        fh.write(np.ascontiguousarray(data[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM; background (0) pixels come back as +inf."""
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind == b"PF":
            raise FormatError(f"{path}: colour PFM not supported (grayscale 'Pf' only)")
        if kind != b"Pf":
            raise FormatError(f"{path}: bad PFM magic {kind!r}")
        try:
            w, h = (int(x) for x in fh.readline().split())
            scale = float(fh.readline().strip())
        except ValueError as exc:
            raise FormatError(f"{path}: malformed PFM header: {exc}") from None
        if w <= 0 or h <= 0 or scale == 0:
            raise FormatError(f"{path}: malformed PFM header dims={w}x{h} scale={scale}")
        dtype = "<f4" if scale < 0 else ">f4"
        raw = fh.read()
    if len(raw) != 4 * w * h:
        raise FormatError(f"{path}: expected {4 * w * h} data bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w)[::-1].astype(np.float32)
    return np.where(data > 0, data, np.float32(np.inf))


# --- named arrays -----------------------------------------------------------

_MAGIC = b"HMARRAYS\n"
ARRAYS_VERSION = 1


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"))
        blob = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"version": ARRAYS_VERSION, "meta": meta or {}, "arrays": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise FormatError(f"{path}: not a handmesh array file")
        (n,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(n).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad header: {exc}") from None
        payload = fh.read()
    if header.get("version") != ARRAYS_VERSION:
        raise FormatError(f"{path}: unsupported version {header.get('version')}")
    arrays = {}
    for e in header["arrays"]:
        buf = payload[e["offset"]: e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=e["dtype"]).reshape(e["shape"]).copy()
    return arrays, header["meta"]
