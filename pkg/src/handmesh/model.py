"""Hand model container: template mesh, skeleton offsets, skinning weights and
joint hierarchy, plus the OBJ + JSON bundle format.

A bundle is two files sharing a stem, ``hand.obj`` and ``hand.json``.  The
JSON sidecar holds ``parents``, ``offsets`` (J x 3), ``weights`` (V x J, dense
row-major), ``fingertips``, ``palm_joint``, ``dof_mask`` (3J booleans) and
``joint_names``.  Lengths are millimetres.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import FormatError, read_obj, write_obj

WEIGHT_SUM_TOL = 1e-6


class ValidationError(ValueError):
    """A model violates one of its structural invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


@dataclass(frozen=True, eq=False)
class JointHierarchy:
    parent: np.ndarray
    names: tuple
    fingertip_joints: tuple
    palm_joint: int = 0

    @property
    def n_joints(self) -> int:
        return len(self.parent)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent < 0)[0])

    def children(self, j: int) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.parent == j)]

    def depth(self) -> np.ndarray:
        d = np.zeros(self.n_joints, dtype=np.int64)
        for j in range(self.n_joints):
            if self.parent[j] >= 0:
                d[j] = d[self.parent[j]] + 1
        return d

    def ancestor_matrix(self) -> np.ndarray:
        """A[j, k] = 1 when k is j or one of its ancestors, so that zero-pose
        joint positions are ``A @ offsets``."""
        n = self.n_joints
        a = np.zeros((n, n))
        for j in range(n):
            k = j
            while k >= 0:
                a[j, k] = 1.0
                k = self.parent[k]
        return a

    def bones(self) -> list[tuple[int, int]]:
        """(parent, child) pairs in child order."""
        return [(int(self.parent[j]), j) for j in range(self.n_joints) if self.parent[j] >= 0]


@dataclass(frozen=True, eq=False)
class HandModel:
    template_vertices: np.ndarray
    faces: np.ndarray
    skeleton_offsets: np.ndarray
    skinning_weights: np.ndarray
    hierarchy: JointHierarchy
    dof_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.dof_mask is None:
            object.__setattr__(self, "dof_mask", np.ones(3 * self.n_joints, dtype=bool))

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def n_joints(self) -> int:
        return len(self.skeleton_offsets)

    @property
    def n_pose(self) -> int:
        return int(np.count_nonzero(self.dof_mask))

    def palm_vertices(self) -> np.ndarray:
        """Vertices whose dominant skinning weight belongs to the palm joint."""
        return np.flatnonzero(np.argmax(self.skinning_weights, axis=1) == self.hierarchy.palm_joint)

    def zero_pose_joints(self, offsets=None) -> np.ndarray:
        s = self.skeleton_offsets if offsets is None else offsets
        return self.hierarchy.ancestor_matrix() @ s

    def replace(self, **kw) -> "HandModel":
        fields = dict(template_vertices=self.template_vertices, faces=self.faces,
                      skeleton_offsets=self.skeleton_offsets,
                      skinning_weights=self.skinning_weights,
                      hierarchy=self.hierarchy, dof_mask=self.dof_mask)
        fields.update(kw)
        return HandModel(**fields)

    def equals(self, other: "HandModel", rtol: float = 1e-12) -> bool:
        h, o = self.hierarchy, other.hierarchy
        return (np.array_equal(self.faces, other.faces)
                and np.array_equal(h.parent, o.parent)
                and tuple(h.names) == tuple(o.names)
                and tuple(h.fingertip_joints) == tuple(o.fingertip_joints)
                and h.palm_joint == o.palm_joint
                and np.array_equal(self.dof_mask, other.dof_mask)
                and all(a.shape == b.shape and np.allclose(a, b, rtol=rtol, atol=0)
                        for a, b in [(self.template_vertices, other.template_vertices),
                                     (self.skeleton_offsets, other.skeleton_offsets),
                                     (self.skinning_weights, other.skinning_weights)]))


def validate(model: HandModel) -> list[str]:
    """Every violated invariant, each naming the index and observed value."""
    out = []
    verts, faces = model.template_vertices, model.faces
    W, S = model.skinning_weights, model.skeleton_offsets
    h = model.hierarchy
    V, J = len(verts), len(S)

    if V < 4:
        out.append(f"vertex count {V} < 4")
    if J < 2:
        out.append(f"joint count {J} < 2")
    if verts.ndim != 2 or verts.shape[1:] != (3,):
        out.append(f"template_vertices shape {verts.shape} is not (V, 3)")
    if not np.all(np.isfinite(verts)):
        out.append("template_vertices contain non-finite values")
    if not np.all(np.isfinite(S)):
        out.append("skeleton_offsets contain non-finite values")

    # faces
    for f in np.flatnonzero(np.any((faces < 0) | (faces >= V), axis=1)):
        out.append(f"face {f} index out of range: {faces[f].tolist()} (V={V})")
    degenerate = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
    for f in np.flatnonzero(degenerate):
        out.append(f"face {f} is degenerate: {faces[f].tolist()}")
    used = np.zeros(V, dtype=bool)
    used[faces[(faces >= 0) & (faces < V)]] = True
    for v in np.flatnonzero(~used):
        out.append(f"vertex {v} is not referenced by any face")

    # weights
    if W.shape != (V, J):
        out.append(f"skinning_weights shape {W.shape} != ({V}, {J})")
    else:
        for v, j in zip(*np.nonzero(W < 0)):
            out.append(f"negative weight at (v={v}, j={j}): {W[v, j]!r}")
        sums = W.sum(axis=1)
        for v in np.flatnonzero(np.abs(sums - 1.0) > WEIGHT_SUM_TOL):
            out.append(f"weights row {v} sums to {sums[v]:.9g}")

    # hierarchy
    parent = np.asarray(h.parent)
    if len(parent) != J:
        out.append(f"hierarchy has {len(parent)} joints but offsets have {J}")
    else:
        roots = np.flatnonzero(parent < 0)
        if len(roots) != 1:
            out.append(f"hierarchy has {len(roots)} roots: {roots.tolist()}")
        for j in range(J):
            if parent[j] >= j:
                out.append(f"joint {j} parent {parent[j]} is not earlier in order")
        for t in h.fingertip_joints:
            if not 0 <= t < J:
                out.append(f"fingertip {t} out of range")
            elif np.any(parent == t):
                out.append(f"fingertip {t} is not a leaf")
        if len(roots) == 1:
            p = h.palm_joint
            if not (p == roots[0] or (0 <= p < J and parent[p] == roots[0])):
                out.append(f"palm_joint {p} is neither the root nor a child of the root")
    if len(h.names) != len(parent):
        out.append(f"{len(h.names)} joint names for {len(parent)} joints")

    mask = np.asarray(model.dof_mask)
    if mask.shape != (3 * J,):
        out.append(f"dof_mask length {mask.size} != 3J = {3 * J}")
    return out


def check(model: HandModel) -> HandModel:
    problems = validate(model)
    if problems:
        raise ValidationError(problems)
    return model


def _bundle_paths(path):
    p = Path(path)
    if p.suffix in (".obj", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".obj"), p.with_suffix(".json")


def save_model(model: HandModel, path) -> None:
    """Write ``<stem>.obj`` and ``<stem>.json``."""
    obj_path, json_path = _bundle_paths(path)
    obj_path.parent.mkdir(parents=True, exist_ok=True)
    write_obj(obj_path, model.template_vertices, model.faces)
    h = model.hierarchy
    sidecar = {
        "parents": [int(x) for x in h.parent],
        "offsets": model.skeleton_offsets.tolist(),
        "weights": model.skinning_weights.tolist(),
        "fingertips": [int(t) for t in h.fingertip_joints],
        "palm_joint": int(h.palm_joint),
        "dof_mask": [bool(b) for b in model.dof_mask],
        "joint_names": list(h.names),
    }
    json_path.write_text(json.dumps(sidecar, indent=1), encoding="utf-8")


def load_model(path) -> HandModel:
    obj_path, json_path = _bundle_paths(path)
    verts, faces = read_obj(obj_path)
    try:
        side = json.loads(Path(json_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{json_path}: line {exc.lineno}: {exc.msg}") from None
    for key in ("parents", "offsets", "weights"):
        if key not in side:
            raise FormatError(f"{json_path}: missing field {key!r}")
    try:
        parents = np.array(side["parents"], dtype=np.int64)
        offsets = np.array(side["offsets"], dtype=np.float64).reshape(-1, 3)
        weights = np.array(side["weights"], dtype=np.float64)
        if weights.ndim != 2:
            raise ValueError("weights must be a V x J matrix")
        J = len(parents)
        mask = np.array(side.get("dof_mask", [True] * (3 * J)), dtype=bool)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{json_path}: bad field value: {exc}") from None
    names = tuple(side.get("joint_names", [f"joint{j}" for j in range(len(parents))]))
    hier = JointHierarchy(parent=parents, names=names,
                          fingertip_joints=tuple(int(t) for t in side.get("fingertips", [])),
                          palm_joint=int(side.get("palm_joint", 0)))
    model = HandModel(verts, faces, offsets, weights, hier, mask)
    return check(model)
