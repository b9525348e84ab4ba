"""Pose vectors, Euler rotations, forward kinematics and rigid alignment.

Joint rotations are Euler angles relative to the parent joint, composed
intrinsically in ``order`` (default X then Y then Z, i.e. R = Rx @ Ry @ Rz).
Only channels enabled in the DOF mask are driven by the pose vector; the
others stay at zero.  The optimised variable is an unconstrained ``raw``
vector u with theta = pi * tanh(u), which keeps every angle inside (-pi, pi).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import JointHierarchy

EULER_ORDER = "XYZ"

# Default 28-DOF mask for the 21-joint layout: wrist, then thumb CMC/MCP/IP/TIP,
# then index, middle, ring, pinky MCP/PIP/DIP/TIP.
_WRIST = [(True, True, True)]
_THUMB = [(True, True, True), (True, False, False), (True, False, False), (False, False, False)]
_FINGER = [(True, True, True), (True, False, False), (True, False, False), (False, False, False)]
DEFAULT_DOF_MASK = np.array(_WRIST + _THUMB + _FINGER * 4, dtype=bool).reshape(-1)


class DegenerateError(ValueError):
    pass


@dataclass
class PoseVector:
    raw: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.raw.shape != (np.count_nonzero(self.mask),):
            raise ValueError(f"raw has {self.raw.size} entries but mask enables "
                             f"{np.count_nonzero(self.mask)}")

    @classmethod
    def zeros(cls, mask):
        return cls(np.zeros(int(np.count_nonzero(mask))), mask)

    @classmethod
    def from_angles(cls, theta, mask):
        theta = np.asarray(theta, dtype=np.float64)
        if np.any(np.abs(theta) >= np.pi):
            raise ValueError("angles must lie strictly inside (-pi, pi)")
        return cls(np.arctanh(theta / np.pi), mask)

    @property
    def active(self) -> np.ndarray:
        return np.pi * np.tanh(self.raw)

    def full_angles(self) -> np.ndarray:
        out = np.zeros(self.mask.size)
        out[self.mask] = self.active
        return out.reshape(-1, 3)


def raw_to_angles(u: ad.Var, mask) -> ad.Var:
    """Raw pose (N_P,) to per-joint Euler angles (J, 3) on the tape."""
    mask = np.asarray(mask, dtype=bool)
    theta = np.pi * ad.tanh(u)
    full = ad.scatter_add(theta, np.flatnonzero(mask), mask.size)
    return ad.reshape(full, (-1, 3))


def _axis_matrix(axis: str, c: ad.Var, s: ad.Var) -> ad.Var:
    one = np.ones(c.shape)
    zero = np.zeros(c.shape)
    if axis == "X":
        rows = [one, zero, zero, zero, c, -s, zero, s, c]
    elif axis == "Y":
        rows = [c, zero, s, zero, one, zero, -s, zero, c]
    else:
        rows = [c, -s, zero, s, c, zero, zero, zero, one]
    m = ad.stack(rows, axis=-1)
    return ad.reshape(m, c.shape + (3, 3))


def euler_to_rotation(angles, order: str = EULER_ORDER):
    """Rotation matrices (..., 3, 3) from Euler angles (..., 3).

    Accepts a tape value or a plain array (then returns an array).
    """
    if not isinstance(angles, ad.Var):
        tape = ad.Tape()
        return euler_to_rotation(tape.const(angles), order).value
    c, s = ad.cos(angles), ad.sin(angles)
    mats = []
    for i, axis in enumerate(order):
        mats.append(_axis_matrix(axis, c[..., i], s[..., i]))
    r = mats[0]
    for m in mats[1:]:
        r = ad.einsum("...ab,...bc->...ac", r, m)
    return r


@dataclass
class JointTransforms:
    """Skinning transforms T_j = G_j * inv(G_j at zero pose).

    ``rotations`` (J,3,3) and ``translations`` (J,3) make up T_j;
    ``positions`` are the posed joint locations, ``rest_positions`` the
    zero-pose ones, and ``global_rotations`` the joint frames (equal to the
    rotation part of T_j because zero-pose frames are unrotated).
    """
    rotations: ad.Var
    translations: ad.Var
    positions: ad.Var
    rest_positions: ad.Var

    def matrices(self) -> np.ndarray:
        J = self.rotations.shape[0]
        out = np.tile(np.eye(4), (J, 1, 1))
        out[:, :3, :3] = self.rotations.value
        out[:, :3, 3] = self.translations.value
        return out


def _levels(hierarchy: JointHierarchy):
    depth = hierarchy.depth()
    return [np.flatnonzero(depth == d) for d in range(depth.max() + 1)]


def forward_kinematics(angles: ad.Var, offsets: ad.Var, hierarchy: JointHierarchy,
                       order: str = EULER_ORDER, root_rotation=None) -> JointTransforms:
    """Compose local rotations down the hierarchy.

    G_j = G_p(j) * [R(angles_j) | offsets_j]; joints are processed one tree
    level at a time so each level is a single batched product.
    ``root_rotation`` optionally pre-multiplies the whole chain.
    """
    tape = angles.tape
    offsets = ad._lift(tape, offsets)
    J = hierarchy.n_joints
    local = euler_to_rotation(angles, order)
    levels = _levels(hierarchy)
    root = levels[0]

    rg = ad.gather(local, root)
    pos = ad.gather(offsets, root)
    if root_rotation is not None:
        rr = np.asarray(root_rotation, dtype=np.float64)
        rg = ad.einsum("ab,nbc->nac", rr, rg)
        pos = ad.einsum("ab,nb->na", rr, pos)
    rg_levels, pos_levels = [rg], [pos]
    for prev, cur in zip(levels[:-1], levels[1:]):
        slot = {int(j): k for k, j in enumerate(prev)}
        pl = np.array([slot[int(hierarchy.parent[j])] for j in cur])
        rp = ad.gather(rg_levels[-1], pl)
        rg_levels.append(ad.einsum("nab,nbc->nac", rp, ad.gather(local, cur)))
        pos_levels.append(ad.gather(pos_levels[-1], pl)
                          + ad.einsum("nab,nb->na", rp, ad.gather(offsets, cur)))
    order_idx = np.concatenate(levels)
    inv = np.empty(J, dtype=np.intp)
    inv[order_idx] = np.arange(J)
    rot = ad.gather(ad.concat(rg_levels, axis=0), inv)
    posed = ad.gather(ad.concat(pos_levels, axis=0), inv)
    rest = ad.matmul(hierarchy.ancestor_matrix(), offsets)
    trans = posed - ad.einsum("nab,nb->na", rot, rest)
    return JointTransforms(rot, trans, posed, rest)


@dataclass(frozen=True)
class RigidAlignment:
    rotation: np.ndarray
    translation: np.ndarray

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts):
        """Apply to an (N, 3) array or tape value."""
        if isinstance(pts, ad.Var):
            return ad.einsum("ab,nb->na", self.rotation, pts) + self.translation
        return np.asarray(pts) @ self.rotation.T + self.translation


def rigid_align(source, target) -> RigidAlignment:
    """Least-squares rotation and translation (no scale) taking source to target."""
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f"point sets must both be (K, 3), got {src.shape} and {dst.shape}")
    if len(src) < 3:
        raise DegenerateError(f"need at least 3 correspondences, got {len(src)}")
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    a, b = src - cs, dst - cd
    for name, pts in (("source", a), ("target", b)):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] == 0 or sv[1] < 1e-9 * sv[0]:
            raise DegenerateError(f"{name} points are collinear or coincident")
    u, _, vt = np.linalg.svd(a.T @ b)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidAlignment(rot, cd - rot @ cs)
