"""Sphere chains along bones and the two penetration penalties.

Every bone (p(j), j) carries K spheres whose rest centres interpolate the
zero-pose joints from p(j) (k = 0) to j (k = K-1).  Each radius is the
distance from its rest centre to the nearest vertex of the zero-pose refined
mesh.  Spheres ride rigidly with the bone, i.e. with the skinning transform of
the bone's driving joint p(j).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .kinematics import JointTransforms, RigidAlignment
from .model import JointHierarchy

N_SPHERES = 10
LAMBDA_NR = 5.0


class ConfigurationError(ValueError):
    pass


@dataclass
class SphereChains:
    bones: list            # (parent, child) per chain
    centers: ad.Var        # (B*K, 3) rest or posed centres, chain-major
    radii: np.ndarray      # (B*K,)
    k: int = N_SPHERES

    @property
    def n_chains(self) -> int:
        return len(self.bones)

    def chain_index(self, b: int) -> np.ndarray:
        return np.arange(b * self.k, (b + 1) * self.k)

    def to_json(self) -> str:
        c = self.centers.value.reshape(self.n_chains, self.k, 3)
        r = self.radii.reshape(self.n_chains, self.k)
        return json.dumps({"k": self.k, "chains": [
            {"bone": [int(p), int(j)], "centers": c[i].tolist(), "radii": r[i].tolist()}
            for i, (p, j) in enumerate(self.bones)]}, indent=1)


def nearest_vertex(points, vertices, chunk=256):
    """(distance, index) of the closest vertex for each point; ties go to the
    lowest index."""
    points = np.asarray(points, dtype=np.float64)
    vertices = np.asarray(vertices, dtype=np.float64)
    dist = np.empty(len(points))
    idx = np.empty(len(points), dtype=np.intp)
    for s in range(0, len(points), chunk):
        d2 = ((points[s:s + chunk, None, :] - vertices[None]) ** 2).sum(-1)
        i = np.argmin(d2, axis=1)
        idx[s:s + chunk] = i
        dist[s:s + chunk] = np.sqrt(d2[np.arange(len(i)), i])
    return dist, idx


def build_sphere_chains(rest_joints, rest_vertices, hierarchy: JointHierarchy,
                        k: int = N_SPHERES) -> SphereChains:
    """Rest spheres for every bone.

    ``rest_joints`` are zero-pose joints (tape value or array); the radii are
    constants computed from the zero-pose refined vertices.
    """
    bones = hierarchy.bones()
    par = np.array([p for p, _ in bones])
    chi = np.array([j for _, j in bones])
    s = np.linspace(0.0, 1.0, k)
    if isinstance(rest_joints, ad.Var):
        a = ad.reshape(ad.gather(rest_joints, par), (-1, 1, 3))
        b = ad.reshape(ad.gather(rest_joints, chi), (-1, 1, 3))
        centers = ad.reshape(a + (b - a) * s[None, :, None], (-1, 3))
        cval = centers.value
    else:
        rj = np.asarray(rest_joints, dtype=np.float64)
        a, b = rj[par][:, None, :], rj[chi][:, None, :]
        cval = (a + (b - a) * s[None, :, None]).reshape(-1, 3)
        centers = ad.Tape().const(cval)
    rv = rest_vertices.value if isinstance(rest_vertices, ad.Var) else rest_vertices
    radii, _ = nearest_vertex(cval, rv)
    return SphereChains(bones, centers, radii, k)


def pose_sphere_chains(chains: SphereChains, transforms: JointTransforms,
                       align: RigidAlignment | None = None) -> SphereChains:
    """Carry rest centres by the transform of each bone's parent joint."""
    drive = np.repeat([p for p, _ in chains.bones], chains.k)
    tape = transforms.rotations.tape
    c = chains.centers
    c = c if c.tape is tape else tape.const(c.value)
    rot = ad.gather(transforms.rotations, drive)
    posed = ad.einsum("nab,nb->na", rot, c) + ad.gather(transforms.translations, drive)
    if align is not None:
        posed = align.apply(posed)
    return SphereChains(chains.bones, posed, chains.radii, chains.k)


def excluded_bone_pairs(bones) -> np.ndarray:
    """B x B mask of bone pairs whose spheres are not compared: the same bone,
    parent/child bones, and sibling bones sharing a parent joint."""
    B = len(bones)
    ex = np.zeros((B, B), dtype=bool)
    for a, (pa, ja) in enumerate(bones):
        for b, (pb, jb) in enumerate(bones):
            ex[a, b] = ja == jb or ja == pb or jb == pa or pa == pb
    return ex


def candidate_pairs(chains: SphereChains) -> tuple[np.ndarray, np.ndarray]:
    """Sphere index pairs (i < j) from non-adjacent bones."""
    ex = excluded_bone_pairs(chains.bones)
    bi = np.repeat(np.arange(chains.n_chains), chains.k)
    n = len(bi)
    i, j = np.triu_indices(n, 1)
    keep = ~ex[bi[i], bi[j]]
    return i[keep], j[keep]


def rigid_penetration(chains: SphereChains, pairs=None) -> ad.Var:
    """Sum over sphere pairs of non-adjacent bones of max(r + r' - |c - c'|, 0).

    Only currently overlapping pairs are put on the tape; the others add
    exactly zero to both value and gradient.
    """
    i, j = candidate_pairs(chains) if pairs is None else pairs
    c = chains.centers
    tape = c.tape
    cv, r = c.value, chains.radii
    gap = r[i] + r[j] - np.linalg.norm(cv[i] - cv[j], axis=1)
    act = gap > 0
    if not np.any(act):
        return tape.const(0.0)
    i, j = i[act], j[act]
    d = ad.norm(ad.gather(c, i) - ad.gather(c, j))
    return ad.sum(ad.maximum((r[i] + r[j]) - d, 0.0))


def fingertip_chains(chains: SphereChains, hierarchy: JointHierarchy) -> list[int]:
    tips = set(int(t) for t in hierarchy.fingertip_joints)
    return [b for b, (_, j) in enumerate(chains.bones) if j in tips]


def nonrigid_penetration(chains: SphereChains, hierarchy: JointHierarchy,
                         palm_vertices: ad.Var) -> ad.Var:
    """Fingertip-into-palm penalty.

    For each fingertip chain, d_k is the distance from centre k to the nearest
    palm vertex.  l is the first k (counting from the parent joint) with
    d_k < r_k; if it exists the chain adds sum_{k >= l} |d_k - r_k|.
    """
    tape = chains.centers.tape
    palm = ad._lift(tape, palm_vertices)
    if palm.shape[0] == 0:
        raise ConfigurationError("palm vertex set is empty")
    c = chains.centers
    terms = []
    for b in fingertip_chains(chains, hierarchy):
        idx = chains.chain_index(b)
        d, nv = nearest_vertex(c.value[idx], palm.value)
        r = chains.radii[idx]
        hit = np.flatnonzero(d < r)
        if hit.size == 0:
            continue
        ks = idx[hit[0]:]
        nk = nv[hit[0]:]
        dist = ad.norm(ad.gather(c, ks) - ad.gather(palm, nk))
        terms.append(ad.sum(ad.abs(dist - r[hit[0]:])))
    if not terms:
        return tape.const(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def penetration_loss(rigid, nonrigid, lambda_nr: float = LAMBDA_NR):
    return rigid + lambda_nr * nonrigid
