"""Linear blend skinning and the uniform mesh Laplacian."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .kinematics import JointTransforms, RigidAlignment


class TopologyError(ValueError):
    pass


def lbs_deform(vertices, weights, transforms: JointTransforms,
               align: RigidAlignment | None = None) -> ad.Var:
    """m_v = align( sum_j w_vj T_j [m_v; 1] ).

    ``vertices`` (V,3) and ``weights`` (V,J) may be tape values or arrays.
    """
    tape = transforms.rotations.tape
    v = ad._lift(tape, vertices)
    w = ad._lift(tape, weights)
    rot = ad.einsum("vj,jab->vab", w, transforms.rotations)
    out = ad.einsum("vab,vb->va", rot, v) + ad.matmul(w, transforms.translations)
    if align is not None:
        out = align.apply(out)
    return out


def neighbors(faces, n_vertices) -> list[np.ndarray]:
    """1-ring vertex neighbours from shared triangle edges."""
    f = np.asarray(faces)
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e = np.concatenate([e, e[:, ::-1]])
    adj = sp.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n_vertices, n_vertices)).tocsr()
    return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]] for i in range(n_vertices)]


def laplacian_matrix(faces, n_vertices) -> sp.csr_matrix:
    """I - D^-1 A for the unweighted 1-ring adjacency."""
    nbrs = neighbors(faces, n_vertices)
    lonely = [i for i, n in enumerate(nbrs) if len(n) == 0]
    if lonely:
        raise TopologyError(f"vertex {lonely[0]} has no neighbours")
    rows = np.repeat(np.arange(n_vertices), [len(n) for n in nbrs])
    cols = np.concatenate(nbrs)
    vals = np.concatenate([np.full(len(n), 1.0 / len(n)) for n in nbrs])
    avg = sp.csr_matrix((vals, (rows, cols)), shape=(n_vertices, n_vertices))
    return (sp.identity(n_vertices, format="csr") - avg).tocsr()


def laplacian(mesh, lap: sp.csr_matrix):
    """Per-vertex residual m_v minus the mean of its neighbours."""
    if isinstance(mesh, ad.Var):
        return ad.sparse_matmul(lap, mesh)
    return lap @ np.asarray(mesh)
