"""Corrective heads and assembly of the refined hand model.

Four two-layer heads (hidden width 256, ReLU after the first layer, linear
output):

* ``skel``     identity code -> skeleton offset corrective (J, 3)
* ``idvert``   identity code -> per-vertex identity corrective (V, 3)
* ``posevert`` pose angles   -> per-vertex pose corrective (V, 3); its input
  is detached, so pose gradients never flow through this head
* ``skinw``    identity code -> skinning-weight corrective (V, J), optional and
  only applied where the base weight is non-zero
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .fileio import load_arrays, save_arrays
from .model import HandModel

HIDDEN = 256
N_IDENTITY = 32
HEAD_NAMES = ("skel", "idvert", "posevert", "skinw")


class DegenerateWeightsError(ValueError):
    pass


def identity_code(seed: int, n: int = N_IDENTITY) -> np.ndarray:
    """Frozen per-subject code drawn from a standard normal."""
    code = np.random.default_rng(seed).standard_normal(n)
    code.setflags(write=False)
    return code


class Head:
    """Two affine layers with a ReLU in between."""

    def __init__(self, name, n_in, out_shape, rng=None, sigma=0.01, hidden=HIDDEN):
        self.name = name
        self.out_shape = tuple(out_shape)
        n_out = int(np.prod(out_shape))
        if rng is None:
            w1, w2 = np.zeros((n_in, hidden)), np.zeros((hidden, n_out))
        else:
            w1 = rng.normal(0.0, sigma, (n_in, hidden))
            w2 = rng.normal(0.0, sigma, (hidden, n_out))
        self.w1 = ad.Param(w1, f"{name}.w1")
        self.b1 = ad.Param(np.zeros(hidden), f"{name}.b1")
        self.w2 = ad.Param(w2, f"{name}.w2")
        self.b2 = ad.Param(np.zeros(n_out), f"{name}.b2")

    @property
    def params(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: ad.Var) -> ad.Var:
        h = ad.relu(ad.matmul(ad.reshape(x, (1, -1)), self.w1) + self.b1)
        out = ad.matmul(h, self.w2) + self.b2
        return ad.reshape(out, self.out_shape)

    def evaluate(self, x) -> np.ndarray:
        h = np.maximum(np.asarray(x) @ self.w1.value + self.b1.value, 0.0)
        return (h @ self.w2.value + self.b2.value).reshape(self.out_shape)


class CorrectiveNets:
    """The corrective heads for one hand model.

    ``enabled`` switches individual heads on and off (ablations); a disabled
    head contributes exactly zero and receives no gradient.
    """

    def __init__(self, n_vertices, n_joints, n_pose, n_identity=N_IDENTITY,
                 seed=None, sigma=0.01, skinw=False, enabled=None):
        rng = None if seed is None else np.random.default_rng(seed)
        self.n_vertices, self.n_joints = n_vertices, n_joints
        self.heads = {
            "skel": Head("skel", n_identity, (n_joints, 3), rng, sigma),
            "idvert": Head("idvert", n_identity, (n_vertices, 3), rng, sigma),
            "posevert": Head("posevert", n_pose, (n_vertices, 3), rng, sigma),
        }
        if skinw:
            self.heads["skinw"] = Head("skinw", n_identity, (n_vertices, n_joints), rng, sigma)
        self.enabled = {k: True for k in self.heads}
        for k, v in (enabled or {}).items():
            if k in self.enabled:
                self.enabled[k] = bool(v)

    @classmethod
    def for_model(cls, model: HandModel, **kw):
        return cls(model.n_vertices, model.n_joints, model.n_pose, **kw)

    def __getitem__(self, name) -> Head:
        return self.heads[name]

    def active(self, name) -> bool:
        return name in self.heads and self.enabled[name]

    def params(self):
        return [p for k, h in self.heads.items() if self.enabled[k] for p in h.params]

    def all_params(self):
        return [p for h in self.heads.values() for p in h.params]

    def state_arrays(self) -> dict:
        return {p.name: p.value for p in self.all_params()}

    def load_state_arrays(self, arrays):
        for p in self.all_params():
            p.value = np.array(arrays[p.name], dtype=np.float64)

    def save(self, path, meta=None):
        save_arrays(path, self.state_arrays(),
                    {"kind": "corrective_nets", "heads": sorted(self.heads),
                     "enabled": self.enabled, **(meta or {})})

    @classmethod
    def load(cls, path):
        arrays, meta = load_arrays(path)
        V, J = arrays["idvert.b2"].size // 3, arrays["skel.b2"].size // 3
        nets = cls(V, J, arrays["posevert.w1"].shape[0], arrays["skel.w1"].shape[0],
                   skinw="skinw" in meta.get("heads", []), enabled=meta.get("enabled"))
        nets.load_state_arrays(arrays)
        return nets


@dataclass
class RefinedModel:
    vertices: ad.Var      # template + pose corrective + identity corrective
    offsets: ad.Var       # skeleton offsets + skeleton corrective
    weights: object       # ad.Var or ndarray, rows on the simplex
    pose_corrective: ad.Var | None = None


def refine_skinning(weights, delta):
    """Clamp-and-renormalise skinning weights.

    w*_vj = max(w_vj + d_vj, 0) / sum_j max(w_vj + d_vj, 0), with d forced to
    zero wherever the base weight is zero.  Works on arrays or tape values.
    """
    w = np.asarray(weights, dtype=np.float64)
    support = (w != 0).astype(np.float64)
    if isinstance(delta, ad.Var):
        clamped = ad.maximum(delta * support + w, 0.0)
        sums = clamped.value.sum(axis=1)
        _check_rows(sums)
        return clamped / ad.reshape(ad.sum(clamped, axis=1), (-1, 1))
    clamped = np.maximum(w + np.asarray(delta) * support, 0.0)
    sums = clamped.sum(axis=1)
    _check_rows(sums)
    return clamped / sums[:, None]


def _check_rows(sums):
    bad = np.flatnonzero(sums <= 0)
    if bad.size:
        raise DegenerateWeightsError(f"vertex {bad[0]} has no positive skinning weight left")


def apply_correctives(model: HandModel, nets: CorrectiveNets, beta, angles: ad.Var,
                      tape: ad.Tape | None = None, shared=None) -> RefinedModel:
    """Refined vertices, offsets and weights for one pose.

    ``angles`` are the active pose angles (N_P,).  ``shared`` may carry the
    identity-only outputs already computed on this tape for a batch.
    """
    tape = angles.tape if tape is None else tape
    if shared is None:
        shared = identity_outputs(model, nets, beta, tape)
    verts = shared["vertices"]
    pose_corr = None
    if nets.active("posevert"):
        if angles.shape != (nets["posevert"].w1.shape[0],):
            raise ad.ShapeError(f"posevert head expects {nets['posevert'].w1.shape[0]} "
                                f"pose inputs, got {angles.shape}")
        pose_corr = nets["posevert"](ad.stop_gradient(angles))
        verts = verts + pose_corr
    return RefinedModel(verts, shared["offsets"], shared["weights"], pose_corr)


def identity_outputs(model: HandModel, nets: CorrectiveNets, beta, tape: ad.Tape) -> dict:
    """The identity-dependent part of the refinement (constant across poses)."""
    b = tape.const(beta)
    verts = tape.const(model.template_vertices)
    offsets = tape.const(model.skeleton_offsets)
    weights = model.skinning_weights
    if nets.active("skel"):
        offsets = offsets + nets["skel"](b)
    if nets.active("idvert"):
        verts = verts + nets["idvert"](b)
    if nets.active("skinw"):
        weights = refine_skinning(weights, nets["skinw"](b))
    return {"vertices": verts, "offsets": offsets, "weights": weights}
