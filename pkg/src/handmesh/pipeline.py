"""The decoder forward pass: correctives -> FK -> LBS -> alignment, and the
per-frame loss built on top of it."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import collision, losses
from .correctives import CorrectiveNets, apply_correctives, identity_outputs
from .kinematics import EULER_ORDER, JointTransforms, RigidAlignment, forward_kinematics, rigid_align
from .model import HandModel
from .render import Camera, render_depth
from .skinning import laplacian, laplacian_matrix, lbs_deform


@dataclass
class LossConfig:
    pose: bool = True
    depth: bool = True
    penet: bool = True
    lap: bool = True
    lambda_nr: float = collision.LAMBDA_NR
    lambda_lap: float = losses.LAMBDA_LAP
    lap_reduction: str = "l2"


@dataclass
class FrameOutput:
    angles: ad.Var
    transforms: JointTransforms
    joints: ad.Var            # posed joints in dataset space
    mesh: ad.Var              # deformed vertices in dataset space
    align: RigidAlignment
    refined: object
    extras: dict = field(default_factory=dict)


class Decoder:
    """Hand model plus corrective nets evaluated for given raw poses."""

    def __init__(self, model: HandModel, nets: CorrectiveNets, beta, order: str = EULER_ORDER):
        self.model = model
        self.nets = nets
        self.beta = np.asarray(beta, dtype=np.float64)
        self.order = order
        h = model.hierarchy
        self.align_joints = np.array([h.root] + h.children(h.root))
        self.lap = laplacian_matrix(model.faces, model.n_vertices)
        self.palm_idx = model.palm_vertices()
        self._pairs = None

    def shared(self, tape: ad.Tape) -> dict:
        out = identity_outputs(self.model, self.nets, self.beta, tape)
        out["chains"] = None
        return out

    def alignment(self, rest_joints, target_joints) -> RigidAlignment:
        """Model-to-dataset rigid fit on the wrist and finger roots at zero pose."""
        if target_joints is None:
            return RigidAlignment.identity()
        idx = self.align_joints
        return rigid_align(np.asarray(rest_joints)[idx], np.asarray(target_joints)[idx])

    def forward(self, tape: ad.Tape, u, target_joints=None, shared=None,
                align: RigidAlignment | None = None, corrective_pose=None) -> FrameOutput:
        """``corrective_pose`` overrides the angles fed to the pose corrective
        (they carry no gradient either way)."""
        u = ad._lift(tape, u)
        if shared is None:
            shared = self.shared(tape)
        theta = np.pi * ad.tanh(u)
        mask = self.model.dof_mask
        angles = ad.reshape(ad.scatter_add(theta, np.flatnonzero(mask), mask.size), (-1, 3))
        pc = theta if corrective_pose is None else ad._lift(tape, corrective_pose)
        refined = apply_correctives(self.model, self.nets, self.beta, pc, tape, shared)
        tf = forward_kinematics(angles, refined.offsets, self.model.hierarchy, self.order)
        if align is None:
            align = self.alignment(tf.rest_positions.value, target_joints)
        mesh = lbs_deform(refined.vertices, refined.weights, tf, align)
        joints = align.apply(tf.positions)
        return FrameOutput(angles, tf, joints, mesh, align, refined, {"shared": shared})

    def rest_chains(self, shared, tape):
        """Sphere chains of the zero-pose refined model (radii frozen per pass)."""
        if shared.get("chains") is None:
            rest_joints = ad.matmul(self.model.hierarchy.ancestor_matrix(), shared["offsets"])
            # LBS at zero pose is the identity, so the rest mesh is M̄ + ΔM_β.
            shared["chains"] = collision.build_sphere_chains(
                rest_joints, shared["vertices"].value, self.model.hierarchy)
        return shared["chains"]

    def penetration(self, out: FrameOutput, tape) -> tuple[ad.Var, ad.Var]:
        chains = self.rest_chains(out.extras["shared"], tape)
        if self._pairs is None:
            self._pairs = collision.candidate_pairs(chains)
        posed = collision.pose_sphere_chains(chains, out.transforms, out.align)
        rigid = collision.rigid_penetration(posed, self._pairs)
        palm = ad.gather(out.mesh, self.palm_idx)
        nonrigid = collision.nonrigid_penetration(posed, self.model.hierarchy, palm)
        return rigid, nonrigid

    def frame_loss(self, tape, out: FrameOutput, cfg: LossConfig, target_joints=None,
                   cameras=None, target_depths=None, n_views=None):
        zero = tape.const(0.0)
        pose = losses.pose_loss(out.joints, target_joints) if cfg.pose else zero
        depth = zero
        if cfg.depth and cameras:
            rendered = [render_depth(out.mesh, self.model.faces, cam, tape) for cam in cameras]
            depth = losses.depth_loss(rendered, target_depths, n_views)
        if cfg.penet:
            rigid, nonrigid = self.penetration(out, tape)
        else:
            rigid, nonrigid = zero, zero
        lap = losses.laplacian_loss(laplacian(out.mesh, self.lap), cfg.lap_reduction) if cfg.lap else zero
        return losses.total_loss(pose, depth, rigid, nonrigid, lap, cfg.lambda_nr, cfg.lambda_lap)

    def deform(self, u=None, target_joints=None) -> tuple[np.ndarray, np.ndarray]:
        """(mesh, joints) as arrays for a raw pose (zero pose by default)."""
        tape = ad.Tape()
        if u is None:
            u = np.zeros(self.model.n_pose)
        out = self.forward(tape, tape.const(u), target_joints)
        return out.mesh.value, out.joints.value


def render_views(mesh, faces, cameras: list[Camera]) -> list[np.ndarray]:
    tape = ad.Tape()
    m = tape.const(mesh)
    return [render_depth(m, faces, cam, tape).depth_map() for cam in cameras]
