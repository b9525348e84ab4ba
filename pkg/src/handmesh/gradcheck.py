"""Central finite-difference checks of every loss term.

Each configuration draws a random pose and random corrective weights, then
compares the tape's directional derivative with a central difference along a
random direction in pose space and in net-weight space.  Quantities the
decoder treats as constants within a pass (rigid alignment, sphere radii,
pixel visibility, the detached input of the pose corrective) are frozen at
the base point so both sides differentiate the same function.

The loss terms are only piecewise smooth (smooth-L1 knees, hinges, norms), so
a central difference is taken at a ladder of step sizes and the best
agreement is kept; a step that straddles a kink is a property of the
difference quotient, not of the gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses, synth
from .correctives import CorrectiveNets, identity_code
from .pipeline import Decoder
from .render import rasterize, render_depth
from .skinning import laplacian

TERMS = ("pose", "depth", "penet_rigid", "penet_nonrigid", "laplacian")
TOLERANCE = {"pose": 1e-4, "depth": 1e-4, "laplacian": 1e-4,
             "penet_rigid": 1e-3, "penet_nonrigid": 1e-3}


@dataclass
class CheckRow:
    term: str
    n_configs: int
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


class _Problem:
    """One loss term as a function of (u, net weights) with frozen constants."""

    def __init__(self, term, model, nets, beta, cameras, u0, rng):
        self.term, self.model, self.nets = term, model, nets
        self.dec = Decoder(model, nets, beta)
        self.cameras = cameras
        self.u = ad.Param(u0, "u")
        tape = ad.Tape()
        out = self.dec.forward(tape, tape.watch(self.u))
        self.align = out.align
        self.theta0 = np.pi * np.tanh(u0)
        self.radii = self.dec.rest_chains(out.extras["shared"], tape).radii
        self.target_joints = out.joints.value + rng.normal(0.0, 3.0, out.joints.shape)
        self.face_maps, self.target_depths = [], []
        for cam in cameras:
            _, fmap = rasterize(cam.to_camera(out.mesh.value), model.faces, cam)
            self.face_maps.append(fmap)
            r = render_depth(out.mesh, model.faces, cam, tape, fmap)
            self.target_depths.append(r.depth_map() + rng.normal(0.0, 1.5, fmap.shape))

    def params(self):
        return [self.u] + self.nets.params()

    def __call__(self, tape: ad.Tape) -> ad.Var:
        dec = self.dec
        shared = dec.shared(tape)
        out = dec.forward(tape, tape.watch(self.u), shared=shared, align=self.align,
                          corrective_pose=self.theta0)
        t = self.term
        if t == "pose":
            return losses.pose_loss(out.joints, self.target_joints)
        if t == "depth":
            rendered = [render_depth(out.mesh, self.model.faces, c, tape, f)
                        for c, f in zip(self.cameras, self.face_maps)]
            return losses.depth_loss(rendered, self.target_depths)
        if t == "laplacian":
            return losses.laplacian_loss(laplacian(out.mesh, dec.lap))
        chains = dec.rest_chains(shared, tape)
        chains.radii = self.radii
        rigid, nonrigid = dec.penetration(out, tape)
        return rigid if t == "penet_rigid" else nonrigid

    def value(self) -> float:
        return float(self(ad.Tape()).value)


def _directional(problem: _Problem, params, direction, eps):
    """(tape derivative, central differences at each step in ``eps``)."""
    for p in problem.params():
        p.zero_grad()
    tape = ad.Tape()
    tape.backward(problem(tape))
    analytic = sum(float((p.grad * d).sum()) for p, d in zip(params, direction))
    base = [p.value.copy() for p in params]
    numeric = []
    for h in eps:
        vals = []
        for sign in (1.0, -1.0):
            for p, b, d in zip(params, base, direction):
                p.value = b + sign * h * d
            vals.append(problem.value())
        numeric.append((vals[0] - vals[1]) / (2 * h))
    for p, b in zip(params, base):
        p.value = b
    return analytic, numeric


def _random_direction(rng, params):
    d = [rng.standard_normal(p.shape) for p in params]
    norm = np.sqrt(sum((x ** 2).sum() for x in d))
    return [x / norm for x in d]


def _active(term, problem) -> bool:
    return term in ("pose", "depth", "laplacian") or problem.value() > 0


def check_term(term, n_configs=20, seed=0, vertex_budget=800, eps=(1e-4, 1e-5, 1e-6)):
    """Max relative error of the directional derivative over ``n_configs``."""
    tpl = synth.build_template(vertex_budget)
    model = tpl.model
    cameras = synth.camera_rig(synth.SynthConfig(n_cameras=4))
    worst = 0.0
    for i in range(n_configs):
        rng = np.random.default_rng([seed, TERMS.index(term), i])
        nets = CorrectiveNets.for_model(model, seed=int(rng.integers(2**31)), sigma=0.02)
        beta = identity_code(int(rng.integers(2**31)))
        for _ in range(500):
            theta = synth.sample_pose(rng) + rng.normal(0.0, 0.15, model.n_pose)
            if term == "penet_rigid":
                theta[[10, 15]] += rng.uniform(0.2, 0.5, 2) * [1, -1]   # index and middle together
            elif term == "penet_nonrigid":
                b = 8 + 5 * rng.integers(4)                            # curl one finger into the palm
                theta[b:b + 5] = [rng.uniform(1.4, 1.7), 0, 0, rng.uniform(2.0, 2.3),
                                  rng.uniform(0.7, 1.4)]
            problem = _Problem(term, model, nets, beta, cameras,
                               np.arctanh(np.clip(theta / np.pi, -0.95, 0.95)), rng)
            if _active(term, problem):
                break
        else:
            raise RuntimeError(f"no configuration activates {term}")
        for group in ([problem.u], nets.params()):
            a, numeric = _directional(problem, group, _random_direction(rng, group), eps)
            rel = min(abs(a - n) / max(abs(a), abs(n), 1e-12) for n in numeric)
            worst = max(worst, rel)
    return CheckRow(term, n_configs, worst, TOLERANCE[term])


def run(n_configs=20, seed=0, terms=TERMS) -> list[CheckRow]:
    return [check_term(t, n_configs, seed) for t in terms]


def format_table(rows) -> str:
    lines = [f"{'term':<16}{'configs':>8}{'max rel err':>14}{'tol':>10}  result"]
    for r in rows:
        lines.append(f"{r.term:<16}{r.n_configs:>8}{r.max_rel_err:>14.3e}{r.tolerance:>10.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
