"""
Posing and rendering the procedural hand
========================================

Build the template hand, bend a few joints, skin the mesh and render depth
maps from the synthetic camera rig.  Outputs land in ``demo_out/``.
"""
from pathlib import Path

import numpy as np

from handmesh import synth
from handmesh.correctives import CorrectiveNets
from handmesh.fileio import write_obj, write_pfm
from handmesh.pipeline import Decoder, render_views

out = Path("demo_out")
out.mkdir(exist_ok=True)

# the template: palm superellipsoid plus five capsule digits, 21 joints
tpl = synth.build_template(2000)
hand = tpl.model
print(f"{hand.n_vertices} vertices, {len(hand.faces)} faces, {hand.n_pose} pose DOFs")

# zero correctives leave the template untouched
dec = Decoder(hand, CorrectiveNets.for_model(hand), np.zeros(32))

# pose angles are theta = pi * tanh(u); curl the index finger and tilt the wrist
theta = np.zeros(hand.n_pose)
theta[0] = 0.3
theta[8:13] = [0.9, 0.0, 0.0, 1.2, 0.6]
mesh, joints = dec.deform(np.arctanh(theta / np.pi))
print("index fingertip moved to", np.round(joints[8], 1), "mm")
write_obj(out / "posed.obj", mesh, hand.faces)

# depth maps from the first three cameras of the rig, background stored as 0
cams = synth.camera_rig(synth.SynthConfig())[:3]
for c, d in enumerate(render_views(mesh, hand.faces, cams)):
    fg = np.isfinite(d)
    print(f"view {c}: {fg.mean():.1%} foreground, depth {d[fg].min():.0f}-{d[fg].max():.0f} mm")
    write_pfm(out / f"view_{c}.pfm", d.astype(np.float32))
