"""
Sphere chains and the penetration terms
=======================================

Every bone carries ten spheres whose radii come from the rest mesh.  Squeeze
the fingers together and curl one into the palm to switch on the rigid and
non-rigid penetration penalties.
"""
import numpy as np

from handmesh import autodiff as ad
from handmesh import synth
from handmesh.correctives import CorrectiveNets
from handmesh.pipeline import Decoder

hand = synth.build_template(2000).model
dec = Decoder(hand, CorrectiveNets.for_model(hand), np.zeros(32))


def penetration(theta):
    tape = ad.Tape()
    out = dec.forward(tape, tape.const(np.arctanh(theta / np.pi)))
    rigid, nonrigid = dec.penetration(out, tape)
    return float(rigid.value), float(nonrigid.value)


theta = np.zeros(hand.n_pose)
print("rest pose        rigid %.3f  nonrigid %.3f" % penetration(theta))

# abduct the index toward the middle finger and the middle toward the index
theta[10], theta[15] = 0.3, -0.3
print("fingers squeezed rigid %.3f  nonrigid %.3f" % penetration(theta))

# curl the middle finger deep into the palm
theta[:] = 0.0
theta[13:18] = [1.55, 0.0, 0.0, 2.2, 1.1]
print("finger in palm   rigid %.3f  nonrigid %.3f" % penetration(theta))

# the rest spheres, e.g. for inspection in an external viewer
tape = ad.Tape()
chains = dec.rest_chains(dec.shared(tape), tape)
print("radii along the index proximal bone:", np.round(chains.radii[chains.chain_index(5)], 1))
