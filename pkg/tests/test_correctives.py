import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from handmesh import autodiff as ad
from handmesh.correctives import (CorrectiveNets, DegenerateWeightsError, apply_correctives,
                                  identity_code, refine_skinning)
from handmesh.pipeline import Decoder, LossConfig


def test_zero_nets_reproduce_base_model(hand):
    nets = CorrectiveNets.for_model(hand, skinw=True)
    t = ad.Tape()
    r = apply_correctives(hand, nets, identity_code(0), t.const(np.full(28, 0.3)))
    assert np.array_equal(r.vertices.value, hand.template_vertices)
    assert np.array_equal(r.offsets.value, hand.skeleton_offsets)
    # renormalising divides by row sums that are 1 only up to rounding
    assert np.max(np.abs(r.weights.value - hand.skinning_weights)) < 1e-15


def test_skel_bias_moves_one_offset(hand):
    nets = CorrectiveNets.for_model(hand)
    nets["skel"].b2.value[5 * 3 + 1] = 1.0
    t = ad.Tape()
    r = apply_correctives(hand, nets, identity_code(0), t.const(np.zeros(28)))
    diff = r.offsets.value - hand.skeleton_offsets
    assert diff[5, 1] == 1.0 and np.count_nonzero(diff) == 1


def test_output_shapes(hand):
    nets = CorrectiveNets.for_model(hand, seed=0, skinw=True)
    beta = identity_code(1)
    assert nets["skel"].evaluate(beta).shape == (21, 3)
    assert nets["idvert"].evaluate(beta).shape == (hand.n_vertices, 3)
    assert nets["posevert"].evaluate(np.zeros(28)).shape == (hand.n_vertices, 3)
    assert nets["skinw"].evaluate(beta).shape == (hand.n_vertices, 21)


def test_identity_code_frozen():
    b = identity_code(3)
    assert b.shape == (32,) and not b.flags.writeable
    with pytest.raises(ValueError):
        b[0] = 1.0


def test_refine_skinning_examples():
    w = np.array([[0.5, 0.5], [0.2, 0.8]])
    assert np.array_equal(refine_skinning(w, np.zeros_like(w)), w)
    out = refine_skinning(np.array([[0.5, 0.5]]), np.array([[0.5, -0.5]]))
    assert np.array_equal(out, [[1.0, 0.0]])


def test_refine_skinning_degenerate_row():
    with pytest.raises(DegenerateWeightsError, match="vertex 1"):
        refine_skinning(np.array([[1.0, 0], [0.5, 0.5]]), np.array([[0, 0], [-1.0, -1.0]]))


def test_refine_skinning_locality():
    out = refine_skinning(np.array([[1.0, 0.0]]), np.array([[0.0, 5.0]]))
    assert np.array_equal(out, [[1.0, 0.0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_refine_skinning_formula_oracle(seed):
    rng = np.random.default_rng(seed)
    w = rng.uniform(0, 1, 6) * (rng.uniform(size=6) < 0.7)
    w[0] = max(w[0], 0.1)
    w /= w.sum()
    d = rng.normal(0, 0.3, 6)
    d[0] = 0.0
    expect = np.zeros(6)
    total = 0.0
    for j in range(6):
        if w[j] != 0:
            total += max(w[j] + d[j], 0.0)
    for j in range(6):
        if w[j] != 0:
            expect[j] = max(w[j] + d[j], 0.0) / total
    got = refine_skinning(w[None], d[None])[0]
    assert np.max(np.abs(got - expect)) < 1e-12
    assert np.all(got >= 0) and abs(got.sum() - 1) < 1e-12


def test_posevert_path_carries_no_pose_gradient(small_synth):
    """d(total loss)/du is unchanged when the pose corrective output is frozen."""
    cfg, subject, ds = small_synth
    frame = ds.split("train")[0]
    nets = CorrectiveNets.for_model(subject.model, seed=5, sigma=0.05)
    dec = Decoder(subject.model, nets, subject.beta)
    u0 = np.random.default_rng(6).normal(0, 0.2, 28)
    lcfg = LossConfig()

    def grad(frozen):
        u = ad.Param(u0)
        t = ad.Tape()
        kw = {"corrective_pose": np.pi * np.tanh(u0)} if frozen else {}
        out = dec.forward(t, t.watch(u), frame.joints, **kw)
        total, _ = dec.frame_loss(t, out, lcfg, frame.joints, ds.cameras, frame.depths,
                                  len(ds.cameras))
        t.backward(total)
        return u.grad

    assert np.max(np.abs(grad(False) - grad(True))) <= 1e-12


def test_disabled_head_gets_no_gradient(hand):
    nets = CorrectiveNets.for_model(hand, seed=1, enabled={"idvert": False})
    assert all(not p.name.startswith("idvert") for p in nets.params())
    t = ad.Tape()
    r = apply_correctives(hand, nets, identity_code(0), t.const(np.zeros(28)))
    with_pose = nets["posevert"].evaluate(np.zeros(28))
    assert np.allclose(r.vertices.value, hand.template_vertices + with_pose)


def test_nets_round_trip(tmp_path, hand):
    nets = CorrectiveNets.for_model(hand, seed=2, skinw=True, enabled={"skinw": False})
    nets.save(tmp_path / "n.bin")
    back = CorrectiveNets.load(tmp_path / "n.bin")
    assert back.enabled == nets.enabled
    for a, b in zip(nets.all_params(), back.all_params()):
        assert a.name == b.name and np.array_equal(a.value, b.value)
