"""
Weakly supervised fitting on a synthetic subject
================================================

Generate a subject with hidden correctives, render joints and depth maps,
then recover per-frame poses and the corrective nets from those signals
alone.  A small dataset keeps this to a couple of minutes.

Twelve frames from four low-resolution views pin down the skeleton well but
the surface only loosely, so the per-vertex identity corrective is compared
against the same nets with that head switched off.
"""
import numpy as np

from handmesh import fit, synth

cfg = synth.SynthConfig(seed=1, vertex_budget=800, n_train_poses=12, n_test_poses=4,
                        n_cameras=4, image_size=128, focal=350.0)
subject = synth.generate_subject(cfg)
data = synth.generate_dataset(subject, cfg)
print(f"{len(data.split('train'))} train / {len(data.split('test'))} test frames, "
      f"{len(data.cameras)} views each")

# the desk preset: pose-only warm-up, then joint training of poses and nets
config = fit.FitConfig.desk(epochs=200, batch_size=12, views_per_frame=4)


def progress(state, bd):
    if state.iteration % 25 == 0:
        print(f"iter {state.iteration:4d}  total {bd.total:7.3f}  pose {bd.pose:6.3f}  "
              f"depth {bd.depth:6.3f}  lap {bd.laplacian:5.3f}")


state = fit.fit(data, subject.model, subject.beta, config, callback=progress)

# unseen poses: re-fit u per test frame with the nets frozen
report = fit.evaluate(state, data.split("test"), data.cameras)
print(f"learned:       P_err {report['p_err']['mean']:.2f} mm, M_err {report['m_err']['mean']:.2f} mm")

# the same nets without the per-vertex identity corrective
state.nets.enabled["idvert"] = False
no_idv = fit.evaluate(state, data.split("test"), data.cameras)
print(f"no idvert:     P_err {no_idv['p_err']['mean']:.2f} mm, M_err {no_idv['m_err']['mean']:.2f} mm")

# the template alone, without learned correctives, for comparison
bare = fit.init_state(subject.model, subject.beta, [], fit.FitConfig.desk(heads={
    "skel": False, "idvert": False, "posevert": False}))
base = fit.evaluate(bare, data.split("test"), data.cameras)
print(f"template only: P_err {base['p_err']['mean']:.2f} mm, M_err {base['m_err']['mean']:.2f} mm")

# On this small set the joints improve about tenfold while the surface ends up
# a little worse than the bare template: with 12 frames and 4 coarse views the
# depth term cannot separate vertex offsets from pose.  The 60-frame, 8-view
# recovery run in tests/test_acceptance.py improves both (P_err 3.9 -> 0.6 mm,
# M_err 1.7 -> 1.4 mm against the template alone).
