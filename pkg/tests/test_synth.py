import numpy as np
import pytest

from handmesh import synth
from handmesh.correctives import CorrectiveNets
from handmesh.kinematics import RigidAlignment
from handmesh.model import validate
from handmesh.pipeline import Decoder, render_views


def test_template_is_valid(template):
    assert validate(template.model) == []
    w = template.model.skinning_weights
    assert np.all(w >= 0) and np.max(np.abs(w.sum(axis=1) - 1)) < 1e-12
    assert template.model.n_pose == 28 and template.model.n_joints == 21


def test_default_budget_size():
    tpl = synth.build_template()
    assert 1500 <= tpl.model.n_vertices <= 2500


def test_budget_floor():
    with pytest.raises(synth.GenerationError):
        synth.build_template(400)


def test_subject_is_deterministic(small_synth):
    cfg, subject, _ = small_synth
    again = synth.generate_subject(cfg)
    assert np.array_equal(again.model.template_vertices, subject.model.template_vertices)
    assert np.array_equal(again.beta, subject.beta)
    for a, b in zip(again.nets.all_params(), subject.nets.all_params()):
        assert np.array_equal(a.value, b.value)


def test_dataset_is_deterministic(small_synth):
    cfg, subject, ds = small_synth
    again = synth.generate_dataset(subject, cfg)
    for a, b in zip(ds.frames, again.frames):
        assert np.array_equal(a.joints, b.joints)
        assert all(np.array_equal(x, y) for x, y in zip(a.depths, b.depths))


def test_subject_zero_pose_does_not_penetrate(small_synth):
    _, subject, _ = small_synth
    _, _, rigid, nonrigid = synth.ground_truth_frame(subject, np.zeros(28), RigidAlignment.identity())
    assert rigid == 0.0 and nonrigid == 0.0


def test_zero_pose_joints_are_cumulative_offsets(small_synth):
    _, subject, _ = small_synth
    _, joints, _, _ = synth.ground_truth_frame(subject, np.zeros(28), RigidAlignment.identity())
    offsets = subject.model.skeleton_offsets + subject.nets["skel"].evaluate(subject.beta)
    expect = subject.model.hierarchy.ancestor_matrix() @ offsets
    assert np.max(np.abs(joints - expect)) < 1e-12


def test_ground_truth_pose_corrective_vanishes_at_rest(small_synth):
    _, subject, _ = small_synth
    assert np.max(np.abs(subject.nets["posevert"].evaluate(np.zeros(28)))) < 1e-12


def test_depths_match_rendered_ground_truth(small_synth):
    _, subject, ds = small_synth
    for fr in ds.frames:
        again = render_views(fr.gt_mesh, subject.model.faces, ds.cameras)
        assert all(np.array_equal(a.astype(np.float32), b) for a, b in zip(again, fr.depths))
        _, joints, _, _ = synth.ground_truth_frame(subject, fr.gt_raw, _world_of(subject, fr))
        assert np.max(np.abs(joints - fr.joints)) < 1e-9


def _world_of(subject, fr):
    """Recover the frame's placement from its wrist and finger-root joints."""
    from handmesh.kinematics import rigid_align
    _, model_joints, _, _ = synth.ground_truth_frame(subject, fr.gt_raw, RigidAlignment.identity())
    idx = [0, 1, 5, 9, 13, 17]
    return rigid_align(model_joints[idx], fr.joints[idx])


def test_frames_pass_coverage_and_splits(small_synth):
    cfg, _, ds = small_synth
    assert len(ds.split("train")) == cfg.n_train_poses and len(ds.split("test")) == cfg.n_test_poses
    for fr in ds.frames:
        assert synth.coverage_ok(fr.depths)
        assert all(d.dtype == np.float32 and d.shape == (cfg.image_size, cfg.image_size)
                   for d in fr.depths)
    train = {tuple(f.gt_raw) for f in ds.split("train")}
    assert not train & {tuple(f.gt_raw) for f in ds.split("test")}


def test_curled_pose_touches_palm(small_synth):
    _, subject, _ = small_synth
    theta = np.zeros(28)
    theta[13:18] = [1.55, 0.0, 0.0, 2.2, 1.1]      # middle finger curled into the palm
    _, _, _, nonrigid = synth.ground_truth_frame(subject, np.arctanh(theta / np.pi),
                                                 RigidAlignment.identity())
    assert nonrigid > 0


def test_dataset_round_trip(tmp_path, small_synth):
    _, subject, ds = small_synth
    synth.save_dataset(ds, subject, tmp_path / "d")
    back, sub2 = synth.load_dataset(tmp_path / "d")
    assert len(back.frames) == len(ds.frames) and len(back.cameras) == len(ds.cameras)
    for a, b in zip(ds.frames, back.frames):
        assert np.array_equal(a.joints, b.joints) and a.split == b.split
        assert all(np.array_equal(x, y) for x, y in zip(a.depths, b.depths))
        assert np.array_equal(a.gt_mesh, b.gt_mesh)
    assert sub2.model.equals(subject.model, rtol=0)
    assert np.array_equal(sub2.beta, subject.beta)


def test_camera_rig_sees_hand(small_synth):
    cfg, subject, ds = small_synth
    assert len(ds.cameras) == cfg.n_cameras
    for cam in ds.cameras:
        p = cam.to_camera(subject.model.zero_pose_joints())
        assert np.all(p[:, 2] > 0)
        assert abs(np.linalg.norm(cam.translation) - cfg.camera_distance) < 1e-6 * cfg.camera_distance


def test_sample_pose_within_range():
    rng = np.random.default_rng(0)
    for _ in range(50):
        th = synth.sample_pose(rng)
        assert th.shape == (28,) and np.all(np.abs(th) < np.pi)


def test_config_from_dict():
    c = synth.SynthConfig.from_dict({"seed": 4, "n_cameras": 3})
    assert c.seed == 4 and c.n_cameras == 3
    with pytest.raises((TypeError, ValueError)):
        synth.SynthConfig.from_dict({"nonsense": 1})
