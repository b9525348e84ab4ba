"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
"""
import time

import numpy as np
import pytest

from handmesh import autodiff as ad
from handmesh import fit, gradcheck, synth
from handmesh.collision import pose_sphere_chains
from handmesh.correctives import CorrectiveNets
from handmesh.kinematics import RigidAlignment, forward_kinematics
from handmesh.losses import total_loss
from handmesh.pipeline import Decoder, LossConfig, render_views
from handmesh.render import Camera, render_depth_map
from handmesh.skinning import lbs_deform

from conftest import record
from test_collision import brute_nonrigid, brute_rigid
from test_fit import triangle_distance
from test_kinematics import matrix_stack_fk
from test_render import moller_trumbore


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    rows = gradcheck.run(n_configs=20, seed=0)
    elapsed = time.perf_counter() - t0
    worst = ", ".join(f"{r.term} {r.max_rel_err:.1e}" for r in rows)
    ok = all(r.passed for r in rows) and all(r.n_configs >= 20 for r in rows) and elapsed < 120
    record(1, ok, f"{worst}; {elapsed:.0f} s (limit 120 s)")
    assert ok, gradcheck.format_table(rows)


def test_criterion_2_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    hand = synth.build_template(2000).model
    errs = {}

    ang = rng.uniform(-1.5, 1.5, (21, 3))
    t = ad.Tape()
    tf = forward_kinematics(t.const(ang), t.const(hand.skeleton_offsets), hand.hierarchy)
    pos, _ = matrix_stack_fk(ang, hand.skeleton_offsets, hand.hierarchy.parent)
    errs["fk"] = (np.max(np.abs(tf.positions.value - pos)), 1e-10)

    m = lbs_deform(hand.template_vertices, hand.skinning_weights, tf).value
    T = tf.matrices()
    h = np.concatenate([hand.template_vertices, np.ones((hand.n_vertices, 1))], axis=1)
    ref = np.array([sum(hand.skinning_weights[v, j] * (T[j] @ h[v]) for j in range(21))[:3]
                    for v in range(hand.n_vertices)])
    errs["lbs"] = (np.max(np.abs(m - ref)), 1e-12)

    cam = Camera.look_at([150, 60, 450], [0, 80, 0], [0, 1, 0], 300.0, width=96, height=96)
    d = render_depth_map(m, hand.faces, cam)
    vc = cam.to_camera(m)
    worst = 0.0
    ys, xs = np.nonzero(np.isfinite(d))
    for y, x in zip(ys[::7], xs[::7]):
        ray = cam.rays(np.array([x]), np.array([y]))[0]
        hits = [moller_trumbore(np.zeros(3), ray, *vc[f]) for f in hand.faces]
        hits = [z for z in hits if z is not None and z > 0]
        worst = max(worst, abs(d[y, x] - min(hits) * ray[2]))
    errs["render"] = (worst, 1e-9)

    theta = np.zeros(28)
    for k in range(4):
        b = 8 + 5 * k
        theta[b:b + 5] = [1.55, 0, (-1) ** k * 0.1, 2.2, 1.1]
    dec = Decoder(hand, CorrectiveNets.for_model(hand), np.zeros(32))
    t = ad.Tape()
    out = dec.forward(t, t.const(np.arctanh(theta / np.pi)))
    rigid, nonrigid = dec.penetration(out, t)
    posed = pose_sphere_chains(dec.rest_chains(out.extras["shared"], t), out.transforms, out.align)
    palm = out.mesh.value[hand.palm_vertices()]
    errs["penet_rigid"] = (abs(rigid.value - brute_rigid(posed)), 1e-10)
    errs["penet_nonrigid"] = (abs(nonrigid.value - brute_nonrigid(posed, hand.hierarchy, palm)), 1e-10)
    assert rigid.value > 0 and nonrigid.value > 0

    verts = rng.normal(size=(10, 3)) * 10
    faces = np.array([rng.choice(10, 3, replace=False) for _ in range(12)])
    pts = rng.normal(size=(40, 3)) * 12
    ref = np.mean([min(triangle_distance(p, *verts[f]) for f in faces) for p in pts])
    errs["m_err"] = (abs(fit.m_err(pts, verts, faces) - ref), 1e-10)

    elapsed = time.perf_counter() - t0
    ok = all(e < tol for e, tol in errs.values()) and elapsed < 300
    record(2, ok, ", ".join(f"{k} {e:.1e}" for k, (e, _) in errs.items()) + f"; {elapsed:.0f} s")
    assert ok, errs


RECOVERY = dict(seed=0, vertex_budget=2000, n_train_poses=60, n_test_poses=15, n_cameras=8)


@pytest.mark.slow
def test_criterion_3_synthetic_recovery():
    t0 = time.perf_counter()
    cfg = synth.SynthConfig(**RECOVERY)
    subject = synth.generate_subject(cfg)
    ds = synth.generate_dataset(subject, cfg)
    state = fit.fit(ds, subject.model, subject.beta, fit.FitConfig.desk())
    report = fit.evaluate(state, ds.split("test"), ds.cameras)
    elapsed = time.perf_counter() - t0
    p, m = report["p_err"]["mean"], report["m_err"]["mean"]
    ok = p < 3.0 and m < 2.0 and elapsed < 1800
    record(3, ok, f"test P_err {p:.2f} mm (<3), M_err {m:.2f} mm (<2); {elapsed / 60:.1f} min (<30)")
    assert ok


@pytest.mark.slow
def test_criterion_4_skeleton_corrective_ablation():
    cfg = synth.SynthConfig(seed=4, vertex_budget=800, n_train_poses=12, n_test_poses=4,
                            n_cameras=4, image_size=128, focal=350.0, bone_length_perturbation=0.15)
    subject = synth.generate_subject(cfg)
    ds = synth.generate_dataset(subject, cfg)
    errs = {}
    for skel in (False, True):
        fc = fit.FitConfig.desk(epochs=60, batch_size=12, views_per_frame=4,
                                heads={"skel": skel, "idvert": True, "posevert": True})
        state = fit.fit(ds, subject.model, subject.beta, fc)
        errs[skel] = fit.evaluate(state, ds.split("test"), ds.cameras)["p_err"]["mean"]
    gain = 1.0 - errs[True] / errs[False]
    ok = gain >= 0.3
    record(4, ok, f"test P_err without {errs[False]:.2f} mm, with {errs[True]:.2f} mm, "
                  f"{100 * gain:.0f}% lower (>=30%)")
    assert ok


def _fist(curl, squeeze):
    theta = np.zeros(28)
    theta[3:8] = [0.3 * curl, 0, 0, 0.4 * curl, 0.5 * curl]
    spread = [squeeze, 0.0, -squeeze, -2 * squeeze]
    for k in range(4):
        b = 8 + 5 * k
        theta[b:b + 5] = [1.5 * curl, 0, spread[k], 2.2 * curl, 1.1 * curl]
    return theta


@pytest.mark.slow
def test_criterion_5_penetration_ablation():
    cfg = synth.SynthConfig(seed=0, vertex_budget=800)
    subject = synth.generate_subject(cfg)
    ident = RigidAlignment.identity()

    def penetration(theta):
        _, joints, r, n = synth.ground_truth_frame(subject, np.arctanh(theta / np.pi), ident)
        return r + n, joints

    # squeeze the curled fingers together up to the point of contact
    lo, hi = 0.0, 0.05
    assert penetration(_fist(0.8, lo))[0] == 0 and penetration(_fist(0.8, hi))[0] > 0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if penetration(_fist(0.8, mid))[0] == 0 else (lo, mid)
    _, gt = penetration(_fist(0.8, lo))
    noisy = gt + np.random.default_rng(0).normal(0.0, 2.0, gt.shape)
    frame = synth.CaptureFrame(0, noisy, [], "test")

    results = {}
    for penet in (False, True):
        fc = fit.FitConfig.desk(warmup_iters=600, use_depth=False, use_lap=False, use_penet=penet)
        state = fit.FitState(subject.model, subject.nets, subject.beta, {}, fc)
        poses = fit.fit_poses(state, [frame], [], iters=600, lr=2e-2, loss_cfg=fc.loss_config())
        dec = state.decoder()
        t = ad.Tape()
        out = dec.forward(t, t.const(poses[0].value), noisy)
        r, n = dec.penetration(out, t)
        results[penet] = (fit.p_err(out.joints.value, gt), float(r.value), float(n.value))
    (p0, r0, _), (p1, r1, n1) = results[False], results[True]
    ok = r0 > 0 and r1 < 1e-3 and n1 < 1e-3 and p1 < 1.2 * p0
    record(5, ok, f"without: rigid {r0:.3g}, P_err {p0:.2f} mm; with: rigid {r1:.1e}, "
                  f"nonrigid {n1:.1e}, P_err {p1:.2f} mm ({100 * (p1 / p0 - 1):+.0f}%, limit +20%)")
    assert ok


def test_criterion_6_identity_fixed_points():
    hand = synth.build_template(2000).model
    dec = Decoder(hand, CorrectiveNets.for_model(hand), np.zeros(32))
    mesh, _ = dec.deform(np.zeros(28))
    rel = np.max(np.abs(mesh - hand.template_vertices)) / np.max(np.abs(hand.template_vertices))
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        parts = rng.uniform(0, 10, 5)
        lam_nr, lam_lap = rng.uniform(0, 10, 2)
        total, bd = total_loss(*parts, lambda_nr=lam_nr, lambda_lap=lam_lap)
        manual = parts[0] + parts[1] + (parts[2] + lam_nr * parts[3]) + lam_lap * parts[4]
        worst = max(worst, abs(total - manual), abs(bd.total - manual))
    ok = rel <= 1e-12 and worst <= 1e-12
    record(6, ok, f"template reproduction rel. err {rel:.1e}, loss identity err {worst:.1e} (<=1e-12)")
    assert ok


def test_criterion_7_stop_gradient(small_synth):
    _, subject, ds = small_synth
    frame = ds.split("train")[0]
    nets = CorrectiveNets.for_model(subject.model, seed=11, sigma=0.05)
    dec = Decoder(subject.model, nets, subject.beta)
    u0 = np.random.default_rng(7).normal(0, 0.3, 28)

    def grad(frozen):
        u = ad.Param(u0)
        t = ad.Tape()
        kw = {"corrective_pose": np.pi * np.tanh(u0)} if frozen else {}
        out = dec.forward(t, t.watch(u), frame.joints, **kw)
        total, _ = dec.frame_loss(t, out, LossConfig(), frame.joints, ds.cameras, frame.depths)
        t.backward(total)
        return u.grad

    live, frozen = grad(False), grad(True)
    diff = np.max(np.abs(live - frozen))
    ok = diff < 1e-12 and np.any(live != 0)
    record(7, ok, f"max |dL/du live - dL/du frozen| = {diff:.1e} (<1e-12)")
    assert ok


def test_criterion_8_determinism(tmp_path):
    cfg = synth.SynthConfig(seed=8, vertex_budget=800, n_train_poses=4, n_test_poses=2,
                            n_cameras=4, image_size=96, focal=260.0)
    blobs = []
    for run in ("a", "b"):
        subject = synth.generate_subject(cfg)
        ds = synth.generate_dataset(subject, cfg)
        synth.save_dataset(ds, subject, tmp_path / run / "data")
        ds, subject = synth.load_dataset(tmp_path / run / "data")
        state = fit.fit(ds, subject.model, subject.beta, fit.FitConfig.desk(epochs=3, warmup_iters=10),
                        checkpoint=tmp_path / run / "ck.bin")
        root = tmp_path / run
        blobs.append({p.relative_to(root).as_posix(): p.read_bytes()
                      for p in sorted(root.rglob("*")) if p.is_file()})
    same = blobs[0] == blobs[1]
    record(8, same, f"{len(blobs[0])} files compared across two seeded synth+fit runs")
    assert same


def test_criterion_9_performance():
    import numba
    prev = numba.get_num_threads()
    numba.set_num_threads(1)
    try:
        cfg = synth.SynthConfig(seed=0)
        hand = synth.build_template(cfg.vertex_budget).model
        dec = Decoder(hand, CorrectiveNets.for_model(hand, seed=0), np.zeros(32))
        cams = synth.camera_rig(cfg)[:6]
        u = np.random.default_rng(9).normal(0, 0.3, 28)

        def once():
            mesh, _ = dec.deform(u)
            return render_views(mesh, hand.faces, cams)

        once()
        times = []
        for _ in range(10):
            t0 = time.perf_counter()
            maps = once()
            times.append(time.perf_counter() - t0)
    finally:
        numba.set_num_threads(prev)
    ms = 1000 * float(np.median(times))
    ok = ms < 100 and maps[0].shape == (256, 256)
    record(9, ok, f"deform + 6 views at 256x256, {hand.n_vertices} vertices: median {ms:.1f} ms (<100)")
    assert ok
