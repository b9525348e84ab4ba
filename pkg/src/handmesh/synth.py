"""Procedural hand subjects and rendered training data.

The template is a rounded-box palm plus five capsule fingers, skinned by a
soft-min over distances to the bones of the part each vertex belongs to.  A
subject is the template plus hidden corrective nets of the same architecture
as the fitted ones; their weights are set so the outputs are smooth, small
geometric changes (bone lengths, finger thickness, pose-dependent bulges).
A dataset renders that subject in random poses from a ring of cameras.

Model space: wrist at the origin, fingers along +y, palm side +z, thumb
towards +x, millimetres.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import collision
from .correctives import CorrectiveNets, identity_code
from .fileio import read_obj, read_pfm, write_obj, write_pfm
from .kinematics import DEFAULT_DOF_MASK, RigidAlignment, euler_to_rotation
from .model import HandModel, JointHierarchy, check, load_model, save_model
from .pipeline import Decoder, render_views
from .render import Camera, load_cameras, save_cameras

JOINT_NAMES = ("wrist",
               "thumb_cmc", "thumb_mcp", "thumb_ip", "thumb_tip",
               "index_mcp", "index_pip", "index_dip", "index_tip",
               "middle_mcp", "middle_pip", "middle_dip", "middle_tip",
               "ring_mcp", "ring_pip", "ring_dip", "ring_tip",
               "pinky_mcp", "pinky_pip", "pinky_dip", "pinky_tip")
PARENTS = np.array([-1, 0, 1, 2, 3, 0, 5, 6, 7, 0, 9, 10, 11, 0, 13, 14, 15, 0, 17, 18, 19])
FINGERTIPS = (4, 8, 12, 16, 20)

# (root position, direction, phalanx lengths, capsule radius) per digit
_THUMB_DIR = np.array([0.45, 0.85, 0.28]) / np.linalg.norm([0.45, 0.85, 0.28])
_DIGITS = [
    (np.array([32.0, 18.0, 4.0]), _THUMB_DIR, (42.0, 32.0, 26.0), 9.5),
    (np.array([24.0, 86.0, 0.0]), np.array([0.0, 1.0, 0.0]), (40.0, 24.0, 18.0), 8.5),
    (np.array([4.0, 90.0, 0.0]), np.array([0.0, 1.0, 0.0]), (44.0, 28.0, 19.0), 8.7),
    (np.array([-15.0, 86.0, 0.0]), np.array([0.0, 1.0, 0.0]), (41.0, 27.0, 19.0), 8.2),
    (np.array([-37.0, 78.0, 0.0]), np.array([0.0, 1.0, 0.0]), (33.0, 20.0, 17.0), 7.2),
]
_PALM_CENTER = np.array([-4.0, 42.0, 0.0])
_PALM_HALF = np.array([42.0, 50.0, 12.0])
_HAND_CENTER = np.array([0.0, 80.0, 0.0])
SKIN_TAU = 2.0
MIN_VERTEX_BUDGET = 800


class GenerationError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    seed: int = 0
    vertex_budget: int = 2000
    n_cameras: int = 8
    camera_distance: float = 1000.0
    focal: float = 700.0
    image_size: int = 256
    n_train_poses: int = 60
    n_test_poses: int = 15
    bone_length_perturbation: float = 0.05
    thickness_perturbation: float = 1.0     # mm
    pose_corrective_scale: float = 1.0      # mm, typical bulge amplitude
    global_rotation: float = 0.3            # rad, per-axis range of the dataset rigid motion
    global_translation: float = 15.0        # mm
    max_retries: int = 200

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown SynthConfig keys: {sorted(unknown)}")
        return cls(**d)


# --- template geometry ------------------------------------------------------

def _latlong_faces(n_rings, n_lon, offset):
    """Faces for a closed lat-long grid: south pole, rings, north pole."""
    faces = []
    south, north = offset, offset + 1 + n_rings * n_lon
    ring = lambda r, k: offset + 1 + r * n_lon + (k % n_lon)  # noqa: E731
    for k in range(n_lon):
        faces.append((south, ring(0, k + 1), ring(0, k)))
        faces.append((north, ring(n_rings - 1, k), ring(n_rings - 1, k + 1)))
    for r in range(n_rings - 1):
        for k in range(n_lon):
            a, b = ring(r, k), ring(r, k + 1)
            c, d = ring(r + 1, k), ring(r + 1, k + 1)
            faces.append((a, b, d))
            faces.append((a, d, c))
    return faces


def _frame(axis):
    axis = axis / np.linalg.norm(axis)
    hint = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(hint, axis)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u), axis


def _palm(n_rings, n_lon, exponent=0.45):
    """Superellipsoid palm with its pole axis along y; returns (verts, normals)."""
    c, a = _PALM_CENTER, _PALM_HALF
    sp = lambda x, e: np.sign(x) * np.abs(x) ** e  # noqa: E731
    lats = np.linspace(-np.pi / 2, np.pi / 2, n_rings + 2)[1:-1]
    lons = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    pts = [c - [0, a[1], 0]]
    for la in lats:
        for lo in lons:
            x = a[0] * sp(np.cos(la), exponent) * sp(np.cos(lo), exponent)
            z = a[2] * sp(np.cos(la), exponent) * sp(np.sin(lo), exponent)
            y = a[1] * sp(np.sin(la), exponent)
            pts.append(c + [x, y, z])
    pts.append(c + [0, a[1], 0])
    pts = np.array(pts)
    # implicit-surface gradient of sum |x/a|^(2/e) for the normals
    q = (pts - c) / a
    g = np.sign(q) * np.abs(q) ** (2.0 / exponent - 1.0) / a
    g[0], g[-1] = [0, -1, 0], [0, 1, 0]
    return pts, g / np.linalg.norm(g, axis=1, keepdims=True)


def _capsule(p0, p1, r, n_lon, n_cap, spacing):
    """Capsule from p0 to p1; returns (verts, normals, n_rings)."""
    u, w, axis = _frame(p1 - p0)
    length = np.linalg.norm(p1 - p0)
    n_cyl = max(int(np.ceil(length / spacing)) - 1, 0)
    rings = []  # (centre, axial offset from centre, radial scale)
    for i in range(n_cap):
        al = -np.pi / 2 + (i + 1) * (np.pi / 2) / (n_cap + 1)
        rings.append((p0, r * np.sin(al), r * np.cos(al)))
    rings.append((p0, 0.0, r))
    for i in range(n_cyl):
        rings.append((p0 + (p1 - p0) * (i + 1) / (n_cyl + 1), 0.0, r))
    rings.append((p1, 0.0, r))
    for i in range(n_cap):
        al = (i + 1) * (np.pi / 2) / (n_cap + 1)
        rings.append((p1, r * np.sin(al), r * np.cos(al)))
    lons = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    pts, nrm = [p0 - r * axis], [-axis]
    for ctr, ax_off, rad in rings:
        for lo in lons:
            d = np.cos(lo) * u + np.sin(lo) * w
            pts.append(ctr + ax_off * axis + rad * d)
            n = rad * d + ax_off * axis
            nrm.append(n / np.linalg.norm(n))
    pts.append(p1 + r * axis)
    nrm.append(axis)
    return np.array(pts), np.array(nrm), len(rings)


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1), t


def skeleton_joints() -> np.ndarray:
    joints = [np.zeros(3)]
    for root, direction, lengths, _ in _DIGITS:
        p = root.copy()
        joints.append(p.copy())
        for ln in lengths:
            p = p + ln * direction
            joints.append(p.copy())
    return np.array(joints)


@dataclass
class Template:
    model: HandModel
    normals: np.ndarray
    part: np.ndarray          # -1 palm, 0..4 digit
    bone_weights: np.ndarray  # (V, n_bones) soft-min over bones, before joint mapping


def build_template(vertex_budget: int = 2000) -> Template:
    """The procedural hand template at roughly ``vertex_budget`` vertices."""
    if vertex_budget < MIN_VERTEX_BUDGET:
        # sparser palms give oversized sphere radii and a self-penetrating rest pose
        raise GenerationError(f"vertex budget {vertex_budget} is below the minimum "
                              f"{MIN_VERTEX_BUDGET}")
    scale = np.sqrt(vertex_budget / 2000.0)
    joints = skeleton_joints()
    hier = JointHierarchy(PARENTS.copy(), JOINT_NAMES, FINGERTIPS, 0)
    bones = hier.bones()
    verts, normals, faces, part = [], [], [], []

    n_r, n_l = max(int(16 * scale), 4), max(int(28 * scale), 6)
    pv, pn = _palm(n_r, n_l)
    faces += _latlong_faces(n_r, n_l, 0)
    verts.append(pv), normals.append(pn), part.append(np.full(len(pv), -1))
    offset = len(pv)
    for d, (_, _, _, radius) in enumerate(_DIGITS):
        j0 = 1 + 4 * d
        cv, cn, nr = _capsule(joints[j0], joints[j0 + 3], radius,
                              max(int(12 * scale), 6), 3, 5.0 / scale)
        faces += _latlong_faces(nr, max(int(12 * scale), 6), offset)
        verts.append(cv), normals.append(cn), part.append(np.full(len(cv), d))
        offset += len(cv)
    verts, normals, part = np.concatenate(verts), np.concatenate(normals), np.concatenate(part)
    faces = np.array(faces, dtype=np.int64)
    V, J = len(verts), len(joints)

    bone_w = np.zeros((V, len(bones)))
    for d in range(5):
        sel = np.flatnonzero(part == d)
        chain = [b for b, (p, j) in enumerate(bones) if 1 + 4 * d <= j <= 4 + 4 * d]
        dist = np.stack([_seg_dist(verts[sel], joints[bones[b][0]], joints[bones[b][1]])[0]
                         for b in chain], axis=1)
        w = np.exp(-(dist - dist.min(axis=1, keepdims=True)) / SKIN_TAU)
        w[w < 1e-2] = 0.0
        bone_w[np.ix_(sel, chain)] = w / w.sum(axis=1, keepdims=True)
    palm = np.flatnonzero(part == -1)
    palm_bones = [b for b, (p, _) in enumerate(bones) if p == 0]
    bone_w[palm, palm_bones[2]] = 1.0  # any wrist-driven bone; maps to the wrist joint

    weights = np.zeros((V, J))
    for b, (p, _) in enumerate(bones):
        weights[:, p] += bone_w[:, b]
    offsets = joints - joints[np.maximum(PARENTS, 0)]
    offsets[0] = joints[0]
    model = check(HandModel(verts, faces, offsets, weights, hier, DEFAULT_DOF_MASK.copy()))
    return Template(model, normals, part, bone_w)


# --- ground-truth subject ---------------------------------------------------

@dataclass
class Subject:
    model: HandModel           # template the fit starts from
    nets: CorrectiveNets       # hidden ground-truth correctives
    beta: np.ndarray
    template: Template = field(repr=False, default=None)

    def decoder(self) -> Decoder:
        return Decoder(self.model, self.nets, self.beta)


def _fit_head_output(head, x, target, rng, in_sigma, out_sigma, bias_sigma=0.0):
    """Random first layer, small random second layer, bias set so head(x) == target."""
    n_in, hidden = head.w1.shape
    head.w1.value = rng.normal(0.0, in_sigma, (n_in, hidden))
    head.b1.value = rng.normal(0.0, bias_sigma, hidden) if bias_sigma else np.zeros(hidden)
    head.w2.value = rng.normal(0.0, out_sigma, head.w2.shape)
    h = np.maximum(x @ head.w1.value + head.b1.value, 0.0)
    head.b2.value = np.asarray(target, dtype=np.float64).reshape(-1) - h @ head.w2.value


def generate_subject(config: SynthConfig) -> Subject:
    """Template plus hidden correctives.  Draws whose zero pose self-penetrates
    are rejected."""
    tpl = build_template(config.vertex_budget)
    for attempt in range(config.max_retries):
        sub = _draw_subject(tpl, config, np.random.default_rng([config.seed, 1, attempt]))
        tape = ad.Tape()
        dec = sub.decoder()
        out = dec.forward(tape, tape.const(np.zeros(sub.model.n_pose)))
        if all(float(t.value) == 0.0 for t in dec.penetration(out, tape)):
            return sub
    raise GenerationError("no non-penetrating subject found")


def _draw_subject(tpl: Template, config: SynthConfig, rng) -> Subject:
    model = tpl.model
    beta = identity_code(int(rng.integers(2**31)))
    nets = CorrectiveNets.for_model(model)
    hier = model.hierarchy
    bones = hier.bones()

    # skeleton: scale each bone by 1 + eps
    eps = rng.uniform(-1.0, 1.0, model.n_joints) * config.bone_length_perturbation
    eps[0] = 0.0
    d_offsets = model.skeleton_offsets * eps[:, None]
    _fit_head_output(nets["skel"], beta, d_offsets, rng, 1 / np.sqrt(beta.size), 1e-3)

    # identity vertices: follow the moved bones, plus per-digit thickness change
    rest = model.zero_pose_joints()
    moved = model.zero_pose_joints(model.skeleton_offsets + d_offsets)
    disp = moved - rest
    verts = model.template_vertices
    d_verts = np.zeros_like(verts)
    for b, (p, j) in enumerate(bones):
        sel = np.flatnonzero(tpl.bone_weights[:, b])
        if sel.size == 0:
            continue
        _, t = _seg_dist(verts[sel], rest[p], rest[j])
        follow = (1 - t)[:, None] * disp[p] + t[:, None] * disp[j]
        d_verts[sel] += tpl.bone_weights[sel, b][:, None] * follow
    thick = rng.uniform(-1.0, 1.0, 6) * config.thickness_perturbation
    d_verts += thick[tpl.part + 1][:, None] * tpl.normals
    _fit_head_output(nets["idvert"], beta, d_verts, rng, 1 / np.sqrt(beta.size), 1e-3)

    # pose-dependent bulges: smooth bumps near joints along the normals
    pv = nets["posevert"]
    n_in, hidden = pv.w1.shape
    pv.w1.value = rng.normal(0.0, 1.0, (n_in, hidden))
    pv.b1.value = rng.normal(0.0, 0.5, hidden)
    centers = rest[rng.choice(np.arange(1, model.n_joints), 12, replace=False)]
    bumps = np.exp(-((verts[:, None, :] - centers[None]) ** 2).sum(-1) / (2 * 15.0 ** 2))
    basis = (bumps.T[:, :, None] * tpl.normals[None]).reshape(len(centers), -1)
    coef = rng.normal(0.0, 1.0, (hidden, len(centers)))
    w2 = coef @ basis
    probe = np.maximum(rng.uniform(-1, 1, (64, n_in)) @ pv.w1.value + pv.b1.value, 0.0)
    spread = (probe @ w2 - (probe @ w2).mean(0)).reshape(64, -1, 3)
    typical = np.sqrt((spread ** 2).sum(-1).max(axis=1).mean())
    pv.w2.value = w2 * (config.pose_corrective_scale / typical)
    pv.b2.value = -np.maximum(pv.b1.value, 0.0) @ pv.w2.value
    return Subject(model, nets, beta, tpl)


# --- cameras and poses ------------------------------------------------------

def camera_rig(config: SynthConfig) -> list[Camera]:
    """Cameras at ``camera_distance`` on the upper hemisphere around +y,
    all looking at the origin."""
    cams = []
    n = config.n_cameras
    for i in range(n):
        az = 2 * np.pi * i / n
        el = -0.15 + 1.2 * ((i * 0.618034) % 1.0)
        eye = config.camera_distance * np.array([np.cos(el) * np.sin(az), np.sin(el),
                                                 np.cos(el) * np.cos(az)])
        cams.append(Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), config.focal,
                                   width=config.image_size, height=config.image_size))
    return cams


# per-joint (low, high) angle ranges in radians for x, y, z channels
_WRIST_RANGE = [(-0.4, 0.4), (-0.3, 0.3), (-0.3, 0.3)]
_THUMB_RANGE = [[(-0.2, 0.5), (-0.3, 0.3), (-0.3, 0.3)], [(0.0, 0.6)], [(0.0, 0.8)]]
_FINGER_RANGE = [[(-0.15, 1.2), (-0.08, 0.08), (-0.12, 0.12)], [(0.0, 1.4)], [(0.0, 0.9)]]


def sample_pose(rng, mask=DEFAULT_DOF_MASK) -> np.ndarray:
    """Active angles theta for the default 28-DOF mask, with a shared curl."""
    if np.count_nonzero(mask) != 28:
        raise GenerationError("pose sampler is written for the default 28-DOF mask")
    curl = rng.uniform(0.0, 1.0)
    out = [rng.uniform(lo, hi) for lo, hi in _WRIST_RANGE]
    for digit in range(5):
        ranges = _THUMB_RANGE if digit == 0 else _FINGER_RANGE
        c = np.clip(curl + rng.normal(0.0, 0.15), 0.0, 1.0)
        for j, chans in enumerate(ranges):
            for k, (lo, hi) in enumerate(chans):
                if k == 0:
                    out.append(lo + (hi - lo) * np.clip(c + rng.normal(0, 0.1), 0, 1))
                else:
                    out.append(rng.uniform(lo, hi))
    return np.array(out)


def random_rigid(rng, config: SynthConfig) -> RigidAlignment:
    rot = euler_to_rotation(rng.uniform(-1, 1, 3) * config.global_rotation)
    trans = -rot @ _HAND_CENTER + rng.uniform(-1, 1, 3) * config.global_translation
    return RigidAlignment(rot, trans)


# --- dataset ----------------------------------------------------------------

@dataclass
class CaptureFrame:
    frame_id: int
    joints: np.ndarray             # target joints P*, dataset space
    depths: list                   # per-camera target depth maps (float32, inf background)
    split: str = "train"
    gt_mesh: np.ndarray | None = None   # evaluation only, never a training signal
    gt_raw: np.ndarray | None = None


@dataclass
class Dataset:
    cameras: list
    frames: list
    config: SynthConfig | None = None

    def split(self, name) -> list[CaptureFrame]:
        return [f for f in self.frames if f.split == name]


def ground_truth_frame(subject: Subject, u, world: RigidAlignment):
    """(mesh, joints) of the subject for raw pose ``u`` placed by ``world``."""
    dec = subject.decoder()
    tape = ad.Tape()
    out = dec.forward(tape, tape.const(u), align=world)
    rigid, nonrigid = dec.penetration(out, tape)
    return out.mesh.value, out.joints.value, float(rigid.value), float(nonrigid.value)


def coverage_ok(depths, min_fraction=0.05) -> bool:
    good = sum(np.mean(np.isfinite(d)) >= min_fraction for d in depths)
    return good >= len(depths) / 2


def make_frame(subject, cameras, u, world, frame_id, split) -> CaptureFrame:
    mesh, joints, _, _ = ground_truth_frame(subject, u, world)
    depths = [d.astype(np.float32) for d in render_views(mesh, subject.model.faces, cameras)]
    return CaptureFrame(frame_id, joints, depths, split, mesh, np.asarray(u, dtype=np.float64))


def generate_dataset(subject: Subject, config: SynthConfig) -> Dataset:
    """Train and test frames in disjoint random poses, each rendered from
    every camera.  Poses that self-penetrate or leave the cameras' view are
    resampled."""
    cameras = camera_rig(config)
    mask = subject.model.dof_mask
    frames = []
    n_total = config.n_train_poses + config.n_test_poses
    for fid in range(n_total):
        rng = np.random.default_rng([config.seed, 2, fid])
        split = "train" if fid < config.n_train_poses else "test"
        for _ in range(config.max_retries):
            theta = sample_pose(rng, mask)
            u = np.arctanh(theta / np.pi)
            world = random_rigid(rng, config)
            mesh, joints, rigid, nonrigid = ground_truth_frame(subject, u, world)
            if rigid > 0 or nonrigid > 0:
                continue
            depths = [d.astype(np.float32) for d in render_views(mesh, subject.model.faces, cameras)]
            if coverage_ok(depths):
                frames.append(CaptureFrame(fid, joints, depths, split, mesh, u))
                break
        else:
            raise GenerationError(f"frame {fid}: no valid pose after {config.max_retries} tries")
    return Dataset(cameras, frames, config)


def save_subject(subject: Subject, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_model(subject.model, d / "template")
    subject.nets.save(d / "gt_nets.bin", {"beta": subject.beta.tolist()})
    (d / "beta.json").write_text(json.dumps(subject.beta.tolist()), encoding="utf-8")


def load_subject(directory) -> Subject:
    d = Path(directory)
    model = load_model(d / "template")
    nets = CorrectiveNets.load(d / "gt_nets.bin")
    beta = np.array(json.loads((d / "beta.json").read_text(encoding="utf-8")))
    return Subject(model, nets, beta)


def save_dataset(dataset: Dataset, subject: Subject, directory) -> None:
    """dataset/{manifest.json, cameras.json, subject/, frames/NNNN/{joints.json,
    view_C.pfm, gt_mesh.obj}}."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    save_cameras(root / "cameras.json", dataset.cameras)
    save_subject(subject, root / "subject")
    for fr in dataset.frames:
        fd = root / "frames" / f"{fr.frame_id:04d}"
        fd.mkdir(parents=True, exist_ok=True)
        (fd / "joints.json").write_text(json.dumps(
            {"frame_id": fr.frame_id, "split": fr.split, "joints": fr.joints.tolist(),
             "gt_raw_pose": fr.gt_raw.tolist()}, indent=1), encoding="utf-8")
        for c, dmap in enumerate(fr.depths):
            write_pfm(fd / f"view_{c}.pfm", dmap)
        write_obj(fd / "gt_mesh.obj", fr.gt_mesh, subject.model.faces)
    manifest = {"format": "handmesh-dataset", "version": 1,
                "seed": dataset.config.seed if dataset.config else None,
                "config": asdict(dataset.config) if dataset.config else {},
                "frames": [{"id": f.frame_id, "split": f.split} for f in dataset.frames]}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")


def load_dataset(directory) -> tuple[Dataset, Subject]:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text(encoding="utf-8"))
    cameras = load_cameras(root / "cameras.json")
    subject = load_subject(root / "subject")
    frames = []
    for entry in manifest["frames"]:
        fd = root / "frames" / f"{entry['id']:04d}"
        meta = json.loads((fd / "joints.json").read_text(encoding="utf-8"))
        depths = [read_pfm(fd / f"view_{c}.pfm") for c in range(len(cameras))]
        mesh, _ = read_obj(fd / "gt_mesh.obj")
        frames.append(CaptureFrame(entry["id"], np.array(meta["joints"]), depths, entry["split"],
                                   mesh, np.array(meta["gt_raw_pose"])))
    cfg = SynthConfig.from_dict(manifest.get("config", {}))
    return Dataset(cameras, frames, cfg), subject
