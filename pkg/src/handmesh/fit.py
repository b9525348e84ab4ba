"""Weakly-supervised fitting: per-frame raw poses and shared corrective nets
trained from target joints and multi-view depth, plus evaluation metrics.

Each training frame owns a free raw-pose vector u_f in place of an image
encoder; everything downstream of the pose (correctives, skinning, rendering,
losses) is the same decoder used to make the data.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from . import autodiff as ad
from .correctives import CorrectiveNets
from .fileio import load_arrays, save_arrays
from .losses import CSV_HEADER, LossBreakdown, TrainingError
from .model import HandModel
from .pipeline import Decoder, LossConfig

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_PARTS = ("pose", "depth", "penet_rigid", "penet_nonrigid", "laplacian", "total")


@dataclass
class FitConfig:
    lr: float = 1e-4                     # corrective nets
    pose_lr: float | None = None         # per-frame poses; None means same as lr
    epochs: int = 35
    lr_drop_epochs: tuple = (30, 32)
    lr_drop_factor: float = 10.0
    batch_size: int = 32
    views_per_frame: int = 6
    lambda_nr: float = 5.0
    lambda_lap: float = 5.0
    use_pose: bool = True
    use_depth: bool = True
    use_penet: bool = True
    use_lap: bool = True
    lap_reduction: str = "l2"
    heads: dict = field(default_factory=lambda: {"skel": True, "idvert": True, "posevert": True})
    skinw: bool = False
    init_sigma: float = 0.01
    seed: int = 0
    warmup_iters: int = 0                # pose-only steps per frame before training
    eval_iters: int = 150
    eval_lr: float | None = None

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        if self.lr <= 0 or (self.pose_lr is not None and self.pose_lr <= 0):
            raise ValueError("learning rates must be positive")
        if any(e >= self.epochs for e in self.lr_drop_epochs):
            raise ValueError(f"lr drop epochs {self.lr_drop_epochs} must be < epochs {self.epochs}")
        if self.batch_size < 1 or self.views_per_frame < 1:
            raise ValueError("batch_size and views_per_frame must be >= 1")

    @classmethod
    def desk(cls, **overrides) -> "FitConfig":
        """Settings that converge on the synthetic subjects in minutes."""
        base = dict(lr=1e-3, pose_lr=2e-2, epochs=80, batch_size=20, warmup_iters=150,
                    eval_iters=150, eval_lr=2e-2)
        base.update(overrides)
        if "lr_drop_epochs" not in overrides:
            e = base["epochs"]
            base["lr_drop_epochs"] = tuple(sorted({d for d in (int(0.75 * e), int(0.9 * e))
                                                   if 0 < d < e}))
        return cls(**base)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown FitConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d

    def loss_config(self) -> LossConfig:
        return LossConfig(self.use_pose, self.use_depth, self.use_penet, self.use_lap,
                          self.lambda_nr, self.lambda_lap, self.lap_reduction)

    def lr_scale(self, epoch: int) -> float:
        return self.lr_drop_factor ** -sum(epoch >= e for e in self.lr_drop_epochs)


@dataclass
class FitState:
    model: HandModel
    nets: CorrectiveNets
    beta: np.ndarray
    poses: dict                  # frame id -> Param u_f
    config: FitConfig
    net_opt: ad.Adam = None
    pose_opt: ad.Adam = None
    epoch: int = 0
    iteration: int = 0
    history: list = field(default_factory=list)   # LossBreakdown per iteration

    def __post_init__(self):
        if self.net_opt is None:
            self.net_opt = ad.Adam(self.nets.all_params(), lr=self.config.lr)
        if self.pose_opt is None:
            self.pose_opt = ad.Adam(self._pose_params(),
                                    lr=self.config.pose_lr or self.config.lr)

    def _pose_params(self):
        return [self.poses[k] for k in sorted(self.poses)]

    def decoder(self) -> Decoder:
        return Decoder(self.model, self.nets, self.beta)


def init_state(model: HandModel, beta, frame_ids, config: FitConfig) -> FitState:
    nets = CorrectiveNets.for_model(model, seed=config.seed, sigma=config.init_sigma,
                                    skinw=config.skinw, enabled=config.heads)
    poses = {int(f): ad.Param(np.zeros(model.n_pose), f"u.{int(f):04d}") for f in frame_ids}
    beta = np.array(beta, dtype=np.float64)
    beta.setflags(write=False)
    return FitState(model, nets, beta, poses, config)


def batch_schedule(frame_ids, config: FitConfig, epoch: int) -> list[list[int]]:
    order = np.random.default_rng([config.seed, 3, epoch]).permutation(sorted(frame_ids))
    B = config.batch_size
    return [[int(f) for f in order[s:s + B]] for s in range(0, len(order), B)]


def sample_views(config: FitConfig, iteration: int, frame_id: int, n_cameras: int) -> np.ndarray:
    """C_out distinct views, drawn per frame per iteration."""
    k = min(config.views_per_frame, n_cameras)
    rng = np.random.default_rng([config.seed, 4, iteration, frame_id])
    return np.sort(rng.choice(n_cameras, k, replace=False))


def batch_loss(state: FitState, dec: Decoder, tape: ad.Tape, frames, cameras, view_sets,
               loss_cfg: LossConfig, poses=None):
    """Mean frame loss over a batch, with the identity part evaluated once."""
    shared = dec.shared(tape)
    poses = state.poses if poses is None else poses
    total, parts = None, np.zeros(len(_PARTS))
    for fr, views in zip(frames, view_sets):
        u = tape.watch(poses[fr.frame_id])
        out = dec.forward(tape, u, fr.joints, shared)
        loss, bd = dec.frame_loss(tape, out, loss_cfg, fr.joints,
                                  [cameras[c] for c in views], [fr.depths[c] for c in views])
        parts += [getattr(bd, p) for p in _PARTS]
        total = loss if total is None else total + loss
    n = len(frames)
    parts /= n
    bd = LossBreakdown(*parts, lambda_nr=loss_cfg.lambda_nr, lambda_lap=loss_cfg.lambda_lap)
    return ad._lift(tape, total) / n, bd


def pin_translation(nets: CorrectiveNets, beta, root: int) -> np.ndarray:
    """Move the root's skeleton correction into the identity vertex corrective.

    Shifting the root offset and every vertex by the same t leaves all losses
    unchanged (the rigid alignment absorbs it), so Adam random-walks along that
    direction.  Subtracting t from both output biases keeps the root correction
    at zero without changing the decoded hand.  Returns the t removed.
    """
    if not (nets.active("skel") and nets.active("idvert")):
        return np.zeros(3)
    t = nets["skel"].evaluate(beta)[root].copy()
    skel_b, idv_b = nets["skel"].b2, nets["idvert"].b2
    skel_b.value = skel_b.value.copy()
    skel_b.value[3 * root:3 * root + 3] -= t
    idv_b.value = (idv_b.value.reshape(-1, 3) - t).reshape(-1)
    return t


def train_step(state: FitState, frames, cameras, dec: Decoder | None = None) -> LossBreakdown:
    """One optimisation step on ``frames``; returns the batch loss breakdown."""
    cfg = state.config
    dec = dec or state.decoder()
    tape = ad.Tape()
    views = [sample_views(cfg, state.iteration, f.frame_id, len(cameras)) for f in frames]
    loss, bd = batch_loss(state, dec, tape, frames, cameras, views, cfg.loss_config())
    pose_params = [state.poses[f.frame_id] for f in frames]
    for p in state.nets.all_params() + pose_params:
        p.zero_grad()
    if loss.op != "const":
        tape.backward(loss)
    scale = cfg.lr_scale(state.epoch)
    state.net_opt.step(state.nets.params(), scale)
    if any(np.any(p.grad) for p in state.nets.params()):
        pin_translation(state.nets, state.beta, state.model.hierarchy.root)
    state.pose_opt.step(pose_params, scale)
    state.iteration += 1
    state.history.append(bd)
    return bd


def fit(dataset, model: HandModel, beta, config: FitConfig, state: FitState | None = None,
        checkpoint: str | Path | None = None, loss_csv: str | Path | None = None,
        epochs: int | None = None, callback=None) -> FitState:
    """Train on the dataset's train split.

    Resumes from ``state`` when given.  On a non-finite loss the state before
    the failing step is written to ``checkpoint`` and the TrainingError is
    re-raised with its breakdown.
    """
    frames = {f.frame_id: f for f in dataset.split("train")}
    if not frames:
        raise ValueError("dataset has no training frames")
    if state is None:
        state = init_state(model, beta, frames, config)
        if config.warmup_iters:
            warm = fit_poses(state, list(frames.values()), dataset.cameras, 0,
                             config.pose_lr or config.lr)
            for fid, p in warm.items():
                state.poses[fid].value = p.value
    beta_bytes = state.beta.tobytes()
    dec = state.decoder()
    stop = config.epochs if epochs is None else min(config.epochs, state.epoch + epochs)
    while state.epoch < stop:
        for batch in batch_schedule(frames, config, state.epoch):
            try:
                bd = train_step(state, [frames[f] for f in batch], dataset.cameras, dec)
            except TrainingError:
                if checkpoint is not None:
                    save_checkpoint(state, checkpoint)
                raise
            if callback is not None:
                callback(state, bd)
        log.info("epoch %d loss %.5g", state.epoch, state.history[-1].total)
        state.epoch += 1
    assert state.beta.tobytes() == beta_bytes, "identity code changed during fitting"
    if checkpoint is not None:
        save_checkpoint(state, checkpoint)
    if loss_csv is not None:
        write_loss_csv(state.history, loss_csv)
    return state


def write_loss_csv(history, path) -> None:
    lines = [CSV_HEADER] + [bd.csv_row(i) for i, bd in enumerate(history)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(state: FitState, path) -> None:
    """Nets, pose table, optimiser moments, config and history in one file."""
    arrays = {f"net.{k}": v for k, v in state.nets.state_arrays().items()}
    net_names = [p.name for p in state.nets.all_params()]
    arrays.update({f"net.{k}": v for k, v in state.net_opt.state_arrays(net_names).items()})
    pose_names = [p.name for p in state.pose_opt.params]
    arrays.update({f"pose.{k}": v for k, v in state.pose_opt.state_arrays(pose_names).items()})
    for fid, p in state.poses.items():
        arrays[p.name] = p.value
    arrays["beta"] = np.asarray(state.beta)
    arrays["history"] = np.array([[getattr(b, p) for p in _PARTS] for b in state.history]
                                 ).reshape(-1, len(_PARTS))
    meta = {"kind": "fit_checkpoint", "version": CHECKPOINT_VERSION,
            "config": state.config.to_dict(), "epoch": state.epoch,
            "iteration": state.iteration, "frames": sorted(state.poses),
            "heads": sorted(state.nets.heads), "enabled": state.nets.enabled}
    save_arrays(path, arrays, meta)


def load_checkpoint(path, model: HandModel) -> FitState:
    arrays, meta = load_arrays(path)
    if meta.get("kind") != "fit_checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} fit checkpoint")
    cfg = FitConfig.from_dict(meta["config"])
    state = init_state(model, arrays["beta"], meta["frames"], cfg)
    state.nets.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("net.")})
    for p in state.poses.values():
        p.value = np.array(arrays[p.name])
    state.net_opt.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("net.")},
                                    [p.name for p in state.nets.all_params()])
    state.pose_opt.load_state_arrays({k[5:]: v for k, v in arrays.items() if k.startswith("pose.")},
                                     [p.name for p in state.pose_opt.params])
    state.epoch, state.iteration = int(meta["epoch"]), int(meta["iteration"])
    lam = dict(lambda_nr=cfg.lambda_nr, lambda_lap=cfg.lambda_lap)
    state.history = [LossBreakdown(*row, **lam) for row in arrays["history"].tolist()]
    return state


# --- metrics ----------------------------------------------------------------

def p_err(pred, target) -> float:
    """Mean Euclidean joint distance."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"p_err: shapes differ {pred.shape} vs {target.shape}")
    return float(np.linalg.norm(pred - target, axis=-1).mean())


@numba.njit(cache=True)
def _point_triangle_sq(p, a, b, c):
    # closest point on triangle abc to p, by Voronoi region
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0.0 and d2 <= 0.0:
        return ap @ ap
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0.0 and d4 <= d3:
        return bp @ bp
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        q = ap - (d1 / (d1 - d3)) * ab
        return q @ q
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0.0 and d5 <= d6:
        return cp @ cp
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        q = ap - (d2 / (d2 - d6)) * ac
        return q @ q
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        w = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        q = bp - w * (c - b)
        return q @ q
    denom = 1.0 / (va + vb + vc)
    v, w = vb * denom, vc * denom
    q = ap - ab * v - ac * w
    return q @ q


@numba.njit(cache=True)
def _mesh_distances(points, verts, faces):
    out = np.empty(points.shape[0])
    for i in range(points.shape[0]):
        best = np.inf
        for f in range(faces.shape[0]):
            d = _point_triangle_sq(points[i], verts[faces[f, 0]], verts[faces[f, 1]],
                                   verts[faces[f, 2]])
            if d < best:
                best = d
        out[i] = np.sqrt(best)
    return out


def point_mesh_distance(points, verts, faces) -> np.ndarray:
    """Exact distance from each point to the nearest triangle of a mesh."""
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    if faces.ndim != 2 or len(faces) == 0:
        raise ValueError("reference mesh has no triangles")
    return _mesh_distances(np.ascontiguousarray(points, dtype=np.float64),
                           np.ascontiguousarray(verts, dtype=np.float64), faces)


def m_err(pred_vertices, ref_vertices, ref_faces) -> float:
    """Mean over predicted vertices of the distance to the reference surface."""
    return float(point_mesh_distance(pred_vertices, ref_vertices, ref_faces).mean())


def _descend(state, dec, frames, cameras, poses, iters, lr, loss_cfg):
    opt = ad.Adam([poses[f.frame_id] for f in frames], lr=lr)
    views = [np.arange(len(cameras))] * len(frames)
    for it in range(iters):
        tape = ad.Tape()
        loss, _ = batch_loss(state, dec, tape, frames, cameras, views, loss_cfg, poses)
        opt.zero_grad()
        if loss.op != "const":
            tape.backward(loss)
        # last quarter at a tenth of the rate to settle the L1 terms
        opt.step(lr_scale=1.0 if it < 0.75 * iters else 0.1)


def fit_poses(state: FitState, frames, cameras, iters: int, lr: float, loss_cfg=None) -> dict:
    """Fit fresh raw poses for ``frames`` with the nets frozen: a pose-loss-only
    warm-up of ``config.warmup_iters`` steps, then ``iters`` steps of the
    configured loss."""
    poses = {f.frame_id: ad.Param(np.zeros(state.model.n_pose), f"u.{f.frame_id:04d}")
             for f in frames}
    dec = state.decoder()
    cfg = state.config
    if cfg.warmup_iters and cfg.use_pose:
        _descend(state, dec, frames, cameras, poses, cfg.warmup_iters, lr,
                 LossConfig(pose=True, depth=False, penet=False, lap=False))
    _descend(state, dec, frames, cameras, poses, iters, lr, loss_cfg or cfg.loss_config())
    return poses


def frame_metrics(dec: Decoder, u, frame) -> dict:
    mesh, joints = dec.deform(np.asarray(u.value if isinstance(u, ad.Param) else u), frame.joints)
    out = {"frame": frame.frame_id, "p_err": p_err(joints, frame.joints)}
    if frame.gt_mesh is not None:
        out["m_err"] = m_err(mesh, frame.gt_mesh, dec.model.faces)
    return out


def _summary(values):
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "median": float(np.median(v)),
            "p90": float(np.percentile(v, 90)), "max": float(v.max())}


def evaluate(state: FitState, frames, cameras, iters: int | None = None) -> dict:
    """Metrics on ``frames``: training frames use their trained poses, others
    get poses re-fitted with the nets frozen."""
    cfg = state.config
    fresh = [f for f in frames if f.frame_id not in state.poses]
    poses = dict(state.poses)
    if fresh:
        poses.update(fit_poses(state, fresh, cameras, cfg.eval_iters if iters is None else iters,
                               cfg.eval_lr or cfg.pose_lr or cfg.lr))
    dec = state.decoder()
    per = [frame_metrics(dec, poses[f.frame_id], f) for f in frames]
    report = {"n_frames": len(per), "p_err": _summary([m["p_err"] for m in per]), "frames": per}
    if all("m_err" in m for m in per):
        report["m_err"] = _summary([m["m_err"] for m in per])
    return report


def report_csv(report) -> str:
    cols = ["frame", "p_err", "m_err"]
    rows = [",".join(cols)]
    for m in report["frames"]:
        rows.append(",".join(repr(m.get(c, math.nan)) for c in cols))
    return "\n".join(rows) + "\n"
