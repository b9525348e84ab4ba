"""Pose, depth, penetration and Laplacian losses and their weighted total."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .collision import LAMBDA_NR

log = logging.getLogger(__name__)

LAMBDA_LAP = 5.0
SMOOTH_L1_BETA = 1.0
CSV_HEADER = "iter,pose,depth,penet_r,penet_nr,lap,total"


class DataError(ValueError):
    pass


class TrainingError(FloatingPointError):
    def __init__(self, msg, breakdown=None):
        super().__init__(msg)
        self.breakdown = breakdown


def smooth_l1(x, beta: float = SMOOTH_L1_BETA):
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise (elementwise)."""
    if isinstance(x, ad.Var):
        return ad.smooth_l1(x, beta)
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta)


def pose_loss(pred: ad.Var, target) -> ad.Var:
    """Mean over joints of the per-joint L1 distance."""
    target = np.asarray(target, dtype=np.float64)
    if np.any(np.isnan(target)):
        raise DataError("target joints contain NaN")
    if pred.shape != target.shape:
        raise ad.ShapeError(f"pose_loss: {pred.shape} vs {target.shape}")
    return ad.sum(ad.abs(pred - target)) / target.shape[0]


def depth_loss(rendered, targets, n_views: int | None = None) -> ad.Var:
    """(1/C) sum_c mean over mutually-foreground pixels of smooth_l1(D_c - D*_c).

    ``rendered`` is a list of render.Rendered; ``targets`` the matching depth
    maps with non-finite background.  Views with an empty mask add zero.
    """
    tape = rendered[0].depth.tape
    C = len(rendered) if n_views is None else n_views
    total = tape.const(0.0)
    for c, (r, tgt) in enumerate(zip(rendered, targets)):
        tflat = np.asarray(tgt, dtype=np.float64).reshape(-1)
        if tflat.size != r.camera.width * r.camera.height:
            raise ad.ShapeError(f"view {c}: target has {tflat.size} pixels, "
                                f"camera {r.camera.width}x{r.camera.height}")
        tv = tflat[r.pixels]
        sel = np.flatnonzero(np.isfinite(tv) & (tv > 0) & np.isfinite(r.depth.value))
        if sel.size == 0:
            log.info("depth view %d has an empty foreground mask", c)
            continue
        res = ad.gather(r.depth, sel) - tv[sel]
        total = total + ad.mean(smooth_l1(res))
    return total / C


def laplacian_loss(residuals: ad.Var, reduction: str = "l2") -> ad.Var:
    """Mean over vertices of |r_v| ("l2") or |r_v|^2 ("sql2")."""
    if reduction == "l2":
        return ad.mean(ad.norm(residuals, axis=1))
    if reduction == "sql2":
        return ad.mean(ad.sum(ad.square(residuals), axis=1))
    raise ValueError(f"unknown Laplacian reduction {reduction!r}")


@dataclass
class LossBreakdown:
    pose: float = 0.0
    depth: float = 0.0
    penet_rigid: float = 0.0
    penet_nonrigid: float = 0.0
    laplacian: float = 0.0
    total: float = 0.0
    lambda_nr: float = LAMBDA_NR
    lambda_lap: float = LAMBDA_LAP

    def csv_row(self, it: int) -> str:
        return (f"{it},{self.pose!r},{self.depth!r},{self.penet_rigid!r},"
                f"{self.penet_nonrigid!r},{self.laplacian!r},{self.total!r}")

    def as_dict(self):
        return asdict(self)


def total_loss(pose=0.0, depth=0.0, penet_rigid=0.0, penet_nonrigid=0.0, laplacian=0.0,
               lambda_nr=LAMBDA_NR, lambda_lap=LAMBDA_LAP):
    """L = pose + depth + (rigid + lambda_nr * nonrigid) + lambda_lap * laplacian.

    Parts may be floats or tape values; returns (total, LossBreakdown).
    """
    val = lambda x: float(x.value) if isinstance(x, ad.Var) else float(x)  # noqa: E731
    parts = dict(pose=val(pose), depth=val(depth), penet_rigid=val(penet_rigid),
                 penet_nonrigid=val(penet_nonrigid), laplacian=val(laplacian))
    total = pose + depth + (penet_rigid + lambda_nr * penet_nonrigid) + lambda_lap * laplacian
    bd = LossBreakdown(**parts, total=val(total), lambda_nr=lambda_nr, lambda_lap=lambda_lap)
    if not all(math.isfinite(v) for v in parts.values()):
        raise TrainingError(f"non-finite loss term: {parts}", bd)
    return total, bd
