"""Evaluation metrics: Procrustes alignment, MPJPE, PVE, acceleration error."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .archive import read_archive, write_archive

ALIGNMENTS = ("none", "translation", "rigid", "similarity")


class MetricError(ValueError):
    pass


@dataclass
class Trajectory:
    """Per-frame posed joints and input-mesh vertices, the inputs of every metric."""

    joints: np.ndarray  # [F, 24, 3]
    vertices: np.ndarray  # [F, V, 3]

    def save(self, path):
        return write_archive(path, {"joints": self.joints, "vertices": self.vertices}, meta={"kind": "trajectory"},
                             dtypes={"joints": "float64", "vertices": "float64"})  # fmt: skip

    @classmethod
    def load(cls, path) -> Trajectory:
        a, _ = read_archive(path)
        return cls(a["joints"], a["vertices"])


@dataclass
class AlignTransform:
    scale: float
    rotation: np.ndarray  # [3, 3]
    translation: np.ndarray  # [3]
    mode: str = "similarity"

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(x) @ self.rotation.T + self.translation

    @classmethod
    def identity(cls, mode: str = "none") -> AlignTransform:
        return cls(1.0, np.eye(3), np.zeros(3), mode)


def procrustes_align(source: np.ndarray, target: np.ndarray, mode: str = "similarity", weights: np.ndarray | None = None) -> AlignTransform:
    """Least-squares transform T of the given class minimizing sum w_i |T(source_i) - target_i|^2."""
    if mode not in ALIGNMENTS:
        raise MetricError(f"unknown alignment {mode!r}")
    X = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    Y = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if X.shape != Y.shape:
        raise MetricError(f"shape mismatch {X.shape} vs {Y.shape}")
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if mode == "none":
        return AlignTransform.identity()
    if w.sum() <= 0:
        raise MetricError("alignment weights sum to zero")
    w = w / w.sum()
    mx, my = (X.mean(0), Y.mean(0)) if weights is None else (w @ X, w @ Y)
    if mode == "translation":
        return AlignTransform(1.0, np.eye(3), my - mx, mode)
    if (w > 0).sum() < 3:
        raise MetricError(f"{mode} alignment needs at least 3 points")
    Xc, Yc = X - mx, Y - my
    cov = (w[:, None] * Yc).T @ Xc
    U, S, Vt = np.linalg.svd(cov)
    if np.sum(S > 1e-12 * max(S[0], 1e-300)) < 2:
        raise MetricError("degenerate point configuration (rank < 2)")
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    s = 1.0
    if mode == "similarity":
        var = (w * (Xc**2).sum(1)).sum()
        s = float((S * np.diag(D)).sum() / var)
    return AlignTransform(s, R, my - s * R @ mx, mode)


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[None], gt[None]
    return pred, gt


def first_frame_alignment(pred: np.ndarray, gt: np.ndarray, mode: str) -> AlignTransform:
    """One transform fitted on frame 0 and applied to the whole sequence."""
    pred, gt = _check(pred, gt)
    return procrustes_align(pred[0], gt[0], mode)


def per_frame_position_error(pred, gt, alignment: str = "none") -> np.ndarray:
    pred, gt = _check(pred, gt)
    T = first_frame_alignment(pred, gt, alignment)
    return np.linalg.norm(T.apply(pred) - gt, axis=-1).mean(-1)


def mpjpe(pred_joints, gt_joints, alignment: str = "translation") -> float:
    return float(per_frame_position_error(pred_joints, gt_joints, alignment).mean())


def pve(pred_vertices, gt_vertices, alignment: str = "translation") -> float:
    return float(per_frame_position_error(pred_vertices, gt_vertices, alignment).mean())


def per_frame_accel_error(pred_joints, gt_joints) -> np.ndarray:
    pred, gt = _check(pred_joints, gt_joints)
    if pred.shape[0] < 3:
        raise MetricError(f"acceleration error needs at least 3 frames, got {pred.shape[0]}")
    ap = pred[2:] - 2 * pred[1:-1] + pred[:-2]
    ag = gt[2:] - 2 * gt[1:-1] + gt[:-2]
    return np.linalg.norm(ap - ag, axis=-1).mean(-1)


def accel_error(pred_joints, gt_joints) -> float:
    return float(per_frame_accel_error(pred_joints, gt_joints).mean())


@dataclass
class EvalReport:
    mpjpe: float
    pve: float
    accel: float
    per_frame_mpjpe: list
    per_frame_pve: list
    per_frame_accel: list
    alignment: str

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, path) -> EvalReport:
        return cls(**json.loads(Path(path).read_text()))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "mpjpe", "pve", "accel"])
            for t in range(len(self.per_frame_mpjpe)):
                acc = self.per_frame_accel[t - 1] if 1 <= t <= len(self.per_frame_accel) else ""
                w.writerow([t, repr(self.per_frame_mpjpe[t]), repr(self.per_frame_pve[t]), repr(acc) if acc != "" else ""])


def evaluate(pred_joints, gt_joints, pred_vertices, gt_vertices, alignment: str = "translation") -> EvalReport:
    """Align once on frame-0 joints, then score joints, vertices and acceleration."""
    pj, gj = _check(pred_joints, gt_joints)
    pv, gv = _check(pred_vertices, gt_vertices)
    T = first_frame_alignment(pj, gj, alignment)
    pj, pv = T.apply(pj), T.apply(pv)
    fj = np.linalg.norm(pj - gj, axis=-1).mean(-1)
    fv = np.linalg.norm(pv - gv, axis=-1).mean(-1)
    fa = per_frame_accel_error(pj, gj) if len(pj) >= 3 else np.zeros(0)
    return EvalReport(float(fj.mean()), float(fv.mean()), float(fa.mean()) if len(fa) else 0.0,
                      fj.tolist(), fv.tolist(), fa.tolist(), alignment)  # fmt: skip
