"""Confidence-weighted DLT triangulation of body joints from calibrated views."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..ingest.landmarks import BODY_LAYOUT, LandmarkFrame, remap_landmarks
from ..render.camera import Camera, project_points

CONFIDENCE_FLOOR = 0.3


class TriangulationError(ValueError):
    pass


@dataclass
class Joints3D:
    positions: np.ndarray  # [J, 3]
    confidence: np.ndarray  # [J]

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise TriangulationError("joint confidences must lie in [0, 1]")
        if not np.all(np.isfinite(self.positions[self.confidence > 0])):
            raise TriangulationError("confident joints must have finite positions")


def triangulate_point(cameras, pixels: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted homogeneous DLT in normalized camera coordinates."""
    rows = []
    for cam, (u, v), w in zip(cameras, pixels, weights):
        x, y, _ = np.linalg.solve(cam.K, np.array([u, v, 1.0]))
        P = np.hstack([cam.rotation, cam.translation[:, None]])
        rows.append(w * (x * P[2] - P[0]))
        rows.append(w * (y * P[2] - P[1]))
    _, _, Vt = np.linalg.svd(np.asarray(rows))
    X = Vt[-1]
    return X[:3] / X[3]


def triangulate_joints(views, confidence_floor: float = CONFIDENCE_FLOOR) -> Joints3D:
    """views: sequence of (Camera, LandmarkFrame) with landmarks in normalized image
    coordinates, in source or body-joint layout.

    Joints seen confidently in fewer than two views get confidence 0. If no joint can be
    triangulated an error is raised, except when every input confidence is zero, which
    returns an all-zero-confidence result.
    """
    views = list(views)
    if not views:
        raise TriangulationError("no views given")
    frames = [f if f.layout == BODY_LAYOUT else remap_landmarks(f) for _, f in views]
    cams: list[Camera] = [c for c, _ in views]
    J = len(frames[0].points)
    pos = np.zeros((J, 3))
    conf = np.zeros(J)
    for j in range(J):
        use = [i for i, f in enumerate(frames) if f.confidence[j] >= confidence_floor and f.confidence[j] > 0]
        if len(use) < 2:
            continue
        px = np.array([frames[i].points[j] * (cams[i].image_size[1], cams[i].image_size[0]) for i in use])
        w = np.array([frames[i].confidence[j] for i in use])
        pos[j] = triangulate_point([cams[i] for i in use], px, w)
        conf[j] = w.mean()
    if not np.any(conf > 0) and np.any(np.concatenate([f.confidence for f in frames]) > 0):
        raise TriangulationError("fewer than 2 usable views for every joint")
    return Joints3D(pos, conf)


def project_to_landmarks(points: np.ndarray, camera: Camera, confidence=None) -> LandmarkFrame:
    """Body-layout LandmarkFrame of 3D points seen by ``camera`` (normalized coordinates)."""
    uv, valid = project_points(points, camera)
    H, W = camera.image_size
    conf = np.ones(len(points)) if confidence is None else np.asarray(confidence, dtype=np.float64)
    conf = np.where(valid, conf, 0.0)
    return LandmarkFrame(uv / (W, H), conf, BODY_LAYOUT)
