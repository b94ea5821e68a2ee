"""2D landmark frames: JSON-lines IO, reordering to body-joint order, temporal smoothing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from ..body.model import JOINT_NAMES, NUM_JOINTS

NUM_SOURCE_LANDMARKS = 33
SOURCE_LAYOUT = "mediapipe"
BODY_LAYOUT = "body"


class LandmarkError(ValueError):
    pass


@dataclass
class LandmarkFrame:
    points: np.ndarray  # [N, 2] normalized image coordinates (u / W, v / H)
    confidence: np.ndarray  # [N]
    layout: str = SOURCE_LAYOUT
    frame: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.confidence):
            raise LandmarkError("points and confidence lengths differ")
        if not np.all(np.isfinite(self.points)):
            raise LandmarkError("landmark points must be finite")
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise LandmarkError("confidences must lie in [0, 1]")


@dataclass(frozen=True)
class LandmarkMap:
    sources: tuple  # per body joint, tuple of source landmark indices
    fill: dict = field(default_factory=dict)  # source index -> body joint, for synthesizing unused landmarks


@lru_cache(maxsize=1)
def default_landmark_map() -> LandmarkMap:
    raw = json.loads(resources.files("meshmotion.data").joinpath("landmark_map.json").read_text())
    joints = raw["joints"]
    if list(joints) != list(JOINT_NAMES):
        raise LandmarkError("landmark map joints out of body-model order")
    sources = tuple(tuple(int(i) for i in joints[name]) for name in JOINT_NAMES)
    fill = {int(k): JOINT_NAMES.index(v) for k, v in raw.get("fill", {}).items()}
    return LandmarkMap(sources, fill)


def remap_landmarks(frame: LandmarkFrame, mapping: LandmarkMap | None = None, allow_remapped: bool = False) -> LandmarkFrame:
    """Reorder 33 source landmarks into the 24-joint body order.

    Multi-source joints average their sources and take the smallest source confidence.
    A frame already in body layout raises unless ``allow_remapped`` is set, in which
    case it is returned unchanged.
    """
    if frame.layout == BODY_LAYOUT:
        if allow_remapped:
            return frame
        raise LandmarkError("frame is already in body-joint order; refusing to remap twice")
    if len(frame.points) != NUM_SOURCE_LANDMARKS:
        raise LandmarkError(f"expected {NUM_SOURCE_LANDMARKS} source landmarks, got {len(frame.points)}")
    mapping = mapping or default_landmark_map()
    pts = np.zeros((NUM_JOINTS, 2))
    conf = np.zeros(NUM_JOINTS)
    for j, src in enumerate(mapping.sources):
        if src:
            pts[j] = frame.points[list(src)].mean(0)
            conf[j] = frame.confidence[list(src)].min()
    return LandmarkFrame(pts, conf, BODY_LAYOUT, frame.frame)


def joints_to_source_landmarks(points: np.ndarray, confidence: np.ndarray, mapping: LandmarkMap | None = None) -> LandmarkFrame:
    """Inverse of ``remap_landmarks`` for joints that have sources.

    Used by the synthetic generator: remapping the result reproduces ``points`` exactly
    for every joint with a source landmark.
    """
    mapping = mapping or default_landmark_map()
    out = np.zeros((NUM_SOURCE_LANDMARKS, 2))
    conf = np.zeros(NUM_SOURCE_LANDMARKS)
    for j, src in enumerate(mapping.sources):
        for i in src:
            out[i] = points[j]
            conf[i] = confidence[j]
    for i, j in mapping.fill.items():
        out[i] = points[j]
        conf[i] = confidence[j]
    return LandmarkFrame(out, conf, SOURCE_LAYOUT)


def smooth_landmarks(frames, window: int = 5) -> list[LandmarkFrame]:
    """Confidence-weighted moving average over ``window`` frames.

    Sequence ends are padded by repeating the edge frame, which keeps constant
    sequences fixed and makes the filter shift-equivariant. Confidences pass through.
    """
    if window < 1 or window % 2 == 0:
        raise LandmarkError(f"smoothing window must be odd and >= 1, got {window}")
    frames = list(frames)
    if window == 1 or len(frames) == 0:
        return frames
    P = np.stack([f.points for f in frames])  # [T, N, 2]
    C = np.stack([f.confidence for f in frames])  # [T, N]
    h = window // 2
    Pp = np.concatenate([np.repeat(P[:1], h, 0), P, np.repeat(P[-1:], h, 0)])
    Cp = np.concatenate([np.repeat(C[:1], h, 0), C, np.repeat(C[-1:], h, 0)])
    T = len(frames)
    num = np.zeros_like(P)
    den = np.zeros_like(C)
    for k in range(window):
        num += Cp[k : k + T, :, None] * Pp[k : k + T]
        den += Cp[k : k + T]
    out = np.where(den[..., None] > 0, num / np.where(den > 0, den, 1.0)[..., None], P)
    return [LandmarkFrame(out[t], frames[t].confidence, frames[t].layout, frames[t].frame) for t in range(T)]


def write_landmarks_jsonl(path, frames) -> None:
    lines = []
    for i, f in enumerate(frames):
        rec = {"frame": int(f.frame if f.frame is not None else i), "points": f.points.tolist(), "confidence": f.confidence.tolist()}
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def read_landmarks_jsonl(path) -> list[LandmarkFrame]:
    frames = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            frames.append(LandmarkFrame(rec["points"], rec["confidence"], SOURCE_LAYOUT, int(rec["frame"])))
        except (KeyError, json.JSONDecodeError) as exc:
            raise LandmarkError(f"{path}:{lineno}: malformed landmark record ({exc})") from exc
    frames.sort(key=lambda f: f.frame)
    return frames
