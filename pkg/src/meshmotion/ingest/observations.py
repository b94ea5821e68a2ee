"""Per-frame observations (landmarks, silhouette, reduced features) and the dataset layout.

A dataset directory holds::

    meta.json            frame count, image size, feature layout
    camera.json          the (fixed) video camera
    landmarks.jsonl      33 source landmarks per frame
    silhouettes/NNNNN.png
    features/NNNNN.f32   raw float32 h x w x C, with a .json sidecar
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..archive import read_raw_array
from .features import FeatureBasis
from .landmarks import LandmarkFrame, read_landmarks_jsonl, remap_landmarks, smooth_landmarks
from .silhouette import read_mask_png

logger = logging.getLogger(__name__)


class ObservationError(ValueError):
    pass


@dataclass
class FrameObservations:
    landmarks: LandmarkFrame  # body-joint order
    silhouette: np.ndarray  # [H, W] uint8 in {0, 1}
    features: np.ndarray  # [h, w, C]
    frame_index: int

    def __post_init__(self):
        s = np.asarray(self.silhouette)
        if not np.isin(s, (0, 1)).all():
            raise ObservationError("silhouette values must be 0 or 1")
        self.silhouette = s.astype(np.uint8)


def frame_name(i: int) -> str:
    return f"{i:05d}"


def read_dataset_meta(root) -> dict:
    path = Path(root) / "meta.json"
    if not path.exists():
        raise FileNotFoundError(path)
    return json.loads(path.read_text())


def load_observations(root, basis: FeatureBasis | None = None, smooth_window: int = 5, n_components: int | None = None) -> list[FrameObservations]:
    """Read a dataset directory; landmarks are reordered to joint order, then smoothed.

    Features flagged ``reduced`` in meta.json are used as stored; otherwise ``basis``
    projects them.
    """
    root = Path(root)
    meta = read_dataset_meta(root)
    frames = [remap_landmarks(f) for f in read_landmarks_jsonl(root / "landmarks.jsonl")]
    frames = smooth_landmarks(frames, smooth_window)
    reduced = bool(meta.get("reduced", False))
    if not reduced and basis is None:
        raise ObservationError("features are not reduced and no feature basis was given")
    out = []
    for lm in frames:
        name = frame_name(lm.frame)
        sil_path = root / "silhouettes" / f"{name}.png"
        feat_path = root / "features" / f"{name}.f32"
        for p in (sil_path, feat_path):
            if not p.exists():
                raise FileNotFoundError(p)
        feat = read_raw_array(feat_path).astype(np.float64)
        if not reduced:
            feat = basis.project(feat)
        if n_components is not None and feat.shape[-1] != n_components:
            raise ObservationError(f"frame {lm.frame}: {feat.shape[-1]} feature channels, expected {n_components}")
        out.append(FrameObservations(lm, read_mask_png(sil_path), feat, lm.frame))
    logger.info("loaded %d frames from %s", len(out), root)
    return out
