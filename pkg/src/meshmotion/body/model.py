"""SMPL-compatible body model: blendshapes, joint regression and linear blend skinning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import torch

from ..archive import ArchiveError, read_archive, write_archive
from ..rotations import axis_angle_to_matrix

logger = logging.getLogger(__name__)

NUM_JOINTS = 24
NUM_BODY_JOINTS = 23
NUM_BETAS = 10
ROOT_SENTINEL = -1

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)  # fmt: skip

FIELDS = (
    "template_vertices",
    "faces",
    "shape_dirs",
    "pose_dirs",
    "joint_regressor",
    "skin_weights",
    "kinematic_parents",
)

# rows whose sum is off by more than this are rejected rather than renormalized
SKIN_WEIGHT_TOL = 1e-3


class BodyModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BodyModel:
    template_vertices: np.ndarray  # [V, 3]
    faces: np.ndarray  # [F, 3]
    shape_dirs: np.ndarray  # [V, 3, 10]
    pose_dirs: np.ndarray  # [V, 3, 207]
    joint_regressor: np.ndarray  # [24, V]
    skin_weights: np.ndarray  # [V, 24]
    kinematic_parents: np.ndarray  # [24]
    meta: dict = field(default_factory=dict)

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @cached_property
    def tensors(self) -> dict:
        """float64 torch views of the arrays, built once per model."""
        d = torch.float64
        V = self.num_vertices
        return {
            "template": torch.as_tensor(self.template_vertices, dtype=d),
            "shape_dirs": torch.as_tensor(self.shape_dirs, dtype=d),
            "pose_dirs": torch.as_tensor(self.pose_dirs.reshape(V * 3, -1).T.copy(), dtype=d),
            "regressor": torch.as_tensor(self.joint_regressor, dtype=d),
            "weights": torch.as_tensor(self.skin_weights, dtype=d),
            "faces": torch.as_tensor(self.faces, dtype=torch.long),
        }

    @cached_property
    def rest_joints(self) -> np.ndarray:
        return self.joint_regressor @ self.template_vertices

    def save(self, path) -> Path:
        arrays = {name: getattr(self, name) for name in FIELDS}
        return write_archive(path, arrays, meta=self.meta)


@dataclass
class ShapeCoeffs:
    beta: np.ndarray

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(NUM_BETAS)
        if not np.all(np.isfinite(self.beta)):
            raise ValueError("shape coefficients must be finite")

    @classmethod
    def zeros(cls) -> ShapeCoeffs:
        return cls(np.zeros(NUM_BETAS))


@dataclass
class PoseState:
    body_pose: np.ndarray  # [23, 3] axis-angle
    global_orient: np.ndarray  # [3]
    latent: np.ndarray | None = None

    def __post_init__(self):
        self.body_pose = np.asarray(self.body_pose, dtype=np.float64).reshape(NUM_BODY_JOINTS, 3)
        self.global_orient = np.asarray(self.global_orient, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(self.body_pose)) and np.all(np.isfinite(self.global_orient))):
            raise ValueError("pose angles must be finite")

    @classmethod
    def zeros(cls) -> PoseState:
        return cls(np.zeros((NUM_BODY_JOINTS, 3)), np.zeros(3))


@dataclass
class PosedBody:
    vertices: np.ndarray  # [V, 3]
    joints: np.ndarray  # [24, 3]


def _validate(arrays: dict, origin: str) -> dict:
    for name in FIELDS:
        if name not in arrays:
            raise BodyModelError(f"{origin}: {name} absent")
    tv = np.asarray(arrays["template_vertices"], dtype=np.float64)
    if tv.ndim != 2 or tv.shape[1] != 3:
        raise BodyModelError(f"{origin}: template_vertices has shape {tv.shape}, expected [V, 3]")
    V = tv.shape[0]
    faces = np.asarray(arrays["faces"])
    if faces.ndim != 2 or faces.shape[1] != 3:
        raise BodyModelError(f"{origin}: faces has shape {faces.shape}, expected [F, 3]")
    faces = np.rint(faces).astype(np.int64)
    if faces.min() < 0 or faces.max() >= V:
        raise BodyModelError(f"{origin}: faces index vertices outside [0, {V})")
    expected = {
        "shape_dirs": (V, 3, NUM_BETAS),
        "pose_dirs": (V, 3, NUM_BODY_JOINTS * 9),
        "joint_regressor": (NUM_JOINTS, V),
        "skin_weights": (V, NUM_JOINTS),
        "kinematic_parents": (NUM_JOINTS,),
    }
    out = {"template_vertices": tv, "faces": faces}
    for name, shape in expected.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != shape:
            raise BodyModelError(f"{origin}: {name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise BodyModelError(f"{origin}: {name} contains non-finite values")
        out[name] = arr

    w = out["skin_weights"]
    if w.min() < -1e-6:
        raise BodyModelError(f"{origin}: skin_weights has negative entries (min {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    sums = w.sum(1)
    worst = np.abs(sums - 1.0).max()
    if worst > SKIN_WEIGHT_TOL:
        raise BodyModelError(f"{origin}: skin_weights rows not normalized (max deviation {worst:.3g})")
    out["skin_weights"] = w / sums[:, None]

    parents = np.rint(out["kinematic_parents"]).astype(np.int64)
    roots = np.flatnonzero(parents < 0)
    if len(roots) != 1:
        raise BodyModelError(f"{origin}: kinematic_parents needs exactly one root, found {len(roots)}")
    parents[roots] = ROOT_SENTINEL
    for j in range(NUM_JOINTS):
        if j != roots[0] and not (0 <= parents[j] < j):
            # SMPL orders joints so that parents precede children; forward() relies on it
            raise BodyModelError(f"{origin}: kinematic_parents[{j}] = {parents[j]} breaks topological order")
    out["kinematic_parents"] = parents
    return out


def body_model_from_arrays(arrays: dict, meta: dict | None = None, origin: str = "arrays") -> BodyModel:
    v = _validate(arrays, origin)
    return BodyModel(**{name: v[name] for name in FIELDS}, meta=dict(meta or {}))


def load_body_model(archive_path) -> BodyModel:
    """Load a body model archive (directory or zip with manifest.json)."""
    path = Path(archive_path)
    try:
        arrays, meta = read_archive(path)
    except ArchiveError as exc:
        raise BodyModelError(str(exc)) from exc
    model = body_model_from_arrays(arrays, meta, origin=str(path))
    logger.info("loaded body model %s: %d vertices, %d faces", path, model.num_vertices, len(model.faces))
    return model


def convert_smpl_npz(npz_path, out_path) -> BodyModel:
    """Convert the public SMPL npz layout (v_template, f, shapedirs, ...) to the archive layout."""
    src = np.load(npz_path, allow_pickle=False)
    kintree = np.asarray(src["kintree_table"])
    parents = kintree[0].astype(np.int64).copy()
    parents[0] = ROOT_SENTINEL
    arrays = {
        "template_vertices": src["v_template"],
        "faces": src["f"],
        "shape_dirs": np.asarray(src["shapedirs"])[:, :, :NUM_BETAS],
        "pose_dirs": src["posedirs"],
        "joint_regressor": np.asarray(src["J_regressor"]),
        "skin_weights": src["weights"],
        "kinematic_parents": parents,
    }
    model = body_model_from_arrays(arrays, {"source": str(npz_path)}, origin=str(npz_path))
    model.save(out_path)
    return model


def lbs(
    model: BodyModel,
    betas: torch.Tensor,
    body_pose: torch.Tensor,
    global_orient: torch.Tensor,
    joints_only: bool = False,
):
    """Batched skinning.

    betas [B, 10], body_pose [B, 23, 3], global_orient [B, 3] (all float64).
    Returns (vertices [B, V, 3] or None, joints [B, 24, 3]). ``global_orient`` rotates
    about the root joint, as in the published model.
    """
    t = model.tensors
    B = betas.shape[0]
    v_shaped = t["template"][None] + torch.einsum("vck,bk->bvc", t["shape_dirs"], betas)
    J = torch.einsum("jv,bvc->bjc", t["regressor"], v_shaped)

    full_pose = torch.cat([global_orient[:, None, :], body_pose], dim=1)
    rot = axis_angle_to_matrix(full_pose)  # [B, 24, 3, 3]

    parents = model.kinematic_parents
    rel = J.clone()
    rel[:, 1:] = J[:, 1:] - J[:, parents[1:]]
    chain_R = [rot[:, 0]]
    chain_t = [J[:, 0]]
    for j in range(1, NUM_JOINTS):
        p = parents[j]
        chain_R.append(chain_R[p] @ rot[:, j])
        chain_t.append(chain_t[p] + (chain_R[p] @ rel[:, j, :, None])[..., 0])
    G_R = torch.stack(chain_R, 1)  # [B, 24, 3, 3]
    posed_joints = torch.stack(chain_t, 1)  # [B, 24, 3]
    if joints_only:
        return None, posed_joints

    eye = torch.eye(3, dtype=rot.dtype)
    pose_feature = (rot[:, 1:] - eye).reshape(B, -1)
    v_posed = v_shaped + (pose_feature @ t["pose_dirs"]).reshape(B, -1, 3)

    # rest-relative transforms: x -> G_R x + (posed_joint - G_R J)
    A_t = posed_joints - (G_R @ J[..., None])[..., 0]
    W = t["weights"]
    T_R = torch.einsum("vj,bjrc->bvrc", W, G_R)
    T_t = torch.einsum("vj,bjc->bvc", W, A_t)
    verts = (T_R @ v_posed[..., None])[..., 0] + T_t
    return verts, posed_joints


def forward(model: BodyModel, shape: ShapeCoeffs, pose: PoseState) -> PosedBody:
    """Evaluate the model for a single shape/pose (numpy in, numpy out)."""
    with torch.no_grad():
        verts, joints = lbs(
            model,
            torch.as_tensor(shape.beta, dtype=torch.float64)[None],
            torch.as_tensor(pose.body_pose, dtype=torch.float64)[None],
            torch.as_tensor(pose.global_orient, dtype=torch.float64)[None],
        )
    return PosedBody(verts[0].numpy(), joints[0].numpy())
