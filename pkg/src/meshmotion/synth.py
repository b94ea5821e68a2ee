"""Synthetic ground-truth sequences: a scripted body-model animation rendered into the
same observation files the pipeline ingests (landmarks, silhouettes, feature maps),
plus the multi-view data used for registration and feature baking."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation, Slerp

from .archive import read_archive, write_archive, write_raw_array
from .body.model import JOINT_NAMES, NUM_BETAS, NUM_BODY_JOINTS, BodyModel, lbs
from .ingest.features import FeatureBasis, fit_feature_basis
from .ingest.landmarks import LandmarkFrame, joints_to_source_landmarks, remap_landmarks, write_landmarks_jsonl
from .ingest.mesh_io import InputMesh, normalize_vertices, vertex_normals, write_obj
from .ingest.observations import FrameObservations, frame_name
from .ingest.silhouette import write_mask_png
from .metrics import Trajectory
from .register.fit import world_body
from .render import Camera, bake_vertex_features, camera_look_at, project_points, rasterize_attributes, rasterize_silhouette
from .render.camera import ring_cameras, sample_sphere_cameras, save_cameras
from .render.raster import RasterSettings
from .track.params import MotionParams

logger = logging.getLogger(__name__)

SCRIPTS = ("wave", "squat", "walk-in-place")
DESCRIPTOR_LIFTS = 10
DESCRIPTOR_SEED = 7  # fixed: descriptors are part of the ground truth, not of the noise
HARD = RasterSettings(softness_sigma=0.0)


class SynthError(ValueError):
    pass


@dataclass
class NoiseLevels:
    landmark_px: float = 0.0
    silhouette_flip: float = 0.0
    feature_sigma: float = 0.0

    def __post_init__(self):
        if min(self.landmark_px, self.silhouette_flip, self.feature_sigma) < 0:
            raise SynthError("noise levels must be non-negative")


@dataclass
class SynthSpec:
    frames: int = 60
    resolution: tuple = (384, 640)
    feature_resolution: tuple = (48, 80)
    script: str = "wave"  # shipped script name or a path to a keyframe JSON file
    interpolation: str | None = None  # "slerp" or "linear"; None uses the script's own
    beta: tuple = (0.0,) * NUM_BETAS
    global_rot: tuple = (0.0, 0.0, 0.0)  # composed on top of the script's root rotation
    camera_distance: float = 1.4
    camera_height: float = 0.05
    noise: NoiseLevels = field(default_factory=NoiseLevels)
    seed: int = 0
    registration_azimuths: int = 8
    registration_elevations: tuple = (-20.0, 20.0)
    registration_size: int = 1024
    bake_views: int = 24
    bake_size: int = 256
    bake_feature_size: int = 64

    def __post_init__(self):
        if self.frames < 1:
            raise SynthError(f"frame count must be >= 1, got {self.frames}")
        if isinstance(self.noise, dict):
            self.noise = NoiseLevels(**self.noise)
        self.resolution = tuple(int(x) for x in self.resolution)
        self.feature_resolution = tuple(int(x) for x in self.feature_resolution)
        self.beta = tuple(float(b) for b in self.beta)
        self.global_rot = tuple(float(r) for r in self.global_rot)
        self.registration_elevations = tuple(float(e) for e in self.registration_elevations)
        if len(self.beta) != NUM_BETAS:
            raise SynthError(f"beta needs {NUM_BETAS} coefficients")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PoseScript:
    name: str
    interpolation: str
    times: np.ndarray  # [K]
    body_pose: np.ndarray  # [K, 23, 3]
    trans: np.ndarray  # [K, 3] meters
    rot: np.ndarray  # [K, 3]


def load_pose_script(name_or_path) -> PoseScript:
    """Keyframes from a shipped script name or a JSON file.

    Each key may give ``pose`` (joint name -> axis-angle), ``trans`` and ``rot``; joint
    angles default to the script's ``base`` pose, translation and rotation to zero.
    """
    if str(name_or_path) in SCRIPTS:
        raw = json.loads(resources.files("meshmotion.data").joinpath("pose_scripts", f"{name_or_path}.json").read_text())
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise FileNotFoundError(path)
        raw = json.loads(path.read_text())
    keys = raw.get("keys", [])
    if not keys:
        raise SynthError(f"pose script {name_or_path!r} has no keyframes")
    base = raw.get("base", {})
    poses, trans, rot, times = [], [], [], []
    for key in keys:
        bp = np.zeros((NUM_BODY_JOINTS, 3))
        for name, aa in {**base, **key.get("pose", {})}.items():
            if name not in JOINT_NAMES[1:]:
                raise SynthError(f"pose script {name_or_path!r}: unknown joint {name!r}")
            bp[JOINT_NAMES.index(name) - 1] = aa
        poses.append(bp)
        trans.append(key.get("trans", [0.0, 0.0, 0.0]))
        rot.append(key.get("rot", [0.0, 0.0, 0.0]))
        times.append(float(key["time"]))
    times = np.asarray(times)
    if np.any(np.diff(times) <= 0):
        raise SynthError(f"pose script {name_or_path!r}: key times must increase")
    return PoseScript(raw.get("name", str(name_or_path)), raw.get("interpolation", "slerp"), times, np.array(poses), np.array(trans, dtype=np.float64), np.array(rot, dtype=np.float64))


def _interp_rotations(times, rotvecs, query, mode):
    """rotvecs [K, 3] at key ``times`` -> [Q, 3] at ``query`` (clamped to the key range)."""
    q = np.clip(query, times[0], times[-1])
    if len(times) == 1:
        return np.repeat(rotvecs[:1], len(q), 0)
    if mode == "linear":
        return np.stack([np.interp(q, times, rotvecs[:, c]) for c in range(3)], 1)
    return Slerp(times, Rotation.from_rotvec(rotvecs))(q).as_rotvec()


def interpolate_script(script: PoseScript, frames: int, mode: str | None = None):
    """Per-frame (body_pose [F, 23, 3], trans [F, 3], rot [F, 3]) at t = f / (F - 1)."""
    mode = mode or script.interpolation
    if mode not in ("slerp", "linear"):
        raise SynthError(f"unknown interpolation mode {mode!r}")
    q = np.linspace(0.0, 1.0, frames) if frames > 1 else np.zeros(1)
    q = script.times[0] + q * (script.times[-1] - script.times[0])
    body = np.stack([_interp_rotations(script.times, script.body_pose[:, j], q, mode) for j in range(NUM_BODY_JOINTS)], 1)
    trans = np.stack([np.interp(q, script.times, script.trans[:, c]) for c in range(3)], 1)
    rot = _interp_rotations(script.times, script.rot, q, mode)
    return body, trans, rot


def default_video_camera(resolution=(384, 640), distance: float = 1.4, height: float = 0.05) -> Camera:
    """Frontal camera looking at the normalized body (which faces +z)."""
    return camera_look_at((0.0, height, distance), (0.0, 0.0, 0.0), resolution)


def descriptor_lifts(seed: int = DESCRIPTOR_SEED, lifts: int = DESCRIPTOR_LIFTS) -> np.ndarray:
    return np.random.default_rng(seed).normal(size=(lifts, 6, 6))


def vertex_descriptors(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Rest position and normal (6-d) pushed through fixed random linear lifts -> [V, 60]."""
    x = np.concatenate([vertices, vertex_normals(vertices, faces)], 1)
    return np.concatenate([x @ L.T for L in descriptor_lifts()], 1)


@dataclass
class SynthSequence:
    spec: SynthSpec
    ground_truth: MotionParams
    trajectory: Trajectory
    observations: list  # FrameObservations, landmarks in body order (unsmoothed)
    source_landmarks: list  # LandmarkFrame, 33 source landmarks per frame
    mesh: InputMesh
    faces: np.ndarray
    camera: Camera
    basis: FeatureBasis
    vertex_features: np.ndarray  # [V, 64] reduced ground-truth descriptors
    registration_views: list  # (Camera, LandmarkFrame source layout)
    bake_cameras: list
    bake_features: list  # [h, w, 64] feature images of the rest mesh


def _landmark_frame(joints: np.ndarray, camera: Camera, rng, noise_px: float, frame: int) -> LandmarkFrame:
    uv, _ = project_points(joints, camera)
    H, W = camera.image_size
    src = joints_to_source_landmarks(uv / (W, H), np.ones(len(joints)))
    if noise_px > 0:
        src.points = src.points + rng.normal(0.0, noise_px, src.points.shape) / (W, H)
    src.frame = frame
    return src


def generate_sequence(spec: SynthSpec, model: BodyModel) -> SynthSequence:
    script = load_pose_script(spec.script)
    F = spec.frames
    body_pose, trans_m, rot_script = interpolate_script(script, F, spec.interpolation)
    g = Rotation.from_rotvec(spec.global_rot)
    rot = (g * Rotation.from_rotvec(rot_script)).as_rotvec()
    trans_m = g.apply(trans_m)
    beta = np.asarray(spec.beta)

    with torch.no_grad():
        v0, _ = lbs(model, torch.as_tensor(beta)[None], torch.as_tensor(body_pose[:1]), torch.as_tensor(rot[:1]))
    v0 = v0[0].numpy() + trans_m[0]
    mesh_v, centroid, k = normalize_vertices(v0)
    mesh = InputMesh(mesh_v, model.faces.copy(), centroid, k)
    gt = MotionParams(k, beta, body_pose.reshape(F, -1), k * (trans_m - centroid), rot)

    with torch.no_grad():
        V, J = world_body(model, torch.full((F,), k, dtype=torch.float64), torch.as_tensor(beta)[None].expand(F, -1),
                          torch.as_tensor(body_pose), torch.as_tensor(rot), torch.as_tensor(gt.trans))  # fmt: skip
    V, J = V.numpy(), J.numpy()
    V[0] = mesh_v  # frame 0 is the input mesh by definition (differs from the LBS result by roundoff)
    traj = Trajectory(J, V)

    desc = vertex_descriptors(mesh_v, model.faces)
    basis = fit_feature_basis(desc)
    feats = basis.project(desc)

    camera = default_video_camera(spec.resolution, spec.camera_distance, spec.camera_height)
    fcam = camera.with_image_size(*spec.feature_resolution)
    rng = np.random.default_rng(spec.seed)
    obs, src_frames = [], []
    for t in range(F):
        src = _landmark_frame(J[t], camera, rng, spec.noise.landmark_px, t)
        sil = rasterize_silhouette(V[t], model.faces, camera, HARD).image.numpy().astype(np.uint8)
        if spec.noise.silhouette_flip > 0:
            sil ^= (rng.random(sil.shape) < spec.noise.silhouette_flip).astype(np.uint8)
        with torch.no_grad():
            fmap = rasterize_attributes(V[t], model.faces, feats, fcam, HARD).image.numpy()
        if spec.noise.feature_sigma > 0:
            fmap = fmap + rng.normal(0.0, spec.noise.feature_sigma, fmap.shape)
        # round through float32 so in-memory observations match what the dataset files hold
        fmap = fmap.astype(np.float32).astype(np.float64)
        src_frames.append(src)
        obs.append(FrameObservations(remap_landmarks(src), sil, fmap, t))

    reg_cams = ring_cameras(spec.registration_azimuths, spec.registration_elevations, 2.5, image_size=(spec.registration_size,) * 2)
    reg_views = [(c, _landmark_frame(J[0], c, None, 0.0, i)) for i, c in enumerate(reg_cams)]
    bake_cams = sample_sphere_cameras(spec.bake_views, 2.5, image_size=(spec.bake_size,) * 2)
    with torch.no_grad():
        bake_feats = [rasterize_attributes(mesh_v, model.faces, feats, c.with_image_size(spec.bake_feature_size, spec.bake_feature_size), HARD).image.numpy().astype(np.float32) for c in bake_cams]
    logger.info("synthesized %d frames of %r at %dx%d", F, script.name, *spec.resolution)
    return SynthSequence(spec, gt, traj, obs, src_frames, mesh, model.faces.copy(), camera, basis, feats, reg_views, bake_cams, bake_feats)


def bake_mesh_features(mesh_vertices, faces, cameras, feature_images) -> np.ndarray:
    """Bake per-view feature images onto vertices; never-seen vertices copy the nearest seen one."""
    res = bake_vertex_features(mesh_vertices, faces, cameras, feature_images)
    out = res.features
    if res.never_visible.any() and (~res.never_visible).any():
        seen = np.nonzero(~res.never_visible)[0]
        _, j = cKDTree(mesh_vertices[seen]).query(mesh_vertices[res.never_visible])
        out = out.copy()
        out[res.never_visible] = out[seen[j]]
    return out


def write_dataset(seq: SynthSequence, root) -> Path:
    """Write the sequence in the ingest layout (see ``meshmotion.ingest.observations``) plus
    ``mesh.obj``, ``basis.zip``, ``views/registration``, ``views/bake`` and ``gt/``."""
    root = Path(root)
    for sub in ("silhouettes", "features", "views/registration", "views/bake/features", "gt"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    H, W = seq.spec.resolution
    h, w = seq.spec.feature_resolution
    meta = {
        "frames": seq.spec.frames, "image_size": [H, W], "feature_size": [h, w], "channels": int(seq.vertex_features.shape[1]),
        "reduced": True, "script": seq.spec.script, "source": "synthetic", "spec": seq.spec.to_dict(),
    }  # fmt: skip
    (root / "meta.json").write_text(json.dumps(meta, indent=1))
    save_cameras(root / "camera.json", [seq.camera])
    write_landmarks_jsonl(root / "landmarks.jsonl", seq.source_landmarks)
    for ob in seq.observations:
        name = frame_name(ob.frame_index)
        write_mask_png(root / "silhouettes" / f"{name}.png", ob.silhouette)
        write_raw_array(root / "features" / f"{name}.f32", ob.features)
    write_obj(root / "mesh.obj", seq.mesh.vertices, seq.faces)
    seq.basis.save(root / "basis.zip")
    save_cameras(root / "views/registration/cameras.json", [c for c, _ in seq.registration_views])
    write_landmarks_jsonl(root / "views/registration/landmarks.jsonl", [f for _, f in seq.registration_views])
    save_cameras(root / "views/bake/cameras.json", seq.bake_cameras)
    for i, fimg in enumerate(seq.bake_features):
        write_raw_array(root / "views/bake/features" / f"{frame_name(i)}.f32", fimg)
    seq.ground_truth.save(root / "gt")
    seq.trajectory.save(root / "gt" / "trajectory.zip")
    return root
