"""Sequence tracking: optimize the motion parameterization, the feature mapper and the
per-vertex offsets against landmark, silhouette and feature observations."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..attach import AttachmentMap
from ..body.model import BodyModel
from ..ingest.mesh_io import write_obj
from ..ingest.observations import frame_name
from ..metrics import Trajectory
from ..register.fit import Registration, world_body
from ..render import Camera, RasterSettings, project_torch, rasterize_attributes, rasterize_silhouette
from .deform import deform_batch, deform_sequence
from .losses import (
    GM_SIGMA,
    arap_graph,
    loss_arap,
    loss_bending,
    loss_feature,
    loss_pose_prior,
    loss_reprojection,
    loss_silhouette,
    loss_temporal,
)
from .mapper import FeatureMapper
from .params import DirectParameterization, MotionParams, NeuralParameterization, TrackError

logger = logging.getLogger(__name__)

# loss terms that ``TrackConfig.disable`` can switch off (ablation rows)
TERMS = ("joints", "silhouette", "feature", "temporal", "bending", "pose_prior", "arap", "delta")
STAGES = ("A", "B", "C")


@dataclass
class LossWeights:
    # Temporal and prior weights are recalibrated for the per-frame batch-mean data terms: the
    # temporal penalties are unsquared (total-variation like) and at unit weight they pin every
    # frame to the anchor pose before the landmark gradient can move it.
    joints: float = 10.0
    silhouette: float = 1.0
    feature: float = 0.5
    temp_trans: float = 1e-2
    temp_rot: float = 1e-2
    temp_pose: float = 1e-3
    temp_joints: float = 1e-3
    bending: float = 1e-3
    pose_prior: float = 1e-3
    arap: float = 1.0
    delta: float = 10.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise TrackError(f"loss weight {k} must be non-negative, got {v}")


@dataclass
class TrackConfig:
    iterations: int = 4000
    lr: float = 1e-3
    delta_lr: float | None = 1e-4  # learning rate of the per-vertex offsets; None uses lr
    batch_size: int = 8
    stage_fractions: tuple = (0.4, 0.4, 0.2)
    weights: LossWeights = field(default_factory=LossWeights)
    gm_sigma: float = GM_SIGMA
    parameterization: str = "neural"  # or "direct" (ablation)
    pe_max_freq: float = 16.0
    softness_sigma: float = 1e-4
    faces_per_pixel: int = 8
    disable: tuple = ()
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        self.stage_fractions = tuple(float(f) for f in self.stage_fractions)
        self.disable = tuple(self.disable)
        unknown = set(self.disable) - set(TERMS)
        if unknown:
            raise TrackError(f"unknown loss terms to disable: {sorted(unknown)} (known: {', '.join(TERMS)})")
        if self.parameterization not in ("neural", "direct"):
            raise TrackError(f"unknown parameterization {self.parameterization!r}")
        if len(self.stage_fractions) != 3 or min(self.stage_fractions) < 0 or not math.isclose(sum(self.stage_fractions), 1.0):
            raise TrackError("stage fractions must be three non-negative numbers summing to 1")
        if self.iterations < 0 or self.batch_size < 1:
            raise TrackError("iterations must be >= 0 and batch size >= 1")

    def weight(self, name: str) -> float:
        """Weight of a term, zero when disabled; temporal sub-terms share the 'temporal' switch."""
        group = "temporal" if name.startswith("temp_") else name
        return 0.0 if group in self.disable else getattr(self.weights, name)

    def stage_of(self, it: int) -> str:
        a = round(self.stage_fractions[0] * self.iterations)
        b = a + round(self.stage_fractions[1] * self.iterations)
        return "A" if it < a else ("B" if it < b else "C")


@dataclass
class TrackResult:
    params: MotionParams
    history: list  # per-iteration dicts: iteration, stage, total and each term
    mapper: FeatureMapper
    seconds: float


@dataclass
class _Targets:
    landmarks: torch.Tensor  # [F, 24, 2]
    confidence: torch.Tensor  # [F, 24]
    silhouettes: list
    features: list
    observed_fg: list  # observed foreground at feature resolution


def _targets(observations, feature_size) -> _Targets:
    h, w = feature_size
    lm = torch.as_tensor(np.stack([o.landmarks.points for o in observations]))
    conf = torch.as_tensor(np.stack([o.landmarks.confidence for o in observations]))
    fg = []
    for o in observations:
        H, W = o.silhouette.shape
        rows = np.minimum(((np.arange(h) + 0.5) * H / h).astype(np.int64), H - 1)
        cols = np.minimum(((np.arange(w) + 0.5) * W / w).astype(np.int64), W - 1)
        fg.append(o.silhouette[np.ix_(rows, cols)].astype(bool))
    return _Targets(lm, conf, [torch.as_tensor(o.silhouette, dtype=torch.float64) for o in observations],
                    [torch.as_tensor(np.asarray(o.features, dtype=np.float64)) for o in observations], fg)  # fmt: skip


def _check_inputs(observations, att: AttachmentMap, model: BodyModel, vertex_features):
    if not observations:
        raise TrackError("no observations to track")
    if att.n_body_vertices != model.num_vertices:
        raise TrackError("attachment was built against a different body topology")
    if not any(o.silhouette.any() for o in observations):
        raise TrackError("every observed silhouette is empty")
    C = observations[0].features.shape[-1]
    if vertex_features.shape != (att.num_vertices, C):
        raise TrackError(f"vertex features {vertex_features.shape} do not match {att.num_vertices} vertices x {C} channels")


def track_sequence(mesh_faces, att: AttachmentMap, model: BodyModel, registration: Registration, observations,
                   vertex_features, camera: Camera, config: TrackConfig | None = None) -> TrackResult:  # fmt: skip
    """Fit per-frame motion to ``observations`` (FrameObservations in frame order).

    Stage A optimizes landmarks with the priors and temporal terms, stage B adds the
    silhouette and feature terms (with the feature mapper), stage C unlocks per-vertex
    offsets regularized by ARAP and their squared magnitude.
    """
    cfg = config or TrackConfig()
    observations = sorted(observations, key=lambda o: o.frame_index)
    vertex_features = np.asarray(vertex_features, dtype=np.float64)
    _check_inputs(observations, att, model, vertex_features)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    F = len(observations)
    faces = np.asarray(mesh_faces, dtype=np.int64)
    H, W = camera.image_size
    if observations[0].silhouette.shape != (H, W):
        raise TrackError(f"silhouettes are {observations[0].silhouette.shape}, camera expects {(H, W)}")
    fsize = observations[0].features.shape[:2]
    fcam = camera.with_image_size(*fsize)
    tg = _targets(observations, fsize)
    settings = RasterSettings(softness_sigma=cfg.softness_sigma, faces_per_pixel=cfg.faces_per_pixel)

    anchors = (registration.pose0.body_pose.reshape(-1), registration.trans0, registration.rot0)
    if cfg.parameterization == "neural":
        param = NeuralParameterization(F, *anchors, max_freq=cfg.pe_max_freq)
    else:
        param = DirectParameterization(F, *anchors)
    mapper = FeatureMapper(vertex_features.shape[1])
    delta = torch.zeros(F, att.num_vertices, 3, dtype=torch.float64, requires_grad=True)
    vfeat = torch.as_tensor(vertex_features)
    scale = torch.tensor([registration.scale], dtype=torch.float64)
    beta = torch.as_tensor(registration.shape.beta)[None]
    graph = arap_graph(att.rest_vertices, faces)
    all_t = torch.arange(F)

    opt = torch.optim.Adam([{"params": list(param.parameters())}, {"params": list(mapper.parameters())}, {"params": [delta]}], lr=cfg.lr)
    history = []
    t0 = time.perf_counter()
    for it in range(cfg.iterations):
        stage = cfg.stage_of(it)
        # the mapper only moves once the feature term is live, offsets only in stage C
        opt.param_groups[1]["lr"] = cfg.lr if stage != "A" else 0.0
        opt.param_groups[2]["lr"] = (cfg.lr if cfg.delta_lr is None else cfg.delta_lr) if stage == "C" else 0.0
        batch = torch.sort(torch.randperm(F, generator=gen)[: min(cfg.batch_size, F)]).values
        opt.zero_grad()
        terms = _objective(cfg, stage, param, mapper, delta, model, att, faces, graph, scale, beta, camera, fcam, settings, tg, vfeat, batch, all_t)
        total = sum(terms.values())
        if not torch.isfinite(total):
            raise TrackError(f"loss became non-finite in stage {stage} at iteration {it}")
        total.backward()
        if stage != "C":
            delta.grad = None
        opt.step()
        rec = {"iteration": it, "stage": stage, "seconds": time.perf_counter() - t0, "total": total.item()}
        rec.update({k: v.item() for k, v in terms.items()})
        history.append(rec)
        if cfg.log_every and it % cfg.log_every == 0:
            logger.info("it %d stage %s total %.6g %s", it, stage, rec["total"], {k: round(v, 8) for k, v in rec.items() if k not in ("iteration", "stage", "seconds", "total")})

    with torch.no_grad():
        pose, trans, rot = param(all_t)
    used_delta = cfg.stage_fractions[2] > 0 and cfg.iterations > 0
    params = MotionParams(registration.scale, registration.shape.beta, pose.numpy(), trans.numpy(), rot.numpy(),
                          delta.detach().numpy().copy() if used_delta else None)  # fmt: skip
    return TrackResult(params, history, mapper, time.perf_counter() - t0)


def _objective(cfg, stage, param, mapper, delta, model, att, faces, graph, scale, beta, camera, fcam, settings, tg, vfeat, batch, all_t):
    F = len(all_t)
    terms = {}
    pose, trans, rot = param(all_t)
    B = len(batch)
    # regularizers over the whole sequence (cheap: joints only)
    if F >= 2 and any(cfg.weight(k) > 0 for k in ("temp_trans", "temp_rot", "temp_pose", "temp_joints")):
        _, joints_all = world_body(model, scale.expand(F), beta.expand(F, -1), pose.reshape(F, -1, 3), rot, trans, joints_only=True)
        for name, series in (("temp_trans", trans), ("temp_rot", rot), ("temp_pose", pose), ("temp_joints", joints_all)):
            if cfg.weight(name) > 0:
                terms[name] = cfg.weight(name) * loss_temporal(series)
    if cfg.weight("bending") > 0:
        terms["bending"] = cfg.weight("bending") * loss_bending(pose)
    if cfg.weight("pose_prior") > 0:
        terms["pose_prior"] = cfg.weight("pose_prior") * loss_pose_prior(pose)

    pb, tb, rb = pose[batch], trans[batch], rot[batch]
    need_mesh = stage != "A" and any(cfg.weight(k) > 0 for k in ("silhouette", "feature"))
    if need_mesh or stage == "C":
        d = deform_batch(att, model, scale, beta[0], pb, tb, rb, delta[batch] if stage == "C" else None)
        joints = d.joints
    else:
        d = None
        _, joints = world_body(model, scale.expand(B), beta.expand(B, -1), pb.reshape(B, -1, 3), rb, tb, joints_only=True)

    if cfg.weight("joints") > 0:
        uv, _, _ = project_torch(joints, camera)
        H, W = camera.image_size
        norm = uv / torch.tensor([W, H], dtype=uv.dtype)
        terms["joints"] = cfg.weight("joints") * loss_reprojection(norm, tg.landmarks[batch], tg.confidence[batch], cfg.gm_sigma)

    if need_mesh:
        sil_terms, feat_terms = [], []
        mapped = mapper(vfeat)
        for k, t in enumerate(batch.tolist()):
            verts = d.mesh_vertices[k]
            if cfg.weight("silhouette") > 0:
                img = rasterize_silhouette(verts, faces, camera, settings).image
                sil_terms.append(loss_silhouette(img, tg.silhouettes[t]))
            if cfg.weight("feature") > 0:
                r = rasterize_attributes(verts, faces, mapped, fcam, return_mask=True)
                fl = loss_feature(r.image, tg.features[t], r.diagnostics["mask"] & tg.observed_fg[t])
                if not fl.empty:
                    feat_terms.append(fl.value)
        if sil_terms:
            terms["silhouette"] = cfg.weight("silhouette") * torch.stack(sil_terms).mean()
        if feat_terms:
            terms["feature"] = cfg.weight("feature") * torch.stack(feat_terms).mean()

    if stage == "C":
        db = delta[batch]
        if cfg.weight("arap") > 0:
            base = d.mesh_vertices - db
            terms["arap"] = cfg.weight("arap") * loss_arap(d.mesh_vertices, base.detach(), graph=graph)
        if cfg.weight("delta") > 0:
            terms["delta"] = cfg.weight("delta") * (db * db).sum(-1).mean()
    return terms


def write_track_outputs(result: TrackResult, att: AttachmentMap, model: BodyModel, mesh_faces, out_dir) -> Path:
    """Write params.jsonl, delta.zip, meshes/<frame>.obj, trajectory.zip and loss.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.params.save(out)
    mesh_v, _, joints = deform_sequence(att, model, result.params)
    (out / "meshes").mkdir(exist_ok=True)
    for t, v in enumerate(mesh_v):
        write_obj(out / "meshes" / f"{frame_name(t)}.obj", v, mesh_faces)
    Trajectory(joints, mesh_v).save(out / "trajectory.zip")
    columns = ["iteration", "stage", "seconds", "total"] + [k for k in _term_columns() if any(k in h for h in result.history)]
    with open(out / "loss.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, restval="")
        writer.writeheader()
        for h in result.history:
            writer.writerow({k: h[k] for k in columns if k in h})
    return out


def _term_columns():
    return ["joints", "silhouette", "feature", "temp_trans", "temp_rot", "temp_pose", "temp_joints", "bending", "pose_prior", "arap", "delta"]
