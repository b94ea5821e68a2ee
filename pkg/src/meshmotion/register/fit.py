"""Fit body-model scale, shape and first-frame pose to an input mesh."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from ..body.model import NUM_BODY_JOINTS, BodyModel, PosedBody, PoseState, ShapeCoeffs, lbs
from ..body.prior import PosePrior
from ..ingest.mesh_io import InputMesh
from ..metrics import procrustes_align
from ..rotations import matrix_to_axis_angle
from .triangulate import Joints3D

logger = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


@dataclass
class Registration:
    scale: float
    shape: ShapeCoeffs
    pose0: PoseState  # pose0.global_orient mirrors rot0
    trans0: np.ndarray
    rot0: np.ndarray

    def __post_init__(self):
        self.trans0 = np.asarray(self.trans0, dtype=np.float64).reshape(3)
        self.rot0 = np.asarray(self.rot0, dtype=np.float64).reshape(3)
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise RegistrationError(f"registration scale must be positive and finite, got {self.scale}")
        if not (np.all(np.isfinite(self.trans0)) and np.all(np.isfinite(self.rot0))):
            raise RegistrationError("registration parameters must be finite")

    def to_dict(self) -> dict:
        d = {
            "scale": float(self.scale),
            "beta": self.shape.beta.tolist(),
            "body_pose": self.pose0.body_pose.tolist(),
            "trans": self.trans0.tolist(),
            "rot": self.rot0.tolist(),
        }
        if self.pose0.latent is not None:
            d["latent"] = np.asarray(self.pose0.latent).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Registration:
        latent = np.asarray(d["latent"]) if d.get("latent") is not None else None
        return cls(float(d["scale"]), ShapeCoeffs(d["beta"]), PoseState(d["body_pose"], d["rot"], latent), d["trans"], d["rot"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> Registration:
        return cls.from_dict(json.loads(Path(path).read_text()))


def world_body(model: BodyModel, scale, beta, body_pose, rot, trans, joints_only: bool = False):
    """Batched s * M(beta, theta, R) + T with torch inputs ([B] / [B,10] / [B,23,3] / [B,3] / [B,3])."""
    v, j = lbs(model, beta, body_pose, rot, joints_only=joints_only)
    s = scale.reshape(-1, 1, 1)
    t = trans[:, None, :]
    return (None if v is None else s * v + t), s * j + t


def registered_body(model: BodyModel, reg: Registration) -> PosedBody:
    with torch.no_grad():
        v, j = world_body(
            model,
            torch.tensor([reg.scale], dtype=torch.float64),
            torch.as_tensor(reg.shape.beta)[None],
            torch.as_tensor(reg.pose0.body_pose)[None],
            torch.as_tensor(reg.rot0)[None],
            torch.as_tensor(reg.trans0)[None],
        )
    return PosedBody(v[0].numpy(), j[0].numpy())


@dataclass
class RegistrationConfig:
    iterations: int = 1000
    lr: float = 0.05
    stage1_fraction: float = 0.3
    nn_refresh: int = 50
    w_joints: float = 1.0
    w_p2p: float = 1.0
    w_beta: float = 1e-5
    w_theta: float = 1e-5
    p2p_direction: str = "symmetric"  # "model_to_mesh", "mesh_to_model" or "symmetric"
    rel_tol: float = 1e-6
    patience: int = 50
    lr_final_factor: float = 0.05
    min_joints: int = 8
    init: str = "procrustes"  # or "centroid"


@dataclass
class RegistrationResult:
    registration: Registration
    history: list = field(default_factory=list)  # dicts: iteration, stage, loss, joints, p2p
    iterations_run: int = 0


def smooth_norm(x: torch.Tensor) -> torch.Tensor:
    return torch.sqrt((x * x).sum() + 1e-12)


def joint_loss(pred: torch.Tensor, target: torch.Tensor, conf: torch.Tensor) -> torch.Tensor:
    """Confidence-weighted mean squared joint distance."""
    return (conf * ((pred - target) ** 2).sum(-1)).sum() / conf.sum()


class P2PTerm:
    """Mean squared nearest-vertex distance; correspondences refreshed on demand."""

    def __init__(self, mesh_vertices: np.ndarray, direction: str = "symmetric"):
        if direction not in ("model_to_mesh", "mesh_to_model", "symmetric"):
            raise RegistrationError(f"unknown p2p direction {direction!r}")
        self.mesh = torch.as_tensor(mesh_vertices, dtype=torch.float64)
        self.tree = cKDTree(mesh_vertices)
        self.direction = direction
        self.to_mesh = self.to_model = None

    def refresh(self, body_vertices: torch.Tensor) -> None:
        b = body_vertices.detach().numpy()
        if self.direction != "mesh_to_model":
            self.to_mesh = torch.as_tensor(self.tree.query(b)[1])
        if self.direction != "model_to_mesh":
            self.to_model = torch.as_tensor(cKDTree(b).query(self.mesh.numpy())[1])

    def __call__(self, body_vertices: torch.Tensor) -> torch.Tensor:
        loss = body_vertices.new_zeros(())
        if self.to_mesh is not None:
            loss = loss + ((body_vertices - self.mesh[self.to_mesh]) ** 2).sum(-1).mean()
        if self.to_model is not None:
            loss = loss + ((self.mesh - body_vertices[self.to_model]) ** 2).sum(-1).mean()
        return loss


def initial_alignment(model: BodyModel, joints: Joints3D, mode: str = "procrustes"):
    """Scale, rotation (axis-angle about the root) and translation mapping the rest
    joints onto the target joints."""
    J = model.rest_joints
    w = joints.confidence
    if mode == "procrustes":
        T = procrustes_align(J, joints.positions, "similarity", weights=w)
        s, R = T.scale, T.rotation
    else:
        m = (w @ joints.positions) / w.sum()
        spread_t = np.sqrt((w * ((joints.positions - m) ** 2).sum(1)).sum() / w.sum())
        mj = (w @ J) / w.sum()
        spread_m = np.sqrt((w * ((J - mj) ** 2).sum(1)).sum() / w.sum())
        s, R = spread_t / spread_m, np.eye(3)
        T = type("T", (), {"translation": m - s * mj})
    # s (R (x - J0) + J0) + trans = s R x + t  =>  trans = t - s (J0 - R J0)
    J0 = J[0]
    trans = T.translation - s * (J0 - R @ J0)
    rot = matrix_to_axis_angle(torch.as_tensor(R)[None])[0].numpy()
    return float(s), rot, trans


def fit_registration(mesh: InputMesh, joints: Joints3D, model: BodyModel, config: RegistrationConfig | None = None,
                     prior: PosePrior | None = None) -> RegistrationResult:  # fmt: skip
    """Staged Adam fit: (1) scale/rotation/translation on the joint term, (2) everything
    on joints + nearest-vertex terms + shape and pose priors."""
    cfg = config or RegistrationConfig()
    prior = prior or PosePrior("raw")
    conf_np = np.where(joints.confidence > 0, joints.confidence, 0.0)
    if (conf_np > 0).sum() < cfg.min_joints:
        raise RegistrationError(f"precondition failed: {int((conf_np > 0).sum())} confident joints, need at least {cfg.min_joints}")
    target = torch.as_tensor(np.where(conf_np[:, None] > 0, joints.positions, 0.0))
    conf = torch.as_tensor(conf_np)

    s0, rot0, trans0 = initial_alignment(model, Joints3D(target.numpy(), conf_np), cfg.init)
    log_s = torch.tensor([math.log(s0)], dtype=torch.float64, requires_grad=True)
    rot = torch.tensor(rot0[None], dtype=torch.float64, requires_grad=True)
    trans = torch.tensor(trans0[None], dtype=torch.float64, requires_grad=True)
    beta = torch.zeros(1, 10, dtype=torch.float64, requires_grad=True)
    code = torch.zeros(1, prior.dim, dtype=torch.float64, requires_grad=True)

    def evaluate(joints_only=False):
        body_pose = prior.to_body_pose(code)
        return world_body(model, log_s.exp(), beta, body_pose, rot, trans, joints_only)

    history = []
    n1 = int(round(cfg.iterations * cfg.stage1_fraction))
    n2 = cfg.iterations - n1

    # stage 1: rigid + scale on the joint term; a step that raises the loss is undone
    # and the learning rate halved, which keeps the full-batch loss monotone
    opt = torch.optim.Adam([log_s, rot, trans], lr=cfg.lr)
    prev = None
    snapshot = None
    it = 0
    for it in range(n1):
        _, J = evaluate(joints_only=True)
        loss = cfg.w_joints * joint_loss(J[0], target, conf)
        if not torch.isfinite(loss):
            raise RegistrationError(f"loss became non-finite at iteration {it}")
        if prev is not None and loss.item() > prev:
            with torch.no_grad():
                for p, s in zip((log_s, rot, trans), snapshot):
                    p.copy_(s)
            for g in opt.param_groups:
                g["lr"] *= 0.5
            history.append({"iteration": it, "stage": 1, "loss": prev, "joints": prev / cfg.w_joints, "p2p": float("nan")})
            continue
        prev = loss.item()
        history.append({"iteration": it, "stage": 1, "loss": prev, "joints": prev / cfg.w_joints, "p2p": float("nan")})
        snapshot = [p.detach().clone() for p in (log_s, rot, trans)]
        opt.zero_grad()
        loss.backward()
        opt.step()
    if snapshot is not None and prev is not None:
        # the last step was never checked; keep the best verified parameters
        with torch.no_grad():
            _, J = evaluate(joints_only=True)
            if cfg.w_joints * joint_loss(J[0], target, conf).item() > prev:
                for p, s in zip((log_s, rot, trans), snapshot):
                    p.copy_(s)

    # stage 2: everything
    p2p = P2PTerm(mesh.vertices, cfg.p2p_direction)
    opt = torch.optim.Adam([log_s, rot, trans, beta, code], lr=cfg.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda k: cfg.lr_final_factor + (1 - cfg.lr_final_factor) * 0.5 * (1 + math.cos(math.pi * min(k, n2) / max(n2, 1)))
    )
    losses = []
    iterations_run = n1
    for k in range(n2):
        it = n1 + k
        V, J = evaluate()
        if k % cfg.nn_refresh == 0:
            p2p.refresh(V[0])
        lj = joint_loss(J[0], target, conf)
        lp = p2p(V[0])
        loss = cfg.w_joints * lj + cfg.w_p2p * lp + cfg.w_beta * smooth_norm(beta) + cfg.w_theta * smooth_norm(code)
        if not torch.isfinite(loss):
            raise RegistrationError(f"loss became non-finite at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        losses.append(loss.item())
        history.append({"iteration": it, "stage": 2, "loss": loss.item(), "joints": lj.item(), "p2p": lp.item()})
        iterations_run = it + 1
        if it % 100 == 0:
            logger.info("registration it %d loss %.3e (joints %.3e, p2p %.3e)", it, loss.item(), lj.item(), lp.item())
        if len(losses) > cfg.patience:
            old = losses[-1 - cfg.patience]
            if abs(old - losses[-1]) <= cfg.rel_tol * abs(old):
                logger.info("registration converged at iteration %d", it)
                break

    with torch.no_grad():
        body_pose = prior.to_body_pose(code)[0].numpy()
    latent = code.detach()[0].numpy().copy() if prior.mode == "latent" else None
    reg = Registration(
        float(log_s.exp().item()),
        ShapeCoeffs(beta.detach()[0].numpy()),
        PoseState(body_pose.reshape(NUM_BODY_JOINTS, 3), rot.detach()[0].numpy(), latent),
        trans.detach()[0].numpy(),
        rot.detach()[0].numpy(),
    )
    return RegistrationResult(reg, history, iterations_run)
